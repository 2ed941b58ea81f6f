"""Sliding-window geometry, center-weighted aggregation, subject scoring.

Grids use 50% overlap (stride = floor(patch/2)) with the final window
clamped to the image border, matching the convention of patch-based
segmentation pipelines. Per-patch scalar scores are blended into an
image-sized mask with a Gaussian importance map, then reduced to one
subject-level value.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateScores, ValidationError


@dataclass(frozen=True)
class PatchGrid:
    image_shape: tuple[int, ...]
    patch_size: tuple[int, ...]
    origins: tuple[tuple[int, ...], ...]

    def __len__(self) -> int:
        return len(self.origins)


@dataclass(frozen=True)
class ImportanceMap:
    """Per-patch voxel weights in (0, 1], peaked at the patch center."""

    weights: np.ndarray


@dataclass(frozen=True)
class UncertaintyMask:
    values: np.ndarray
    subject_id: str = ""


def _axis_origins(extent: int, patch: int) -> list[int]:
    if patch >= extent:
        return [0]
    stride = max(patch // 2, 1)
    origins = list(range(0, extent - patch, stride))
    origins.append(extent - patch)
    return origins


def make_grid(image_shape, patch_size) -> PatchGrid:
    """Deterministic 50%-overlap sliding-window decomposition.

    Per axis the origins are 0, s, 2s, ... with s = floor(patch/2) and the
    final origin clamped to extent - patch (deduplicated). The cross
    product is ordered axis-major (first axis slowest).
    """
    image_shape = tuple(int(e) for e in image_shape)
    patch_size = tuple(int(e) for e in patch_size)
    if len(image_shape) != len(patch_size):
        raise ValidationError(
            f"image ndim {len(image_shape)} != patch ndim {len(patch_size)}"
        )
    if any(e < 1 for e in image_shape) or any(p < 1 for p in patch_size):
        raise ValidationError(
            f"zero extent in image {image_shape} or patch {patch_size}"
        )
    per_axis = [_axis_origins(e, p) for e, p in zip(image_shape, patch_size)]
    origins = tuple(itertools.product(*per_axis))
    return PatchGrid(image_shape, patch_size, origins)


def gaussian_importance(patch_size, sigma_scale: float = 0.125) -> ImportanceMap:
    """Separable Gaussian weights, sigma = sigma_scale * extent per axis.

    Floored at 1e-8 of the peak so every voxel keeps strictly positive
    weight, then rescaled to max 1.
    """
    patch_size = tuple(int(e) for e in patch_size)
    if any(e < 1 for e in patch_size):
        raise ValidationError(f"non-positive patch extent {patch_size}")
    if sigma_scale <= 0:
        raise ValidationError(f"sigma_scale must be positive, got {sigma_scale}")
    weights = np.ones(patch_size, dtype=np.float64)
    for axis, extent in enumerate(patch_size):
        center = (extent - 1) / 2.0
        sigma = sigma_scale * extent
        x = np.arange(extent, dtype=np.float64)
        g = np.exp(-0.5 * ((x - center) / sigma) ** 2)
        shape = [1] * len(patch_size)
        shape[axis] = extent
        weights = weights * g.reshape(shape)
    peak = weights.max()
    weights = np.maximum(weights, 1e-8 * peak)
    weights /= peak
    return ImportanceMap(weights)


def aggregate(
    grid: PatchGrid,
    patch_scores,
    importance: ImportanceMap,
    subject_id: str = "",
) -> UncertaintyMask:
    """Blend per-patch scalars into an image-sized weighted-average mask.

    value[v] = sum over covering patches of score * w(v), divided by the
    accumulated weight at v, so overlap multiplicity cancels out.
    """
    scores = np.asarray(patch_scores, dtype=np.float64)
    if scores.ndim != 1 or len(scores) != len(grid.origins):
        raise ValidationError(
            f"{len(scores)} patch scores for a {len(grid.origins)}-patch grid"
        )
    if not np.isfinite(scores).all():
        raise ValidationError("non-finite patch score")
    if importance.weights.shape != grid.patch_size:
        raise ValidationError(
            f"importance shape {importance.weights.shape} != patch {grid.patch_size}"
        )
    acc = np.zeros(grid.image_shape, dtype=np.float64)
    wsum = np.zeros(grid.image_shape, dtype=np.float64)
    for origin, score in zip(grid.origins, scores):
        window = tuple(
            slice(o, min(o + p, e))
            for o, p, e in zip(origin, grid.patch_size, grid.image_shape)
        )
        wpart = importance.weights[tuple(slice(0, s.stop - s.start) for s in window)]
        acc[window] += score * wpart
        wsum[window] += wpart
    if (wsum <= 0.0).any():
        raise ValidationError("voxel with zero accumulated weight; grid does not cover")
    return UncertaintyMask(acc / wsum, subject_id)


def aggregate_fields(
    grid: PatchGrid,
    patch_fields,
    importance: ImportanceMap,
    subject_id: str = "",
) -> UncertaintyMask:
    """Like aggregate, but each patch contributes a voxel field.

    A constant field reduces to the scalar path exactly; non-constant
    fields let per-voxel quantities (class probabilities, error maps)
    ride the same center-weighted blending.
    """
    fields = [np.asarray(f, dtype=np.float64) for f in patch_fields]
    if len(fields) != len(grid.origins):
        raise ValidationError(
            f"{len(fields)} patch fields for a {len(grid.origins)}-patch grid"
        )
    if importance.weights.shape != grid.patch_size:
        raise ValidationError(
            f"importance shape {importance.weights.shape} != patch {grid.patch_size}"
        )
    acc = np.zeros(grid.image_shape, dtype=np.float64)
    wsum = np.zeros(grid.image_shape, dtype=np.float64)
    for origin, field in zip(grid.origins, fields):
        if field.shape != grid.patch_size:
            raise ValidationError(
                f"patch field shape {field.shape} != patch {grid.patch_size}"
            )
        if not np.isfinite(field).all():
            raise ValidationError("non-finite patch field value")
        window = tuple(
            slice(o, min(o + p, e))
            for o, p, e in zip(origin, grid.patch_size, grid.image_shape)
        )
        sub = tuple(slice(0, s.stop - s.start) for s in window)
        acc[window] += field[sub] * importance.weights[sub]
        wsum[window] += importance.weights[sub]
    if (wsum <= 0.0).any():
        raise ValidationError("voxel with zero accumulated weight; grid does not cover")
    return UncertaintyMask(acc / wsum, subject_id)


def subject_score(mask: UncertaintyMask) -> float:
    """Arithmetic mean over all voxels."""
    return float(np.mean(mask.values))


def normalize_scores(train_raw, query_raw: float) -> float:
    """Affine map sending [train min, 2 * train max] onto [0, 1], clamped.

    Requires a spread-out, nonnegative-oriented train set: the map is only
    monotone when 2*max - min is positive.
    """
    train = np.asarray(train_raw, dtype=np.float64)
    if train.size == 0:
        raise ValidationError("empty train score set")
    lo = float(train.min())
    hi = float(train.max())
    if hi <= lo:
        raise DegenerateScores(
            "all train scores identical; uncertainty carries no signal "
            "(check that features/logits vary across training subjects)"
        )
    span = 2.0 * hi - lo
    if span <= 0.0:
        raise DegenerateScores(
            "non-positive normalization span 2*max - min; raw uncertainties "
            "must be oriented so the train maximum is positive"
        )
    u = (float(query_raw) - lo) / span
    return min(max(u, 0.0), 1.0)
