"""Seeded synthetic data for desk-scale end-to-end runs.

Subjects live in a small volume covered by eight overlapping patches.
Each patch gets a feature map drawn from one fixed anisotropic Gaussian;
shifted cohorts move the mean along a fixed random unit direction by a
multiple of the in-distribution standard deviation along that direction,
so shift magnitude is measured in detectable units. Logits, prediction
samples, and ground truth degrade with the shift so quality metrics have
something real to measure. Everything derives from one seed through
spawned child sequences, making output trees byte-identical across runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics
from .errors import ValidationError
from .gaussian import fit
from .mahalanobis import batch_mahalanobis
from .manifest import SubjectManifest, write_manifest
from .patches import make_grid
from .tensorio import Tensor, write_tensor

# background offset keeps per-voxel free energy positive, which the
# shared score normalization needs (it assumes a positive score span)
_LOGIT_BASE = -5.0


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    feature_channels: int = 8
    feature_spatial: tuple[int, ...] = (2, 2, 2)
    image_shape: tuple[int, ...] = (6, 6, 6)
    patch_size: tuple[int, ...] = (4, 4, 4)
    n_train: int = 200
    n_id_test: int = 20
    n_ood: int = 20
    shift_magnitudes: tuple[float, ...] = (1.0, 2.0, 4.0)
    covariance_condition: float = 100.0
    n_samples: int = 4
    dice_base: float = 0.9
    dice_slope: float = 0.15
    dice_noise: float = 0.05
    dice_lo: float = 0.05
    dice_hi: float = 0.95
    feature_tap: str = "encoder-end"

    @property
    def feature_dim(self) -> int:
        return self.feature_channels * int(np.prod(self.feature_spatial))

    def validate(self) -> None:
        if self.n_train < 2 or self.n_id_test < 1 or self.n_ood < 1:
            raise ValidationError("subject counts too small to be useful")
        mags = self.shift_magnitudes
        if any(m < 0 for m in mags) or list(mags) != sorted(mags):
            raise ValidationError("shift magnitudes must be non-negative and sorted")
        if self.feature_dim < 2:
            raise ValidationError("feature dimension must be at least 2")
        if self.covariance_condition < 1:
            raise ValidationError("covariance condition must be >= 1")
        if self.n_samples < 2:
            raise ValidationError("need at least 2 prediction samples")


@dataclass(frozen=True)
class _Population:
    mu0: np.ndarray
    factor: np.ndarray      # factor @ factor.T is the covariance
    direction: np.ndarray   # unit vector of the shift
    sigma_along: float      # ID std along the shift direction


def _population(cfg: SynthConfig, rng: np.random.Generator) -> _Population:
    d = cfg.feature_dim
    a = rng.standard_normal((d, d))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))  # canonical sign, keeps Q reproducible
    eigs = np.geomspace(cfg.covariance_condition, 1.0, d)
    factor = q * np.sqrt(eigs)[None, :]
    mu0 = rng.normal(0.0, 2.0, d)
    u = rng.standard_normal(d)
    u /= np.linalg.norm(u)
    sigma_along = float(np.linalg.norm(np.sqrt(eigs) * (q.T @ u)))
    return _Population(mu0=mu0, factor=factor, direction=u,
                       sigma_along=sigma_along)


def _ground_truth_box(image_shape: tuple[int, ...]) -> np.ndarray:
    gt = np.zeros(image_shape, dtype=np.uint8)
    core = tuple(slice(max((e - 4) // 2, 0), max((e - 4) // 2, 0) + min(4, e))
                 for e in image_shape)
    gt[core] = 1
    return gt


def _target_mask(gt: np.ndarray, dice_target: float,
                 rng: np.random.Generator) -> np.ndarray:
    """Subset of the ground-truth voxels sized so dice lands near target.

    With the prediction inside the truth, dice(k) = 2k/(k + |gt|);
    inverting gives the voxel count for a wanted value.
    """
    n_gt = int(gt.sum())
    k = int(round(n_gt * dice_target / (2.0 - dice_target)))
    k = min(max(k, 0), n_gt)
    mask = np.zeros_like(gt)
    coords = np.argwhere(gt == 1)
    keep = rng.permutation(n_gt)[:k]
    for idx in keep:
        mask[tuple(coords[idx])] = 1
    return mask


def _logit_fields(pred_mask: np.ndarray, magnitude: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Two-class logit volume whose argmax is pred_mask exactly.

    The class gap shrinks as the shift grows, so confidence-based
    scorers see degradation; per-voxel jitter never flips the sign.
    """
    gap = 4.0 / (1.0 + magnitude)
    sign = np.where(pred_mask > 0, 1.0, -1.0)
    scale = np.clip(1.0 + 0.15 * rng.standard_normal(pred_mask.shape), 0.05, None)
    g = sign * gap * scale
    return np.stack([_LOGIT_BASE - g / 2.0, _LOGIT_BASE + g / 2.0])


def _sample_fields(logit_gap: np.ndarray, magnitude: float, n_samples: int,
                   rng: np.random.Generator) -> list[np.ndarray]:
    prob = 1.0 / (1.0 + np.exp(-logit_gap))
    spread = 0.02 + 0.08 * magnitude / (1.0 + magnitude)
    return [np.clip(prob + spread * rng.standard_normal(prob.shape), 0.0, 1.0)
            for _ in range(n_samples)]


def _write(path: Path, dtype: str, arr: np.ndarray) -> None:
    write_tensor(Tensor(dtype, arr.shape, arr), path)


def _emit_subject(cfg: SynthConfig, pop: _Population, subject_id: str,
                  role: str, tag: str, magnitude: float, out_dir: Path,
                  seq: np.random.SeedSequence) -> SubjectManifest:
    rng = np.random.default_rng(seq)
    sub_dir = out_dir / subject_id
    sub_dir.mkdir(parents=True, exist_ok=True)
    grid = make_grid(cfg.image_shape, cfg.patch_size)
    n_patches = len(grid.origins)
    d = cfg.feature_dim
    map_shape = (cfg.feature_channels, *cfg.feature_spatial)
    mean = pop.mu0 + magnitude * pop.sigma_along * pop.direction

    feature_files = []
    for i in range(n_patches):
        z = mean + pop.factor @ rng.standard_normal(d)
        path = sub_dir / f"feat_{i:03d}.tensor"
        _write(path, "f32", z.astype(np.float32).reshape(map_shape))
        feature_files.append((i, path))

    gt = _ground_truth_box(cfg.image_shape)
    dice_target = float(np.clip(
        cfg.dice_base - cfg.dice_slope * magnitude
        + rng.uniform(-cfg.dice_noise, cfg.dice_noise),
        cfg.dice_lo, cfg.dice_hi))
    pred_mask = _target_mask(gt, dice_target, rng)
    logits = _logit_fields(pred_mask, magnitude, rng)
    gap = logits[1] - logits[0]
    samples = _sample_fields(gap, magnitude, cfg.n_samples, rng)

    logit_files = []
    sample_files = []
    for i, origin in enumerate(grid.origins):
        window = tuple(slice(o, o + p) for o, p in zip(origin, cfg.patch_size))
        lp = sub_dir / f"logit_{i:03d}.tensor"
        _write(lp, "f32", logits[(slice(None), *window)].astype(np.float32))
        logit_files.append((i, lp))
        for s, field in enumerate(samples):
            sp = sub_dir / f"sample_{s}_{i:03d}.tensor"
            _write(sp, "f32", field[window].astype(np.float32))
            sample_files.append((s, i, sp))

    gt_path = sub_dir / "gt.tensor"
    _write(gt_path, "u8", gt)
    return SubjectManifest(
        subject_id=subject_id,
        role=role,
        dataset_tag=tag,
        image_shape=cfg.image_shape,
        patch_size=cfg.patch_size,
        feature_tap=cfg.feature_tap,
        feature_files=feature_files,
        logit_files=logit_files,
        sample_prediction_files=sample_files,
        ground_truth_path=gt_path,
    )


def generate(cfg: SynthConfig, out_dir) -> Path:
    """Write the full synthetic dataset; returns the manifest path."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plan = [("train", "id-train", 0.0, cfg.n_train),
            ("id_test", "id-test", 0.0, cfg.n_id_test)]
    for m in cfg.shift_magnitudes:
        plan.append(("ood", f"shift-{m:g}", m, cfg.n_ood))
    total = sum(count for _, _, _, count in plan)
    root = np.random.SeedSequence(cfg.seed)
    seqs = root.spawn(1 + total)
    pop = _population(cfg, np.random.default_rng(seqs[0]))
    subjects = []
    cursor = 1
    for role, tag, magnitude, count in plan:
        for j in range(count):
            subject_id = f"{tag}-{j:03d}"
            subjects.append(_emit_subject(cfg, pop, subject_id, role, tag,
                                          magnitude, out_dir, seqs[cursor]))
            cursor += 1
    manifest_path = out_dir / "manifest.txt"
    write_manifest(subjects, manifest_path)
    return manifest_path


def anisotropy_demo(seed: int = 0, n_train: int = 500, n_test: int = 200,
                    n_ood: int = 200) -> tuple[float, float]:
    """Why covariance matters: a fixed 2-D instance where distance-to-mean
    ranking fails.

    The in-distribution cloud has variance 100 along the first axis and
    0.01 along the second. Outliers sit at Euclidean distance 1 along
    the tight axis: ten standard deviations out, yet closer to the mean
    than typical inliers. Returns (covariance-aware AUROC, squared
    Euclidean AUROC) computed by the toolkit's own scorer and metric.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    scales = np.array([10.0, 0.1])
    train = rng.standard_normal((n_train, 2)) * scales
    id_test = rng.standard_normal((n_test, 2)) * scales
    signs = np.where(np.arange(n_ood) % 2 == 0, 1.0, -1.0)
    ood = np.column_stack([np.zeros(n_ood), signs])

    model = fit(train)
    dm_id = batch_mahalanobis(id_test, model)
    dm_ood = batch_mahalanobis(ood, model)
    eu_id = ((id_test - model.mu) ** 2).sum(axis=1)
    eu_ood = ((ood - model.mu) ** 2).sum(axis=1)
    return (metrics.auroc(dm_id, dm_ood), metrics.auroc(eu_id, eu_ood))
