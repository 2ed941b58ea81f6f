"""Export patch activations and predictions from a torch model.

The bridge sits between a trained segmentation network and the toolkit's
on-disk layout: it walks the sliding-window grid over each volume, runs the
model once per patch, captures the tapped activation with a forward hook,
and writes feature / logit / sample tensors plus a manifest that the
toolkit loads directly.  All scoring math lives on the toolkit side; the
bridge only runs the model and serialises what comes out.

Prediction samples come in two flavours:

  * "flips"    test-time augmentation; sample 0 is the identity pass and
               sample k flips spatial axis k-1 before the forward pass,
               un-flipping the prediction afterwards.  Deterministic.
  * "dropout"  stochastic forward passes with dropout layers active; the
               torch seed used for each sample index is recorded in the
               export config so runs can be reproduced.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from oodkit.manifest import SubjectManifest, write_manifest
from oodkit.patches import make_grid
from oodkit.tensorio import Tensor, write_tensor

from .errors import GeometryMismatch, UnresolvableTap
from .grid import patch_origins

__all__ = [
    "TapSpec",
    "ExportSettings",
    "SubjectVolume",
    "export_subject",
    "export_dataset",
]

SAMPLE_MODES = ("none", "flips", "dropout")


@dataclass(frozen=True)
class TapSpec:
    """Names the activation site whose output becomes the feature tensor.

    `layer` must match one dotted module name from `model.named_modules()`
    exactly, and that module must run exactly once per forward pass.
    """

    layer: str

    def resolve(self, model: nn.Module) -> nn.Module:
        for name, module in model.named_modules():
            if name == self.layer:
                return module
        available = sorted(name for name, _ in model.named_modules() if name)
        raise UnresolvableTap(
            f"no module named '{self.layer}'; available sites: "
            + ", ".join(available)
        )


@dataclass(frozen=True)
class ExportSettings:
    tap: TapSpec
    patch_size: tuple[int, ...]
    sample_mode: str = "none"
    n_samples: int = 4          # dropout mode only; flips derive K from ndim
    seed: int = 0

    def __post_init__(self):
        if self.sample_mode not in SAMPLE_MODES:
            raise ValueError(
                f"sample_mode '{self.sample_mode}' not one of {SAMPLE_MODES}"
            )
        if any(int(p) < 1 for p in self.patch_size):
            raise ValueError(f"non-positive patch extent in {self.patch_size}")
        if self.sample_mode == "dropout" and self.n_samples < 2:
            raise ValueError("dropout mode needs at least 2 samples")


@dataclass
class SubjectVolume:
    """One input volume plus its bookkeeping labels."""

    subject_id: str
    role: str
    dataset_tag: str
    image: np.ndarray
    ground_truth: np.ndarray | None = None


class _Tap:
    """Forward hook that must observe exactly one activation per pass."""

    def __init__(self, module: nn.Module, layer: str):
        self.layer = layer
        self.outputs: list[torch.Tensor] = []
        self.handle = module.register_forward_hook(self._grab)

    def _grab(self, module, inputs, output):
        self.outputs.append(output.detach())

    def take(self) -> torch.Tensor:
        if len(self.outputs) != 1:
            n = len(self.outputs)
            self.outputs.clear()
            raise UnresolvableTap(
                f"tap '{self.layer}' fired {n} times in one forward pass; "
                "it must resolve to exactly one activation site"
            )
        return self.outputs.pop()

    def close(self):
        self.handle.remove()


def _checked_origins(image_shape, patch_size):
    """Bridge walk cross-checked against the toolkit grid."""
    ours = patch_origins(image_shape, patch_size)
    grid = make_grid(image_shape, patch_size)
    theirs = tuple(tuple(int(v) for v in o) for o in grid.origins)
    if ours != theirs:
        raise GeometryMismatch(
            f"bridge walk produced {len(ours)} origins but the toolkit grid "
            f"has {len(theirs)} for shape={tuple(image_shape)} "
            f"patch={tuple(patch_size)}; first divergence: "
            f"{next((a, b) for a, b in zip(ours, theirs) if a != b) if len(ours) == len(theirs) else 'length'}"
        )
    return ours


def _foreground_prob(logits: torch.Tensor) -> torch.Tensor:
    # [1, C, *spatial] -> [*spatial]; channel 1 is foreground by convention
    if logits.shape[1] < 2:
        raise ValueError("prediction samples need at least 2 logit channels")
    return torch.softmax(logits, dim=1)[0, 1]


def _f32(arr: torch.Tensor) -> np.ndarray:
    out = arr.detach().cpu().numpy()
    return np.ascontiguousarray(out, dtype=np.float32)


def export_subject(model: nn.Module, subject: SubjectVolume,
                   settings: ExportSettings, out_dir) -> SubjectManifest:
    """Run the model over one subject and write its tensors.

    Returns the manifest record; the caller is responsible for collecting
    records into a manifest file (see export_dataset).
    """
    out_dir = Path(out_dir)
    sub_dir = out_dir / subject.subject_id
    sub_dir.mkdir(parents=True, exist_ok=True)

    image = np.ascontiguousarray(subject.image, dtype=np.float32)
    origins = _checked_origins(image.shape, settings.patch_size)
    tap_module = settings.tap.resolve(model)

    was_training = model.training
    model.eval()
    tap = _Tap(tap_module, settings.tap.layer)
    feature_files: list[tuple[int, Path]] = []
    logit_files: list[tuple[int, Path]] = []
    sample_files: list[tuple[int, int, Path]] = []
    try:
        with torch.no_grad():
            patches = []
            for i, origin in enumerate(origins):
                window = tuple(
                    slice(o, o + p) for o, p in zip(origin, settings.patch_size)
                )
                x = torch.from_numpy(image[window])[None, None]
                patches.append(x)
                logits = model(x)
                act = tap.take()
                feat_path = sub_dir / f"feature_{i:03d}.bin"
                write_tensor(Tensor.from_array(_f32(act[0])), feat_path)
                feature_files.append((i, feat_path))
                logit_path = sub_dir / f"logit_{i:03d}.bin"
                write_tensor(Tensor.from_array(_f32(logits[0])), logit_path)
                logit_files.append((i, logit_path))

            if settings.sample_mode == "flips":
                ndim = image.ndim
                for s in range(1 + ndim):
                    for i, x in enumerate(patches):
                        if s == 0:
                            prob = _foreground_prob(model(x))
                        else:
                            axis = 1 + s  # spatial axis s-1 of [1, 1, *spatial]
                            flipped = model(torch.flip(x, dims=[axis]))
                            prob = torch.flip(_foreground_prob_keepdims(flipped),
                                              dims=[axis])[0, 0]
                        path = sub_dir / f"sample_{s}_{i:03d}.bin"
                        write_tensor(Tensor.from_array(_f32(prob)), path)
                        sample_files.append((s, i, path))
            elif settings.sample_mode == "dropout":
                seeds = sample_seeds(settings)
                model.train()
                try:
                    for s, seed in enumerate(seeds):
                        torch.manual_seed(seed)
                        for i, x in enumerate(patches):
                            prob = _foreground_prob(model(x))
                            path = sub_dir / f"sample_{s}_{i:03d}.bin"
                            write_tensor(Tensor.from_array(_f32(prob)), path)
                            sample_files.append((s, i, path))
                finally:
                    model.eval()
    finally:
        tap.close()
        model.train(was_training)

    gt_path = None
    if subject.ground_truth is not None:
        gt = np.ascontiguousarray(subject.ground_truth, dtype=np.uint8)
        if gt.shape != image.shape:
            raise ValueError(
                f"ground truth shape {gt.shape} != image shape {image.shape}"
            )
        gt_path = sub_dir / "ground_truth.bin"
        write_tensor(Tensor.from_array(gt), gt_path)

    return SubjectManifest(
        subject_id=subject.subject_id,
        role=subject.role,
        dataset_tag=subject.dataset_tag,
        image_shape=tuple(image.shape),
        patch_size=tuple(int(p) for p in settings.patch_size),
        feature_tap=settings.tap.layer,
        feature_files=feature_files,
        logit_files=logit_files,
        sample_prediction_files=sample_files or None,
        ground_truth_path=gt_path,
    )


def _foreground_prob_keepdims(logits: torch.Tensor) -> torch.Tensor:
    # like _foreground_prob but keeps [1, 1, *spatial] so flips can address
    # spatial axes with the same dim numbering as the input tensor
    if logits.shape[1] < 2:
        raise ValueError("prediction samples need at least 2 logit channels")
    return torch.softmax(logits, dim=1)[:, 1:2]


def sample_seeds(settings: ExportSettings) -> list[int]:
    """Torch seeds used for dropout sample passes, in sample-index order."""
    return [int(settings.seed) + s for s in range(settings.n_samples)]


def export_dataset(model: nn.Module, subjects: Sequence[SubjectVolume],
                   settings: ExportSettings, out_dir) -> Path:
    """Export every subject, write the manifest and the export config.

    Returns the manifest path. The config file records what was tapped and
    how samples were generated so a reader can reproduce the export.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = [export_subject(model, sub, settings, out_dir) for sub in subjects]
    manifest_path = out_dir / "manifest.txt"
    write_manifest(records, manifest_path)

    if settings.sample_mode == "flips":
        ndims = {len(rec.image_shape) for rec in records}
        n_samples = 1 + ndims.pop() if len(ndims) == 1 else None
    elif settings.sample_mode == "dropout":
        n_samples = settings.n_samples
    else:
        n_samples = 0
    config = {
        "feature_tap": settings.tap.layer,
        "patch_size": list(settings.patch_size),
        "sample_mode": settings.sample_mode,
        "n_samples": n_samples,
        "sample_seeds": sample_seeds(settings)
        if settings.sample_mode == "dropout" else None,
    }
    (out_dir / "export_config.json").write_text(
        json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return manifest_path
