"""End-to-end protocol: fit on train, score everyone, calibrate, evaluate.

Every method funnels through the same tail: raw subject scores are
normalized against the training scores, the threshold is the 95%
coverage boundary of the normalized training scores, and detection plus
calibration metrics are computed on the id_test / ood cohorts. A method
that cannot run (missing logits, degenerate scores) is recorded as a
per-method failure without aborting the rest.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import baselines, metrics
from .errors import OodkitError, ValidationError
from .gaussian import GaussianModel, fit
from .mahalanobis import batch_mahalanobis
from .manifest import SubjectManifest, load_manifest
from .patches import (
    UncertaintyMask,
    aggregate,
    aggregate_fields,
    gaussian_importance,
    make_grid,
    normalize_scores,
    subject_score,
)
from .projection import project
from .tensorio import Tensor, read_tensor, write_tensor

METHODS = ("distance", "max-softmax", "temperature", "kl-uniform",
           "energy", "sample-spread")

DEFAULT_TEMPERATURES = (1.0, 10.0, 100.0)


@dataclass
class ExperimentResult:
    reports: dict[str, metrics.EvalReport]
    failures: dict[str, str]
    model: GaussianModel | None
    subjects: list[SubjectManifest]


def _indexed_paths(pairs) -> list[Path]:
    return [p for _, p in sorted(pairs, key=lambda ip: ip[0])]


def project_subject_features(sub: SubjectManifest, budget: int):
    """Projected patch features in grid order."""
    return [project(read_tensor(p).values, budget)
            for p in _indexed_paths(sub.feature_files)]


def fit_from_manifest(subjects: list[SubjectManifest], *,
                      budget: int = 10_000, eps_scale: float = 1e-6,
                      workers: int = 1) -> GaussianModel:
    """Fit the Gaussian over every training patch in the manifest."""
    train = [s for s in subjects if s.role == "train"]
    if not train:
        raise ValidationError("manifest has no training subjects")
    projected = []
    for sub in train:
        projected.extend(project_subject_features(sub, budget))
    steps = {p.pool_steps for p in projected}
    if len(steps) > 1:
        raise ValidationError(f"inconsistent pooling depth across patches: {steps}")
    return fit(projected, eps_scale, feature_tap=train[0].feature_tap,
               pool_steps=steps.pop(), workers=workers)


def distance_mask(sub: SubjectManifest, model: GaussianModel, *,
                  budget: int = 10_000,
                  sigma_scale: float = 0.125) -> UncertaintyMask:
    """Per-voxel uncertainty mask from patch distances to the model."""
    model.check_tap(sub.feature_tap)
    projected = project_subject_features(sub, budget)
    distances = batch_mahalanobis(projected, model)
    grid = make_grid(sub.image_shape, sub.patch_size)
    importance = gaussian_importance(sub.patch_size, sigma_scale)
    return aggregate(grid, distances, importance, sub.subject_id)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def predicted_mask(sub: SubjectManifest,
                   sigma_scale: float = 0.125) -> np.ndarray | None:
    """Binary prediction from blended per-class probabilities, or None
    when the subject has no logits."""
    if not sub.logit_files:
        return None
    grid = make_grid(sub.image_shape, sub.patch_size)
    importance = gaussian_importance(sub.patch_size, sigma_scale)
    probs = [_softmax(read_tensor(p).values.astype(np.float64))
             for p in _indexed_paths(sub.logit_files)]
    n_classes = probs[0].shape[0]
    blended = [
        aggregate_fields(grid, [pp[c] for pp in probs], importance).values
        for c in range(n_classes)
    ]
    labels = np.argmax(np.stack(blended), axis=0)
    return (labels > 0).astype(np.uint8)


def subject_dice(sub: SubjectManifest,
                 sigma_scale: float = 0.125) -> float | None:
    """Dice of the blended prediction against ground truth, when both exist."""
    if sub.ground_truth_path is None:
        return None
    pred = predicted_mask(sub, sigma_scale)
    if pred is None:
        return None
    gt = read_tensor(sub.ground_truth_path).values
    return metrics.dice(pred, gt)


def _logit_score(sub: SubjectManifest, op) -> float:
    if not sub.logit_files:
        raise ValidationError(f"subject {sub.subject_id} has no logit files")
    scores = [op(read_tensor(p).values.astype(np.float64))
              for p in _indexed_paths(sub.logit_files)]
    return float(np.mean(scores))


def _spread_score(sub: SubjectManifest) -> float:
    if not sub.sample_prediction_files:
        raise ValidationError(f"subject {sub.subject_id} has no sample sets")
    by_patch: dict[int, list[tuple[int, Path]]] = {}
    for s, i, p in sub.sample_prediction_files:
        by_patch.setdefault(i, []).append((s, p))
    scores = []
    for i in sorted(by_patch):
        vols = [read_tensor(p).values.astype(np.float64)
                for _, p in sorted(by_patch[i], key=lambda sp: sp[0])]
        scores.append(baselines.sample_spread_uncertainty(vols))
    return float(np.mean(scores))


def _evaluate(label: str, raw: dict[str, float],
              subjects: list[SubjectManifest], dice_by_id: dict[str, float | None],
              esce_bins: int, dice_cut: float) -> metrics.EvalReport:
    train_ids = [s.subject_id for s in subjects if s.role == "train"]
    train_raw = [raw[i] for i in train_ids]
    rows = [
        metrics.ScoredSubject(
            subject_id=s.subject_id,
            role=s.role,
            uncertainty=normalize_scores(train_raw, raw[s.subject_id]),
            dice=dice_by_id.get(s.subject_id),
            method=label,
        )
        for s in subjects
    ]
    by_id = {r.subject_id: r for r in rows}
    threshold = metrics.tpr95_threshold([by_id[i].uncertainty for i in train_ids])
    id_u = [r.uncertainty for r in rows if r.role == "id_test"]
    ood_u = [r.uncertainty for r in rows if r.role == "ood"]
    report = metrics.EvalReport(method=label, threshold=threshold, subjects=rows)
    if ood_u:
        report.fpr = metrics.fpr(ood_u, threshold)
    if id_u and ood_u:
        report.detection_error = metrics.detection_error(id_u, ood_u, threshold)
        report.auroc = metrics.auroc(id_u, ood_u)
    cohort = [r for r in rows if r.role in ("id_test", "ood") and r.dice is not None]
    if cohort:
        report.esce = metrics.esce(cohort, esce_bins)
        report.quadrants = metrics.quadrant_report(cohort, threshold, dice_cut)
        report.n_silent_failures = report.quadrants.silent_failures
    return report


def _sweep_temperature(op, subjects, dice_by_id, temperatures, esce_bins,
                       dice_cut, label: str) -> metrics.EvalReport:
    """Evaluate one logit scorer at each temperature, keep the lowest ESCE.

    Without any dice values ESCE is undefined; the sweep then falls back
    to the lowest temperature. A single temperature whose scores cannot
    be normalized (energy goes negative at high T) is skipped; the sweep
    only fails when every candidate does.
    """
    best = None
    last_error: OodkitError | None = None
    for t in temperatures:
        try:
            raw = {s.subject_id: _logit_score(s, lambda l: op(l, t))
                   for s in subjects}
            report = _evaluate(f"{label}[T={t:g}]", raw, subjects, dice_by_id,
                               esce_bins, dice_cut)
        except OodkitError as exc:
            last_error = exc
            continue
        key = report.esce if report.esce is not None else float("inf")
        if best is None or key < best[0]:
            best = (key, report)
    if best is None:
        raise last_error if last_error is not None else ValidationError(
            "temperature sweep had no candidates")
    return best[1]


def run_experiment(manifest_path, methods=None, out_dir=None, *,
                   model: GaussianModel | None = None,
                   distance_raw: dict[str, float] | None = None,
                   budget: int = 10_000,
                   sigma_scale: float = 0.125,
                   eps_scale: float = 1e-6,
                   temperatures=DEFAULT_TEMPERATURES,
                   esce_bins: int = 10,
                   dice_cut: float = 0.6,
                   workers: int = 1,
                   write_masks: bool = False) -> ExperimentResult:
    """Run the full protocol over a manifest; one report per method.

    `distance_raw` short-circuits the distance method with precomputed
    raw subject scores (the cached-scores path); otherwise a model is
    fitted from the manifest's training subjects unless one is passed in.
    """
    subjects = load_manifest(manifest_path)
    methods = list(methods) if methods else list(METHODS)
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValidationError(f"unknown methods {sorted(unknown)}")
    if not any(s.role == "train" for s in subjects):
        raise ValidationError("manifest has no training subjects")

    dice_by_id = {s.subject_id: subject_dice(s, sigma_scale) for s in subjects}
    reports: dict[str, metrics.EvalReport] = {}
    failures: dict[str, str] = {}
    out = Path(out_dir) if out_dir is not None else None

    for method in methods:
        try:
            if method == "distance":
                if distance_raw is not None:
                    missing = [s.subject_id for s in subjects
                               if s.subject_id not in distance_raw]
                    if missing:
                        raise ValidationError(
                            f"cached scores missing subjects {missing[:3]}"
                            f"{'...' if len(missing) > 3 else ''}")
                    raw = {s.subject_id: float(distance_raw[s.subject_id])
                           for s in subjects}
                else:
                    if model is None:
                        model = fit_from_manifest(subjects, budget=budget,
                                                  eps_scale=eps_scale,
                                                  workers=workers)
                    masks = {s.subject_id: distance_mask(s, model, budget=budget,
                                                         sigma_scale=sigma_scale)
                             for s in subjects}
                    raw = {sid: subject_score(m) for sid, m in masks.items()}
                    if out is not None and write_masks:
                        mask_dir = out / "masks"
                        mask_dir.mkdir(parents=True, exist_ok=True)
                        for sid, m in masks.items():
                            write_tensor(Tensor("f64", m.values.shape, m.values),
                                         mask_dir / f"{sid}.tensor")
                reports[method] = _evaluate(method, raw, subjects, dice_by_id,
                                            esce_bins, dice_cut)
            elif method == "max-softmax":
                raw = {s.subject_id: _logit_score(
                    s, baselines.max_softmax_uncertainty) for s in subjects}
                reports[method] = _evaluate(method, raw, subjects, dice_by_id,
                                            esce_bins, dice_cut)
            elif method == "kl-uniform":
                raw = {s.subject_id: _logit_score(
                    s, baselines.kl_from_uniform_uncertainty) for s in subjects}
                reports[method] = _evaluate(method, raw, subjects, dice_by_id,
                                            esce_bins, dice_cut)
            elif method == "temperature":
                reports[method] = _sweep_temperature(
                    baselines.temperature_scaled_uncertainty, subjects,
                    dice_by_id, temperatures, esce_bins, dice_cut, method)
            elif method == "energy":
                reports[method] = _sweep_temperature(
                    baselines.energy_uncertainty, subjects, dice_by_id,
                    temperatures, esce_bins, dice_cut, method)
            elif method == "sample-spread":
                raw = {s.subject_id: _spread_score(s) for s in subjects}
                reports[method] = _evaluate(method, raw, subjects, dice_by_id,
                                            esce_bins, dice_cut)
        except OodkitError as exc:
            failures[method] = f"{type(exc).__name__}: {exc}"

    result = ExperimentResult(reports=reports, failures=failures,
                              model=model if "distance" in methods else None,
                              subjects=subjects)
    if out is not None:
        write_reports(result, out)
    return result


def write_reports(result: ExperimentResult, out_dir) -> list[Path]:
    """Serialize reports: one JSON record per method plus a subject table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    reports_path = out_dir / "reports.jsonl"
    with reports_path.open("w", encoding="utf-8") as fh:
        for key in sorted(result.reports):
            rec = dataclasses.asdict(result.reports[key])
            del rec["subjects"]
            rec["method_key"] = key
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    written.append(reports_path)

    table_path = out_dir / "subjects.csv"
    tags = {s.subject_id: s.dataset_tag for s in result.subjects}
    with table_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "subject_id", "role", "dataset_tag",
                         "uncertainty", "dice"])
        for key in sorted(result.reports):
            for row in result.reports[key].subjects:
                writer.writerow([
                    row.method, row.subject_id, row.role,
                    tags.get(row.subject_id, ""),
                    f"{row.uncertainty:.17g}",
                    "" if row.dice is None else f"{row.dice:.17g}",
                ])
    written.append(table_path)

    if result.failures:
        failures_path = out_dir / "failures.json"
        failures_path.write_text(
            json.dumps(result.failures, sort_keys=True, indent=2) + "\n",
            encoding="utf-8")
        written.append(failures_path)
    return written
