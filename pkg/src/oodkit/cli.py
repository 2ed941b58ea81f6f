"""Command-line front door: synth, fit, score, calibrate, evaluate, report.

Outputs land in a per-command run directory together with an
artifacts.json listing what was produced. Exit codes: 0 success, 2 I/O
failure, 3 validation failure, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from . import experiment, gaussian, metrics, synth
from .errors import IOFailure, NumericError, ValidationError
from .manifest import load_manifest
from .patches import normalize_scores
from .tensorio import Tensor, write_tensor

log = logging.getLogger("oodkit")


def _extents(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.replace(",", " ").split())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in text.replace(",", " ").split())


def _write_artifacts(out_dir: Path, command: str, files: list[Path]) -> None:
    rel = sorted(str(p.relative_to(out_dir)) for p in files)
    payload = {"command": command, "files": rel}
    (out_dir / "artifacts.json").write_text(
        json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _read_scores(path: Path) -> dict[str, float]:
    try:
        with Path(path).open(encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise IOFailure(path, exc) from exc
    if not rows or "subject_id" not in rows[0] or "raw_score" not in rows[0]:
        raise ValidationError(f"{path} is not a scores table")
    return {r["subject_id"]: float(r["raw_score"]) for r in rows}


def cmd_synth(args) -> int:
    cfg = synth.SynthConfig(
        seed=args.seed,
        feature_channels=args.feature_channels,
        feature_spatial=args.feature_spatial,
        image_shape=args.image_shape,
        patch_size=args.patch_size,
        n_train=args.n_train,
        n_id_test=args.n_id_test,
        n_ood=args.n_ood,
        shift_magnitudes=args.magnitudes,
        covariance_condition=args.condition,
        n_samples=args.n_samples,
    )
    out = Path(args.out)
    manifest_path = synth.generate(cfg, out)
    _write_artifacts(out, "synth", [manifest_path])
    print(f"wrote {manifest_path}")
    return 0


def cmd_fit(args) -> int:
    subjects = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    model = experiment.fit_from_manifest(
        subjects, budget=args.budget, eps_scale=args.eps_scale,
        workers=args.workers)
    wall = time.perf_counter() - t0
    model_path = out / "model.bin"
    gaussian.save(model, model_path)
    summary = {"n_samples": model.n_samples, "dim": model.dim,
               "eps": model.eps, "feature_tap": model.feature_tap,
               "pool_steps": model.pool_steps, "wall_seconds": wall}
    summary_path = out / "fit_summary.json"
    summary_path.write_text(json.dumps(summary, indent=2) + "\n",
                            encoding="utf-8")
    _write_artifacts(out, "fit", [model_path, summary_path])
    print(f"fitted N={model.n_samples} d={model.dim} eps={model.eps:g} "
          f"in {wall:.2f}s -> {model_path}")
    return 0


def cmd_score(args) -> int:
    subjects = load_manifest(args.manifest)
    model = gaussian.load(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files: list[Path] = []
    scores_path = out / "scores.csv"
    with scores_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "role", "dataset_tag", "raw_score"])
        for sub in subjects:
            mask = experiment.distance_mask(
                sub, model, budget=args.budget, sigma_scale=args.sigma_scale)
            raw = experiment.subject_score(mask)
            writer.writerow([sub.subject_id, sub.role, sub.dataset_tag,
                             f"{raw:.17g}"])
            if args.write_masks:
                mask_dir = out / "masks"
                mask_dir.mkdir(exist_ok=True)
                mask_path = mask_dir / f"{sub.subject_id}.tensor"
                write_tensor(Tensor("f64", mask.values.shape, mask.values),
                             mask_path)
                files.append(mask_path)
    files.append(scores_path)
    _write_artifacts(out, "score", files)
    print(f"scored {len(subjects)} subjects -> {scores_path}")
    return 0


def cmd_calibrate(args) -> int:
    raw = _read_scores(Path(args.scores))
    try:
        with Path(args.scores).open(encoding="utf-8", newline="") as fh:
            roles = {r["subject_id"]: r["role"] for r in csv.DictReader(fh)}
    except OSError as exc:
        raise IOFailure(args.scores, exc) from exc
    train_raw = [v for sid, v in raw.items() if roles.get(sid) == "train"]
    if not train_raw:
        raise ValidationError("scores table has no training subjects")
    normalized = [normalize_scores(train_raw, v) for v in train_raw]
    threshold = metrics.tpr95_threshold(normalized)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"train_min": min(train_raw), "train_max": max(train_raw),
               "n_train": len(train_raw), "threshold": threshold}
    calib_path = out / "calibration.json"
    calib_path.write_text(json.dumps(payload, indent=2) + "\n",
                          encoding="utf-8")
    _write_artifacts(out, "calibrate", [calib_path])
    print(f"threshold={threshold:.6f} over {len(train_raw)} train subjects "
          f"-> {calib_path}")
    return 0


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    model = gaussian.load(args.model) if args.model else None
    distance_raw = _read_scores(Path(args.scores)) if args.scores else None
    result = experiment.run_experiment(
        args.manifest,
        methods=args.methods,
        out_dir=out,
        model=model,
        distance_raw=distance_raw,
        budget=args.budget,
        sigma_scale=args.sigma_scale,
        eps_scale=args.eps_scale,
        temperatures=args.temperatures,
        esce_bins=args.esce_bins,
        dice_cut=args.dice_cut,
        workers=args.workers,
        write_masks=args.write_masks,
    )
    files = experiment.write_reports(result, out)
    if args.write_masks and (out / "masks").is_dir():
        files.extend(sorted((out / "masks").glob("*.tensor")))
    _write_artifacts(out, "evaluate", files)
    for key in sorted(result.reports):
        rep = result.reports[key]
        print(_format_report_line(rep))
    for method, why in sorted(result.failures.items()):
        print(f"{method}: FAILED ({why})", file=sys.stderr)
    return 0


def _format_report_line(rep: metrics.EvalReport) -> str:
    def fmt(x):
        return "-" if x is None else f"{x:.4f}"

    silent = "-" if rep.n_silent_failures is None else str(rep.n_silent_failures)
    return (f"{rep.method:<22} threshold={rep.threshold:.4f} "
            f"fpr={fmt(rep.fpr)} error={fmt(rep.detection_error)} "
            f"auroc={fmt(rep.auroc)} esce={fmt(rep.esce)} silent={silent}")


def cmd_report(args) -> int:
    path = Path(args.run_dir) / "reports.jsonl"
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IOFailure(path, exc) from exc
    print(f"{'method':<22} {'thresh':>8} {'fpr':>8} {'error':>8} "
          f"{'auroc':>8} {'esce':>8} {'silent':>6}")
    for line in lines:
        rec = json.loads(line)

        def cell(key):
            v = rec.get(key)
            return "-" if v is None else f"{v:.4f}"

        silent = rec.get("n_silent_failures")
        print(f"{rec['method']:<22} {rec['threshold']:>8.4f} {cell('fpr'):>8} "
              f"{cell('detection_error'):>8} {cell('auroc'):>8} "
              f"{cell('esce'):>8} {'-' if silent is None else silent:>6}")
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--verbose", "-v", action="count", default=0,
                   help="increase log verbosity (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oodkit",
        description="Distance-based OOD detection for patch-based "
                    "segmentation pipelines",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    df = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth", formatter_class=df,
                       help="generate a seeded synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--n-train", type=int, default=200, help="training subjects")
    p.add_argument("--n-id-test", type=int, default=20,
                   help="in-distribution test subjects")
    p.add_argument("--n-ood", type=int, default=20,
                   help="subjects per shift magnitude")
    p.add_argument("--magnitudes", type=_floats, default=(1.0, 2.0, 4.0),
                   help="shift magnitudes in train-std units, comma separated")
    p.add_argument("--condition", type=float, default=100.0,
                   help="covariance condition number")
    p.add_argument("--n-samples", type=int, default=4,
                   help="prediction samples per subject")
    p.add_argument("--feature-channels", type=int, default=8,
                   help="channels per synthetic feature map")
    p.add_argument("--feature-spatial", type=_extents, default=(2, 2, 2),
                   help="spatial extents of synthetic feature maps")
    p.add_argument("--image-shape", type=_extents, default=(6, 6, 6),
                   help="synthetic volume extents")
    p.add_argument("--patch-size", type=_extents, default=(4, 4, 4),
                   help="sliding-window patch extents")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", formatter_class=df,
                       help="fit the Gaussian over training features")
    p.add_argument("--manifest", required=True, help="dataset manifest path")
    p.add_argument("--out", required=True, help="run directory for the model")
    p.add_argument("--budget", type=int, default=10000,
                   help="feature dimension budget before fitting")
    p.add_argument("--eps-scale", type=float, default=1e-6,
                   help="diagonal loading scale for the covariance")
    p.add_argument("--workers", type=int, default=1,
                   help="worker threads for the fit")
    _add_common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("score", formatter_class=df,
                       help="score subjects against a fitted model")
    p.add_argument("--manifest", required=True, help="dataset manifest path")
    p.add_argument("--model", required=True, help="fitted model file")
    p.add_argument("--out", required=True, help="run directory for scores")
    p.add_argument("--budget", type=int, default=10000,
                   help="feature dimension budget")
    p.add_argument("--sigma-scale", type=float, default=0.125,
                   help="importance-map width as a fraction of patch extent")
    p.add_argument("--write-masks", action="store_true",
                   help="also write per-subject uncertainty mask tensors")
    _add_common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("calibrate", formatter_class=df,
                       help="derive the decision threshold from train scores")
    p.add_argument("--scores", required=True, help="scores.csv from `score`")
    p.add_argument("--out", required=True, help="run directory for calibration")
    _add_common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", formatter_class=df,
                       help="run detection and calibration metrics per method")
    p.add_argument("--manifest", required=True, help="dataset manifest path")
    p.add_argument("--out", required=True, help="run directory for reports")
    p.add_argument("--methods", type=lambda s: s.split(","), default=None,
                   help="comma-separated subset of: "
                        + ",".join(experiment.METHODS))
    p.add_argument("--model", default=None,
                   help="fitted model file (else fit in-process)")
    p.add_argument("--scores", default=None,
                   help="cached scores.csv for the distance method")
    p.add_argument("--budget", type=int, default=10000,
                   help="feature dimension budget")
    p.add_argument("--sigma-scale", type=float, default=0.125,
                   help="importance-map width as a fraction of patch extent")
    p.add_argument("--eps-scale", type=float, default=1e-6,
                   help="diagonal loading scale for the covariance")
    p.add_argument("--temperatures", type=_floats, default=(1.0, 10.0, 100.0),
                   help="temperature sweep, lowest calibration error wins")
    p.add_argument("--esce-bins", type=int, default=10,
                   help="uncertainty bins for the calibration error")
    p.add_argument("--dice-cut", type=float, default=0.6,
                   help="dice below this counts as a low-quality segmentation")
    p.add_argument("--workers", type=int, default=1,
                   help="worker threads for the fit")
    p.add_argument("--write-masks", action="store_true",
                   help="write per-subject uncertainty mask tensors")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", formatter_class=df,
                       help="print a readable summary of an evaluate run")
    p.add_argument("--run-dir", required=True,
                   help="directory holding reports.jsonl")
    _add_common(p)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except IOFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
