"""Full-protocol plumbing: one manifest in, per-method reports out."""

import csv
import json

import numpy as np
import pytest

from oodkit.experiment import (
    METHODS,
    distance_mask,
    fit_from_manifest,
    predicted_mask,
    run_experiment,
    subject_dice,
    write_reports,
)
from oodkit.manifest import load_manifest, write_manifest
from oodkit.patches import subject_score
from oodkit.synth import SynthConfig, generate
from oodkit.tensorio import read_tensor


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    cfg = SynthConfig(seed=42, n_train=24, n_id_test=8, n_ood=8,
                      shift_magnitudes=(4.0,), n_samples=3)
    path = generate(cfg, root)
    return cfg, path


def test_all_methods_report(dataset):
    _, manifest = dataset
    result = run_experiment(manifest)
    assert result.failures == {}
    assert set(result.reports) == set(METHODS)
    for name, rep in result.reports.items():
        assert rep.fpr is not None
        assert rep.detection_error is not None
        assert 0.0 <= rep.auroc <= 1.0
        assert rep.esce is not None
        assert rep.quadrants is not None
        assert rep.n_silent_failures == rep.quadrants.silent_failures
        assert len(rep.subjects) == 24 + 8 + 8


def test_distance_separates_far_shift(dataset):
    _, manifest = dataset
    result = run_experiment(manifest, methods=["distance"])
    rep = result.reports["distance"]
    assert rep.auroc >= 0.95
    assert result.model is not None
    assert result.model.n_samples == 24 * len(load_manifest(manifest)[0].feature_files)


def test_method_subset_and_model_reuse(dataset):
    _, manifest = dataset
    subjects = load_manifest(manifest)
    model = fit_from_manifest(subjects)
    r1 = run_experiment(manifest, methods=["distance"], model=model)
    r2 = run_experiment(manifest, methods=["distance"], model=model)
    u1 = [s.uncertainty for s in r1.reports["distance"].subjects]
    u2 = [s.uncertainty for s in r2.reports["distance"].subjects]
    assert u1 == u2
    assert set(r1.reports) == {"distance"}


def test_distance_raw_short_circuit(dataset):
    # feeding back the scores the full run produced must reproduce its
    # report without fitting anything
    _, manifest = dataset
    subjects = load_manifest(manifest)
    model = fit_from_manifest(subjects)
    raw = {s.subject_id: subject_score(distance_mask(s, model))
           for s in subjects}
    direct = run_experiment(manifest, methods=["distance"], model=model)
    cached = run_experiment(manifest, methods=["distance"], distance_raw=raw)
    assert cached.model is None
    a = direct.reports["distance"]
    b = cached.reports["distance"]
    assert a.threshold == b.threshold
    assert a.auroc == b.auroc
    assert [s.uncertainty for s in a.subjects] == [s.uncertainty for s in b.subjects]


def test_distance_raw_missing_subject_fails_method(dataset):
    _, manifest = dataset
    result = run_experiment(manifest, methods=["distance"],
                            distance_raw={"nope": 1.0})
    assert "distance" in result.failures
    assert "missing subjects" in result.failures["distance"]
    assert result.reports == {}


def test_soft_failure_isolation(tmp_path, dataset):
    # drop logits and samples from every subject: logit methods fail,
    # distance still reports
    _, manifest = dataset
    subjects = load_manifest(manifest)
    stripped = [
        type(s)(subject_id=s.subject_id, role=s.role, dataset_tag=s.dataset_tag,
                image_shape=s.image_shape, patch_size=s.patch_size,
                feature_tap=s.feature_tap, feature_files=s.feature_files,
                logit_files=None, sample_prediction_files=None,
                ground_truth_path=s.ground_truth_path)
        for s in subjects
    ]
    path = tmp_path / "stripped.txt"
    write_manifest(stripped, path)
    result = run_experiment(path)
    assert "distance" in result.reports
    for m in ("max-softmax", "temperature", "kl-uniform", "energy",
              "sample-spread"):
        assert m in result.failures
    # no logits means no dice, so calibration fields stay empty
    assert result.reports["distance"].esce is None
    assert result.reports["distance"].auroc is not None


def test_all_id_manifest_skips_detection_metrics(tmp_path):
    cfg = SynthConfig(seed=11, n_train=22, n_id_test=6, n_ood=1,
                      shift_magnitudes=(1.0,), n_samples=2)
    manifest = generate(cfg, tmp_path / "data")
    subjects = [s for s in load_manifest(manifest) if s.role != "ood"]
    path = tmp_path / "no_ood.txt"
    write_manifest(subjects, path)
    result = run_experiment(path, methods=["distance", "max-softmax"])
    for rep in result.reports.values():
        assert rep.fpr is None
        assert rep.detection_error is None
        assert rep.auroc is None
        assert rep.esce is not None       # id_test cohort still has dice
        assert rep.threshold >= 0.0


def test_temperature_sweep_picks_lowest_esce(dataset):
    _, manifest = dataset
    result = run_experiment(manifest, methods=["temperature"],
                            temperatures=(1.0, 10.0))
    rep = result.reports["temperature"]
    assert rep.method in ("temperature[T=1]", "temperature[T=10]")
    # rerun each temperature alone; the sweep result equals the best one
    singles = {
        t: run_experiment(manifest, methods=["temperature"],
                          temperatures=(t,)).reports["temperature"]
        for t in (1.0, 10.0)
    }
    best = min(singles.values(), key=lambda r: r.esce)
    assert rep.method == best.method
    assert rep.esce == best.esce


def test_energy_sweep_survives_degenerate_candidates(dataset):
    # at T=100 synthetic energies go negative and cannot be normalized;
    # the sweep must keep whatever candidates still work
    _, manifest = dataset
    result = run_experiment(manifest, methods=["energy"],
                            temperatures=(1.0, 100.0))
    assert "energy" not in result.failures
    assert result.reports["energy"].method == "energy[T=1]"


def test_unknown_method_rejected(dataset):
    from oodkit.errors import ValidationError

    _, manifest = dataset
    with pytest.raises(ValidationError):
        run_experiment(manifest, methods=["distance", "frobnicate"])


def test_write_reports_schema(tmp_path, dataset):
    _, manifest = dataset
    result = run_experiment(manifest, methods=["distance", "max-softmax"],
                            out_dir=tmp_path / "run")
    run_dir = tmp_path / "run"
    lines = (run_dir / "reports.jsonl").read_text().splitlines()
    assert len(lines) == 2
    recs = [json.loads(l) for l in lines]
    assert [r["method_key"] for r in recs] == ["distance", "max-softmax"]
    for r in recs:
        for key in ("method", "threshold", "fpr", "detection_error", "auroc",
                    "esce", "n_silent_failures", "quadrants"):
            assert key in r
        assert "subjects" not in r

    with (run_dir / "subjects.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    n_subjects = len(result.subjects)
    assert len(rows) == 2 * n_subjects
    assert set(rows[0]) == {"method", "subject_id", "role", "dataset_tag",
                            "uncertainty", "dice"}
    # uncertainty strings round-trip exactly through %.17g
    by_method = {}
    for row in rows:
        by_method.setdefault(row["method"], {})[row["subject_id"]] = float(
            row["uncertainty"])
    for key, rep in result.reports.items():
        for s in rep.subjects:
            assert by_method[s.method][s.subject_id] == s.uncertainty

    assert not (run_dir / "failures.json").exists()


def test_write_reports_failures_file(tmp_path, dataset):
    _, manifest = dataset
    result = run_experiment(manifest, methods=["distance"],
                            distance_raw={"nope": 0.0})
    paths = write_reports(result, tmp_path / "run")
    fail_path = tmp_path / "run" / "failures.json"
    assert fail_path in paths
    data = json.loads(fail_path.read_text())
    assert "distance" in data


def test_write_masks_flag(tmp_path, dataset):
    cfg, manifest = dataset
    run_experiment(manifest, methods=["distance"], out_dir=tmp_path / "run",
                   write_masks=True)
    mask_dir = tmp_path / "run" / "masks"
    files = sorted(mask_dir.glob("*.tensor"))
    assert len(files) == 24 + 8 + 8
    t = read_tensor(files[0])
    assert t.dtype == "f64"
    assert t.shape == cfg.image_shape
    assert np.all(np.isfinite(t.values))


def test_predicted_mask_and_dice(dataset):
    _, manifest = dataset
    subjects = load_manifest(manifest)
    s = next(x for x in subjects if x.role == "id_test")
    pred = predicted_mask(s)
    gt = read_tensor(s.ground_truth_path).values
    assert pred.shape == gt.shape
    assert set(np.unique(pred)) <= {0, 1}
    d = subject_dice(s)
    assert 0.0 <= d <= 1.0
    assert d > 0.5  # unshifted subjects segment well


def test_fit_from_manifest_requires_training(tmp_path, dataset):
    from oodkit.errors import ValidationError

    _, manifest = dataset
    subjects = [s for s in load_manifest(manifest) if s.role != "train"]
    path = tmp_path / "no_train.txt"
    write_manifest(subjects, path)
    with pytest.raises(ValidationError):
        run_experiment(path, methods=["distance"])
