"""Threshold calibration, detection metrics, calibration error, and Dice.

Orientation conventions used throughout: scores are uncertainties in
[0,1] after normalization, a subject is deemed out-of-distribution when
its score strictly exceeds the threshold, and the threshold itself
counts as in-distribution (it must cover at least 95% of the training
scores).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.stats

from .errors import ValidationError


@dataclass
class ScoredSubject:
    subject_id: str
    role: str
    uncertainty: float
    dice: float | None = None
    method: str = ""


@dataclass
class QuadrantCounts:
    """2x2 tally over (dice below cut) x (deemed in-distribution)."""

    silent_failures: int      # low dice, score <= threshold
    flagged_failures: int     # low dice, score > threshold
    accepted_good: int        # high dice, score <= threshold
    flagged_good: int         # high dice, score > threshold


@dataclass
class EvalReport:
    method: str
    threshold: float
    fpr: float | None = None
    detection_error: float | None = None
    auroc: float | None = None
    esce: float | None = None
    n_silent_failures: int | None = None
    quadrants: QuadrantCounts | None = None
    subjects: list[ScoredSubject] = field(default_factory=list)


def _scores(xs, label: str) -> np.ndarray:
    arr = np.asarray(list(xs), dtype=np.float64)
    if arr.size == 0:
        raise ValidationError(f"{label} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{label} contains non-finite scores")
    return arr


def tpr95_threshold(train_scores) -> float:
    """Smallest score covering at least 95% of the training scores.

    The ceil(0.95 n)-th order statistic, computed with integer
    arithmetic so the boundary index never drifts from rounding. Fewer
    than 20 scores makes the 95th percentile degenerate (it is just the
    maximum); that case warns and proceeds.
    """
    arr = _scores(train_scores, "train scores")
    n = arr.size
    if n < 20:
        warnings.warn(
            f"only {n} training scores: the 95% coverage boundary equals "
            "their maximum, which calibrates poorly",
            RuntimeWarning,
            stacklevel=2,
        )
    k = (19 * n + 19) // 20  # ceil(0.95 * n) without float rounding
    return float(np.partition(arr, k - 1)[k - 1])


def fpr(ood_scores, threshold: float) -> float:
    """Fraction of out-of-distribution scores at or below the threshold."""
    arr = _scores(ood_scores, "ood scores")
    return float(np.count_nonzero(arr <= threshold) / arr.size)


def detection_error(id_test_scores, ood_scores, threshold: float) -> float:
    """Balanced error: half missed coverage plus half false-positive rate."""
    id_arr = _scores(id_test_scores, "id test scores")
    tpr = np.count_nonzero(id_arr <= threshold) / id_arr.size
    return float(0.5 * (1.0 - tpr) + 0.5 * fpr(ood_scores, threshold))


def auroc(id_test_scores, ood_scores) -> float:
    """P(random OOD score > random ID score), ties counted half.

    Rank formulation of the Mann-Whitney statistic, so any strictly
    increasing rescaling of the scores leaves the value unchanged.
    """
    id_arr = _scores(id_test_scores, "id test scores")
    ood_arr = _scores(ood_scores, "ood scores")
    combined = np.concatenate([id_arr, ood_arr])
    ranks = scipy.stats.rankdata(combined)
    n_ood = ood_arr.size
    rank_sum = ranks[id_arr.size:].sum()
    u = rank_sum - n_ood * (n_ood + 1) / 2.0
    return float(u / (id_arr.size * n_ood))


def _bin_index(u: float, m: int) -> int:
    # right-closed bins, except the first which also includes 0
    if u <= 0.0:
        return 0
    return min(int(np.ceil(u * m)) - 1, m - 1)


def esce(subjects, m: int = 10) -> float:
    """Segmentation-calibration error over M equal uncertainty bins.

    Sum over bins of (bin size / n) * |mean dice - (1 - mean
    uncertainty)|; empty bins drop out through the weight.
    """
    if m < 1:
        raise ValidationError(f"need at least one bin, got {m}")
    subs = list(subjects)
    if not subs:
        raise ValidationError("no subjects to evaluate")
    dice_bins: list[list[float]] = [[] for _ in range(m)]
    unc_bins: list[list[float]] = [[] for _ in range(m)]
    for s in subs:
        if s.dice is None:
            raise ValidationError(f"subject {s.subject_id} has no dice value")
        if not 0.0 <= s.uncertainty <= 1.0:
            raise ValidationError(
                f"subject {s.subject_id} uncertainty {s.uncertainty} outside [0, 1]"
            )
        idx = _bin_index(s.uncertainty, m)
        dice_bins[idx].append(s.dice)
        unc_bins[idx].append(s.uncertainty)
    n = len(subs)
    total = 0.0
    for d, u in zip(dice_bins, unc_bins):
        if not d:
            continue
        gap = abs(float(np.mean(d)) - (1.0 - float(np.mean(u))))
        total += (len(d) / n) * gap
    return total


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Overlap coefficient 2|A&B| / (|A|+|B|); both-empty scores 1.0."""
    p = np.asarray(pred)
    g = np.asarray(gt)
    if p.shape != g.shape:
        raise ValidationError(f"mask shapes differ: {p.shape} vs {g.shape}")
    for name, arr in (("prediction", p), ("ground truth", g)):
        vals = np.unique(arr)
        if not np.isin(vals, (0, 1)).all():
            raise ValidationError(f"{name} mask is not binary")
    p = p.astype(bool)
    g = g.astype(bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def quadrant_report(subjects, threshold: float,
                    dice_cut: float = 0.6) -> QuadrantCounts:
    """Cross-tabulate segmentation quality against the OOD decision.

    The dangerous cell is low dice with a score at or below the
    threshold: a bad segmentation the detector waved through.
    """
    counts = [[0, 0], [0, 0]]
    for s in subjects:
        if s.dice is None:
            raise ValidationError(f"subject {s.subject_id} has no dice value")
        low = s.dice < dice_cut
        deemed_id = s.uncertainty <= threshold
        counts[int(low)][int(deemed_id)] += 1
    return QuadrantCounts(
        silent_failures=counts[1][1],
        flagged_failures=counts[1][0],
        accepted_good=counts[0][1],
        flagged_good=counts[0][0],
    )
