"""Reference uncertainty scorers computed from logits or prediction samples.

Every scorer reduces one subject's (or one patch's) data to a single
float oriented as "higher means more uncertain". Outputs land on
different raw scales on purpose; comparability comes from the shared
normalization step downstream, same as the distance method.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError


def _check_logits(logits: np.ndarray) -> np.ndarray:
    l = np.asarray(logits, dtype=np.float64)
    if l.ndim < 2:
        raise ValidationError("logits need a class axis plus spatial axes")
    if l.shape[0] < 2:
        raise ValidationError(f"need >= 2 classes, got {l.shape[0]}")
    if not np.all(np.isfinite(l)):
        raise ValidationError("logits contain non-finite values")
    return l


def _softmax(logits: np.ndarray) -> np.ndarray:
    # max-shift per voxel keeps exp in range for logits up to +-1e4
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def temperature_scaled_uncertainty(logits: np.ndarray, temperature: float) -> float:
    """1 - mean over voxels of max_c softmax(logits / T)_c."""
    if not temperature > 0:
        raise ValidationError(f"temperature must be > 0, got {temperature}")
    l = _check_logits(logits)
    p = _softmax(l / temperature)
    confidence = float(p.max(axis=0).mean())
    return 1.0 - confidence


def max_softmax_uncertainty(logits: np.ndarray) -> float:
    """Inverted mean max-softmax confidence; the T=1 temperature case."""
    return temperature_scaled_uncertainty(logits, 1.0)


def kl_from_uniform_uncertainty(logits: np.ndarray) -> float:
    """1 - KL(softmax(logits) || uniform) / log C, averaged over voxels.

    KL from uniform equals log C - H(p), so confident (peaked) voxels
    score near log C and uniform voxels score 0; dividing by log C puts
    confidence in [0,1] before inversion.
    """
    l = _check_logits(logits)
    c = l.shape[0]
    p = _softmax(l)
    plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    entropy = -plogp.sum(axis=0)
    kl = np.log(c) - entropy
    confidence = float(kl.mean()) / np.log(c)
    return 1.0 - confidence


def energy_uncertainty(logits: np.ndarray, temperature: float) -> float:
    """Mean free energy -T * logsumexp(logits / T); higher is more uncertain.

    Returned on the energy scale, not remapped to [0,1]; downstream
    normalization handles that like every other method.
    """
    if not temperature > 0:
        raise ValidationError(f"temperature must be > 0, got {temperature}")
    l = _check_logits(logits) / temperature
    m = l.max(axis=0)
    lse = m + np.log(np.exp(l - m).sum(axis=0))
    energy = -temperature * lse
    return float(energy.mean())


def sample_spread_uncertainty(samples) -> float:
    """Mean over voxels of the population std across K probability volumes.

    Samples are foreground-probability volumes of identical shape from
    repeated stochastic passes (dropout, augmentation flips).
    """
    vols = [np.asarray(s, dtype=np.float64) for s in samples]
    if len(vols) < 2:
        raise ValidationError(f"need >= 2 sample volumes, got {len(vols)}")
    shape = vols[0].shape
    for i, v in enumerate(vols):
        if v.shape != shape:
            raise ValidationError(
                f"sample {i} has shape {v.shape}, expected {shape}"
            )
        if not np.all(np.isfinite(v)):
            raise ValidationError(f"sample {i} contains non-finite values")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValidationError(f"sample {i} has probabilities outside [0, 1]")
    stack = np.stack(vols, axis=0)
    # center on the first volume: the std is translation-invariant, and
    # identical samples then cancel exactly instead of leaving rounding
    # residue from the mean
    stack -= stack[0]
    return float(stack.std(axis=0, ddof=0).mean())
