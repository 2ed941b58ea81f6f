"""Squared Mahalanobis distance against a fitted Gaussian.

The score is the quadratic form (z - mu)^T (Sigma + eps I)^-1 (z - mu),
kept in squared form: downstream thresholds and normalization are
monotone in it, so the square root would only cost precision. Solves go
through the stored Cholesky factor; the covariance is never inverted.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, NumericError, ValidationError
from .gaussian import GaussianModel


def _vector_of(z) -> np.ndarray:
    vec = getattr(z, "vector", z)
    return np.asarray(vec, dtype=np.float64).reshape(-1)


def _distance(model: GaussianModel, vec: np.ndarray, label: str) -> float:
    if vec.shape[0] != model.dim:
        raise DimensionMismatch(
            f"{label} has dimension {vec.shape[0]}, model expects {model.dim}"
        )
    if not np.all(np.isfinite(vec)):
        raise ValidationError(f"{label} contains non-finite values")
    diff = vec - model.mu
    y = scipy.linalg.solve_triangular(model.chol_precision, diff,
                                      lower=True, check_finite=False)
    out = float(y @ y)
    if not np.isfinite(out):
        raise NumericError(f"distance for {label} is not finite")
    return out


def mahalanobis(z, model: GaussianModel) -> float:
    """Squared distance of one feature vector to the model. Always >= 0."""
    return _distance(model, _vector_of(z), "query")


def batch_mahalanobis(zs, model: GaussianModel) -> list[float]:
    """Scores in input order, sharing the scalar op's code path exactly."""
    return [_distance(model, _vector_of(z), f"query {i}")
            for i, z in enumerate(zs)]
