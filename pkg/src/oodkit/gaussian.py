"""Multivariate Gaussian over projected features, with a safe factorization.

The estimate is the biased maximum-likelihood pair: mu is the sample
mean and sigma uses 1/N normalization. Before factorizing, the diagonal
is loaded with eps = eps_scale * trace(sigma)/d so rank-deficient
covariances (N < d) still admit a Cholesky factor; eps escalates by 10x
up to three times if factorization fails, and the value actually used
is recorded on the model. Scoring solves against the factor, never an
explicit inverse.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import (
    CholeskyFailure,
    DimensionMismatch,
    IOFailure,
    InvalidHeader,
    TapMismatch,
    ValidationError,
)
from .tensorio import Tensor, tensor_from_bytes, tensor_to_bytes

MAX_DIM = 20_000
# fit cost is cubic-ish in d; past this point a single fit takes hours
# on desktop CPUs, so treat it as misuse rather than letting it run.

_MODEL_MAGIC = b"MHG1"
_MODEL_VERSION = 1


@dataclass(frozen=True, eq=False)
class GaussianModel:
    dim: int
    n_samples: int
    mu: np.ndarray
    sigma: np.ndarray
    chol_precision: np.ndarray
    eps: float
    feature_tap: str
    pool_steps: int

    def check_tap(self, feature_tap: str) -> None:
        """Guard against scoring features from a different extraction point."""
        if feature_tap != self.feature_tap:
            raise TapMismatch(
                f"model was fitted on tap '{self.feature_tap}' but the data "
                f"carries tap '{feature_tap}'"
            )


def _as_vector(sample) -> np.ndarray:
    vec = getattr(sample, "vector", sample)
    return np.asarray(vec, dtype=np.float64).reshape(-1)


def _symmetrize_inplace(a: np.ndarray, block: int = 2048) -> np.ndarray:
    # blockwise so no full-size transpose temporary is materialized
    d = a.shape[0]
    for i0 in range(0, d, block):
        i1 = min(i0 + block, d)
        diag = a[i0:i1, i0:i1]
        diag += diag.T.copy()
        diag *= 0.5
        for j0 in range(i1, d, block):
            j1 = min(j0 + block, d)
            upper = a[i0:i1, j0:j1]
            lower = a[j0:j1, i0:i1]
            avg = (upper + lower.T) * 0.5
            upper[...] = avg
            lower[...] = avg.T
    return a


def _centered_gram(centered: np.ndarray, workers: int) -> np.ndarray:
    """C.T @ C computed in row blocks of the output.

    Each block is produced by one matrix product over the full sample
    set, so the result is identical for any worker count.
    """
    n, d = centered.shape
    out = np.empty((d, d), dtype=np.float64)
    block = max(1, min(d, 2048))
    spans = [(i, min(i + block, d)) for i in range(0, d, block)]

    def fill(span):
        i0, i1 = span
        np.matmul(centered[:, i0:i1].T, centered, out=out[i0:i1, :])

    if workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, spans))
    else:
        for span in spans:
            fill(span)
    return out


def fit(samples,
        eps_scale: float = 1e-6,
        *,
        feature_tap: str = "",
        pool_steps: int = 0,
        workers: int = 1) -> GaussianModel:
    """Fit mean and 1/N covariance over a stream of feature vectors.

    Accepts projected features or bare arrays. Raises on a dimension
    change mid-stream, fewer than two samples, non-finite components,
    or dim above the hard guard.
    """
    if eps_scale <= 0:
        raise ValidationError(f"eps_scale must be positive, got {eps_scale}")
    rows: list[np.ndarray] = []
    dim = None
    tap = feature_tap
    steps = pool_steps
    for idx, sample in enumerate(samples):
        vec = _as_vector(sample)
        if dim is None:
            dim = vec.shape[0]
            if dim < 1:
                raise ValidationError("feature vectors must be non-empty")
            if dim >= MAX_DIM:
                raise ValidationError(
                    f"feature dimension {dim} is at or above the supported "
                    f"limit {MAX_DIM}; pool to a smaller budget first"
                )
        elif vec.shape[0] != dim:
            raise DimensionMismatch(
                f"sample {idx} has dimension {vec.shape[0]}, expected {dim}"
            )
        if not np.all(np.isfinite(vec)):
            raise ValidationError(f"sample {idx} contains non-finite values")
        rows.append(vec)
    n = len(rows)
    if n < 2:
        raise ValidationError(f"need at least 2 samples to fit, got {n}")

    x = np.vstack(rows)
    del rows
    mu = x.sum(axis=0) / n
    centered = x - mu
    del x
    sigma = _centered_gram(centered, workers)
    del centered
    sigma /= n
    _symmetrize_inplace(sigma)

    eps0 = eps_scale * float(np.trace(sigma)) / dim
    if eps0 <= 0:
        # zero-variance data gives trace 0; fall back to an absolute
        # floor so the degenerate model still factorizes
        eps0 = eps_scale
    chol = None
    eps = eps0
    for attempt in range(4):
        eps = eps0 * 10.0 ** attempt
        reg = sigma.copy()
        reg[np.diag_indices_from(reg)] += eps
        try:
            chol = scipy.linalg.cholesky(reg, lower=True, overwrite_a=True,
                                         check_finite=False)
            break
        except scipy.linalg.LinAlgError:
            chol = None
    if chol is None:
        raise CholeskyFailure(
            f"covariance not positive definite even with eps={eps:g} "
            f"(started at {eps0:g}, escalated 3 times)"
        )
    return GaussianModel(dim=dim, n_samples=n, mu=mu, sigma=sigma,
                         chol_precision=chol, eps=eps,
                         feature_tap=tap, pool_steps=steps)


def save(model: GaussianModel, path) -> None:
    """Write the model to a versioned binary container."""
    tap_bytes = model.feature_tap.encode("utf-8")
    if len(tap_bytes) > 0xFFFF:
        raise ValidationError("feature_tap label too long to store")
    header = _MODEL_MAGIC + struct.pack(
        "<BH", _MODEL_VERSION, len(tap_bytes)
    ) + tap_bytes + struct.pack(
        "<QQId", model.n_samples, model.dim, model.pool_steps, model.eps
    )
    parts = [header]
    for arr in (model.mu, model.sigma, model.chol_precision):
        parts.append(tensor_to_bytes(Tensor("f64", arr.shape, arr)))
    path = Path(path)
    try:
        path.write_bytes(b"".join(parts))
    except OSError as exc:
        raise IOFailure(path, exc) from exc


def load(path) -> GaussianModel:
    """Read a model container; any corruption fails before a model exists."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise IOFailure(path, exc) from exc
    if len(buf) < 7:
        raise InvalidHeader(f"model file too short ({len(buf)} bytes)", offset=0)
    if buf[:4] != _MODEL_MAGIC:
        raise InvalidHeader(f"bad model magic {buf[:4]!r}", offset=0)
    version, tap_len = struct.unpack_from("<BH", buf, 4)
    if version != _MODEL_VERSION:
        raise InvalidHeader(f"unsupported model file version {version}", offset=4)
    pos = 7
    if len(buf) < pos + tap_len + 28:
        raise InvalidHeader("model header truncated", offset=len(buf))
    tap = buf[pos:pos + tap_len].decode("utf-8")
    pos += tap_len
    n_samples, dim, pool_steps, eps = struct.unpack_from("<QQId", buf, pos)
    pos += 28
    arrays = []
    for name in ("mu", "sigma", "chol_precision"):
        tensor, pos = tensor_from_bytes(buf, offset=pos)
        if tensor.dtype != "f64":
            raise InvalidHeader(f"model field {name} must be f64", offset=pos)
        arrays.append(tensor.values)
    if pos != len(buf):
        raise InvalidHeader(
            f"{len(buf) - pos} trailing bytes after model payload", offset=pos
        )
    mu, sigma, chol = arrays
    if mu.shape != (dim,) or sigma.shape != (dim, dim) or chol.shape != (dim, dim):
        raise InvalidHeader("model field shapes do not match header dim", offset=pos)
    if n_samples < 2:
        raise InvalidHeader(f"model claims n_samples={n_samples}", offset=0)
    return GaussianModel(dim=dim, n_samples=n_samples, mu=mu, sigma=sigma,
                         chol_precision=chol, eps=eps,
                         feature_tap=tap, pool_steps=pool_steps)
