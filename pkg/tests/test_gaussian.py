"""Gaussian fit vs a textbook two-pass oracle, regularization, model I/O."""

import numpy as np
import pytest
import scipy.linalg

from oodkit.errors import (
    CholeskyFailure,
    DimensionMismatch,
    InvalidHeader,
    IOFailure,
    TapMismatch,
    TensorFormatError,
    ValidationError,
)
from oodkit.gaussian import GaussianModel, fit, load, save


def two_pass_oracle(x):
    """Plain textbook estimate: mean first, then 1/N outer products."""
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    mu = np.zeros(d)
    for row in x:
        mu += row
    mu /= n
    sigma = np.zeros((d, d))
    for row in x:
        c = row - mu
        sigma += np.outer(c, c)
    sigma /= n
    return mu, sigma


def test_hand_example():
    m = fit([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]])
    np.testing.assert_array_equal(m.mu, [1.0, 1.0])
    np.testing.assert_array_equal(m.sigma, np.eye(2))
    assert m.n_samples == 4
    assert m.dim == 2
    assert m.eps == pytest.approx(1e-6 * 2 / 2)


@pytest.mark.parametrize("d", [2, 32, 256])
@pytest.mark.parametrize("n", [10, 1000])
@pytest.mark.parametrize("workers", [1, 4])
def test_matches_two_pass_oracle(d, n, workers):
    rng = np.random.default_rng(d * 10_000 + n)
    x = rng.normal(size=(n, d)) * rng.uniform(0.5, 3.0, size=d) + rng.normal(size=d)
    m = fit(list(x), workers=workers)
    mu, sigma = two_pass_oracle(x)
    assert np.linalg.norm(m.mu - mu) <= 1e-9 * max(np.linalg.norm(mu), 1.0)
    rel = np.linalg.norm(m.sigma - sigma) / np.linalg.norm(sigma)
    assert rel <= 1e-9


def test_worker_counts_agree_bitwise():
    rng = np.random.default_rng(0)
    x = list(rng.normal(size=(200, 64)))
    a = fit(x, workers=1)
    b = fit(x, workers=4)
    assert a.mu.tobytes() == b.mu.tobytes()
    assert a.sigma.tobytes() == b.sigma.tobytes()
    assert a.chol_precision.tobytes() == b.chol_precision.tobytes()


def test_permutation_invariance():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(300, 16))
    a = fit(list(x))
    b = fit(list(x[rng.permutation(300)]))
    assert np.linalg.norm(a.mu - b.mu) < 1e-10
    assert np.linalg.norm(a.sigma - b.sigma) < 1e-10


def test_affine_scaling():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(120, 8))
    a = fit(list(x))
    b = fit(list(3.0 * x))
    np.testing.assert_allclose(b.mu, 3.0 * a.mu, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(b.sigma, 9.0 * a.sigma, rtol=1e-9, atol=1e-12)


def test_sigma_exactly_symmetric():
    rng = np.random.default_rng(7)
    m = fit(list(rng.normal(size=(50, 33))))
    assert np.array_equal(m.sigma, m.sigma.T)


def test_identical_samples_still_factorize():
    m = fit([[1.0, 2.0, 3.0]] * 10)
    assert np.all(m.sigma == 0.0)
    assert m.eps > 0.0
    assert np.all(np.isfinite(m.chol_precision))
    # factor of eps*I is sqrt(eps)*I
    np.testing.assert_allclose(m.chol_precision,
                               np.sqrt(m.eps) * np.eye(3), rtol=1e-12)


def test_cholesky_factor_reconstructs_regularized_sigma():
    rng = np.random.default_rng(8)
    m = fit(list(rng.normal(size=(40, 12))))
    reg = m.sigma + m.eps * np.eye(12)
    np.testing.assert_allclose(m.chol_precision @ m.chol_precision.T, reg,
                               rtol=1e-10, atol=1e-12)


def test_eps_escalates_then_errors(monkeypatch):
    rng = np.random.default_rng(9)
    x = list(rng.normal(size=(30, 4)))
    attempts = []
    real = scipy.linalg.cholesky

    def fail_twice(a, **kw):
        attempts.append(a[0, 0] - 0.0)
        if len(attempts) <= 2:
            raise scipy.linalg.LinAlgError("forced")
        return real(a, **kw)

    monkeypatch.setattr(scipy.linalg, "cholesky", fail_twice)
    m = fit(x)
    assert len(attempts) == 3
    base = m.eps / 100.0
    assert m.eps == pytest.approx(base * 100)

    attempts.clear()

    def always_fail(a, **kw):
        attempts.append(None)
        raise scipy.linalg.LinAlgError("forced")

    monkeypatch.setattr(scipy.linalg, "cholesky", always_fail)
    with pytest.raises(CholeskyFailure):
        fit(x)
    assert len(attempts) == 4  # initial eps plus three escalations


def test_dimension_guard():
    # the limit itself is out of bounds, not just values beyond it
    with pytest.raises(ValidationError):
        fit([np.zeros(20_000), np.zeros(20_000)])
    with pytest.raises(ValidationError):
        fit([np.zeros(20_001), np.zeros(20_001)])


def test_mid_stream_dimension_mismatch():
    with pytest.raises(DimensionMismatch) as exc:
        fit([np.zeros(3), np.zeros(3), np.zeros(4)])
    assert "2" in str(exc.value)


def test_too_few_samples():
    with pytest.raises(ValidationError):
        fit([np.zeros(3)])


def test_non_finite_rejected():
    with pytest.raises(ValidationError):
        fit([[0.0, np.nan], [1.0, 2.0]])


def test_save_load_bitwise(tmp_path):
    rng = np.random.default_rng(10)
    m = fit(list(rng.normal(size=(25, 6))), feature_tap="enc.stage4",
            pool_steps=2)
    p = tmp_path / "model.bin"
    save(m, p)
    back = load(p)
    assert back.dim == m.dim
    assert back.n_samples == m.n_samples
    assert back.eps == m.eps
    assert back.feature_tap == "enc.stage4"
    assert back.pool_steps == 2
    assert back.mu.tobytes() == m.mu.tobytes()
    assert back.sigma.tobytes() == m.sigma.tobytes()
    assert back.chol_precision.tobytes() == m.chol_precision.tobytes()


def test_save_is_deterministic(tmp_path):
    rng = np.random.default_rng(11)
    m = fit(list(rng.normal(size=(10, 3))))
    save(m, tmp_path / "a.bin")
    save(m, tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_tap_guard():
    m = fit([[0.0, 1.0], [1.0, 0.0]], feature_tap="enc")
    m.check_tap("enc")
    with pytest.raises(TapMismatch):
        m.check_tap("dec")


def test_load_missing_file(tmp_path):
    with pytest.raises(IOFailure):
        load(tmp_path / "nope.bin")


def test_corrupted_model_never_partial(tmp_path):
    rng = np.random.default_rng(12)
    m = fit(list(rng.normal(size=(8, 4))), feature_tap="t")
    p = tmp_path / "model.bin"
    save(m, p)
    blob = p.read_bytes()
    step = max(len(blob) // 40, 1)
    for k in range(0, len(blob), step):
        (tmp_path / "trunc.bin").write_bytes(blob[:k])
        with pytest.raises((TensorFormatError, InvalidHeader)):
            load(tmp_path / "trunc.bin")
    # trailing garbage is also rejected
    (tmp_path / "pad.bin").write_bytes(blob + b"\x01")
    with pytest.raises(InvalidHeader):
        load(tmp_path / "pad.bin")


def test_version_mismatch(tmp_path):
    m = fit([[0.0, 1.0], [1.0, 0.0]])
    p = tmp_path / "model.bin"
    save(m, p)
    blob = bytearray(p.read_bytes())
    blob[4] = 99
    p.write_bytes(bytes(blob))
    with pytest.raises(InvalidHeader) as exc:
        load(p)
    assert "version" in str(exc.value)


def test_fit_accepts_projected_features():
    class Box:
        def __init__(self, v):
            self.vector = np.asarray(v)

    m = fit([Box([0.0, 0.0]), Box([2.0, 2.0])])
    np.testing.assert_array_equal(m.mu, [1.0, 1.0])
