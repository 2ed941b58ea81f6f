"""Logit and sample-based uncertainty scorers against loop oracles."""

import math

import numpy as np
import pytest

from oodkit.baselines import (
    energy_uncertainty,
    kl_from_uniform_uncertainty,
    max_softmax_uncertainty,
    sample_spread_uncertainty,
    temperature_scaled_uncertainty,
)
from oodkit.errors import ValidationError


def voxel_softmax(col):
    m = max(col)
    e = [math.exp(v - m) for v in col]
    s = sum(e)
    return [v / s for v in e]


def oracle_max_softmax(logits, t=1.0):
    l = np.asarray(logits, dtype=np.float64)
    flat = l.reshape(l.shape[0], -1)
    confs = [max(voxel_softmax(list(flat[:, j] / t))) for j in range(flat.shape[1])]
    return 1.0 - sum(confs) / len(confs)


def oracle_kl(logits):
    l = np.asarray(logits, dtype=np.float64)
    c = l.shape[0]
    flat = l.reshape(c, -1)
    kls = []
    for j in range(flat.shape[1]):
        p = voxel_softmax(list(flat[:, j]))
        h = -sum(q * math.log(q) for q in p if q > 0)
        kls.append(math.log(c) - h)
    return 1.0 - (sum(kls) / len(kls)) / math.log(c)


def oracle_energy(logits, t):
    l = np.asarray(logits, dtype=np.float64)
    flat = l.reshape(l.shape[0], -1)
    es = []
    for j in range(flat.shape[1]):
        col = list(flat[:, j] / t)
        m = max(col)
        es.append(-t * (m + math.log(sum(math.exp(v - m) for v in col))))
    return sum(es) / len(es)


def rand_logits(rng, shape=(3, 4, 5), scale=5.0):
    return rng.normal(scale=scale, size=shape)


# -- max softmax / temperature -------------------------------------------

def test_max_softmax_hand_example():
    # one voxel, two classes, gap 2: confidence = sigmoid(2)
    logits = np.array([[1.0], [3.0]])
    want = 1.0 - 1.0 / (1.0 + math.exp(-2.0))
    assert max_softmax_uncertainty(logits) == pytest.approx(want, rel=1e-15)


def test_max_softmax_uniform_logits():
    logits = np.zeros((4, 2, 2))
    assert max_softmax_uncertainty(logits) == pytest.approx(0.75, rel=1e-15)


def test_max_softmax_matches_voxel_oracle():
    rng = np.random.default_rng(11)
    for _ in range(20):
        l = rand_logits(rng)
        assert max_softmax_uncertainty(l) == pytest.approx(
            oracle_max_softmax(l), rel=1e-12
        )


def test_temperature_one_is_bitwise_max_softmax():
    rng = np.random.default_rng(12)
    for _ in range(10):
        l = rand_logits(rng)
        assert temperature_scaled_uncertainty(l, 1.0) == max_softmax_uncertainty(l)


def test_temperature_matches_oracle():
    rng = np.random.default_rng(13)
    for t in (0.5, 2.0, 10.0, 100.0):
        l = rand_logits(rng)
        assert temperature_scaled_uncertainty(l, t) == pytest.approx(
            oracle_max_softmax(l, t), rel=1e-12
        )


def test_high_temperature_flattens():
    l = np.array([[0.0, 0.0], [4.0, 4.0]])
    u1 = temperature_scaled_uncertainty(l, 1.0)
    u100 = temperature_scaled_uncertainty(l, 100.0)
    assert u100 > u1
    assert u100 == pytest.approx(0.5, abs=0.02)


def test_extreme_logits_stable():
    l = np.array([[1e4, -1e4], [-1e4, 1e4]])
    u = max_softmax_uncertainty(l)
    assert math.isfinite(u)
    assert u == pytest.approx(0.0, abs=1e-12)


# -- kl from uniform ------------------------------------------------------

def test_kl_uniform_logits_max_uncertainty():
    assert kl_from_uniform_uncertainty(np.zeros((3, 5))) == pytest.approx(1.0)


def test_kl_peaked_logits_near_zero():
    l = np.array([[100.0], [0.0], [0.0]])
    assert kl_from_uniform_uncertainty(l) == pytest.approx(0.0, abs=1e-12)


def test_kl_matches_voxel_oracle():
    rng = np.random.default_rng(14)
    for _ in range(20):
        l = rand_logits(rng)
        assert kl_from_uniform_uncertainty(l) == pytest.approx(
            oracle_kl(l), rel=1e-12
        )


def test_kl_two_class_hand_value():
    # p = (sigmoid(2), sigmoid(-2)); KL = log2 - H(p)
    l = np.array([[1.0], [3.0]])
    p1 = 1.0 / (1.0 + math.exp(-2.0))
    h = -(p1 * math.log(p1) + (1 - p1) * math.log(1 - p1))
    want = 1.0 - (math.log(2.0) - h) / math.log(2.0)
    assert kl_from_uniform_uncertainty(l) == pytest.approx(want, rel=1e-14)


# -- energy ----------------------------------------------------------------

def test_energy_hand_example():
    # single voxel [0, 0] at T=1: -log 2
    l = np.array([[0.0], [0.0]])
    assert energy_uncertainty(l, 1.0) == pytest.approx(-math.log(2.0), rel=1e-15)


def test_energy_matches_oracle():
    rng = np.random.default_rng(15)
    for t in (1.0, 10.0, 100.0):
        l = rand_logits(rng)
        assert energy_uncertainty(l, t) == pytest.approx(oracle_energy(l, t), rel=1e-12)


def test_energy_shift_identity():
    # adding a constant c to all logits shifts energy by exactly -c
    rng = np.random.default_rng(16)
    l = rand_logits(rng)
    base = energy_uncertainty(l, 1.0)
    shifted = energy_uncertainty(l + 7.5, 1.0)
    assert shifted == pytest.approx(base - 7.5, rel=1e-10)


def test_energy_orientation():
    # confident voxel (large positive logit) has lower energy than a flat one
    confident = np.array([[10.0], [0.0]])
    flat = np.array([[0.0], [0.0]])
    assert energy_uncertainty(confident, 1.0) < energy_uncertainty(flat, 1.0)


def test_energy_extreme_logits_stable():
    l = np.array([[1e4], [-1e4]])
    assert energy_uncertainty(l, 1.0) == pytest.approx(-1e4, rel=1e-12)


# -- sample spread ----------------------------------------------------------

def test_spread_identical_samples_zero():
    v = np.random.default_rng(17).uniform(size=(4, 4))
    for k in (2, 3, 7):
        assert sample_spread_uncertainty([v.copy() for _ in range(k)]) == 0.0


def test_spread_hand_example():
    # two voxels; voxel probs {0,1} have std 0.5, {0.5,0.5} have std 0
    a = np.array([0.0, 0.5])
    b = np.array([1.0, 0.5])
    assert sample_spread_uncertainty([a, b]) == pytest.approx(0.25, rel=1e-15)


def test_spread_population_std_oracle():
    # centering shifts rounding slightly, so oracle match is near-exact
    rng = np.random.default_rng(18)
    vols = [rng.uniform(size=(3, 4)) for _ in range(5)]
    stack = np.stack(vols)
    want = float(stack.std(axis=0, ddof=0).mean())
    assert sample_spread_uncertainty(vols) == pytest.approx(want, rel=1e-12)


def test_spread_voxel_loop_oracle():
    rng = np.random.default_rng(19)
    vols = [rng.uniform(size=(2, 3)) for _ in range(4)]
    total = 0.0
    for idx in np.ndindex((2, 3)):
        xs = [v[idx] for v in vols]
        mean = sum(xs) / len(xs)
        total += math.sqrt(sum((x - mean) ** 2 for x in xs) / len(xs))
    want = total / 6.0
    assert sample_spread_uncertainty(vols) == pytest.approx(want, rel=1e-12)


# -- validation ---------------------------------------------------------------

def test_logit_validation():
    with pytest.raises(ValidationError):
        max_softmax_uncertainty(np.zeros(5))  # no class axis
    with pytest.raises(ValidationError):
        max_softmax_uncertainty(np.zeros((1, 5)))  # single class
    with pytest.raises(ValidationError):
        max_softmax_uncertainty(np.array([[np.nan], [1.0]]))
    with pytest.raises(ValidationError):
        temperature_scaled_uncertainty(np.zeros((2, 2)), 0.0)
    with pytest.raises(ValidationError):
        energy_uncertainty(np.zeros((2, 2)), -1.0)


def test_spread_validation():
    with pytest.raises(ValidationError):
        sample_spread_uncertainty([np.zeros((2, 2))])  # need >= 2
    with pytest.raises(ValidationError):
        sample_spread_uncertainty([np.zeros((2, 2)), np.zeros((3, 2))])
    with pytest.raises(ValidationError):
        sample_spread_uncertainty([np.zeros((2, 2)), np.full((2, 2), 1.5)])
    with pytest.raises(ValidationError):
        sample_spread_uncertainty([np.zeros((2, 2)), np.full((2, 2), np.nan)])
