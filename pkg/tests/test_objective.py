import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import minimize_scalar

from vfladmm import objective as obj
from vfladmm.dataset import PartyShard

from conftest import random_labels, random_shards

vecs = arrays(np.float64, st.integers(1, 30), elements=st.floats(-40, 40))


def _softplus_oracle(t: float) -> float:
    getcontext().prec = 50
    return float((1 + Decimal(t).exp()).ln())


def _loss_oracle(z, labels, scale):
    return scale * math.fsum(_softplus_oracle(-y * v) for v, y in zip(z, labels))


# ------------------------------------------------------------------ examples

def test_config_validation():
    with pytest.raises(ValueError):
        obj.ObjectiveConfig(lam=-1.0)
    with pytest.raises(ValueError):
        obj.ObjectiveConfig(loss_scale=0.0)
    with pytest.raises(ValueError):
        obj.LossProfile(0.0)


def test_loss_examples():
    assert obj.loss_value([0.0], [1.0]) == pytest.approx(math.log(2.0), rel=1e-15)
    v = obj.loss_value([30.0], [1.0])
    assert v == pytest.approx(_softplus_oracle(-30.0), rel=1e-12)
    assert v == pytest.approx(9.357622968839e-14, rel=1e-10)
    a, b = 0.7, -2.3
    y = [1.0, -1.0]
    assert obj.loss_value([a, b], y) == pytest.approx(obj.loss_value([a], [1.0]) + obj.loss_value([b], [-1.0]),
                                                      rel=1e-15)
    # large margins on the wrong side take the linear branch exactly
    assert obj.loss_value([-1e6], [1.0]) == 1e6
    with pytest.raises(ValueError, match="does not match"):
        obj.loss_value([0.0, 1.0], [1.0])


def test_grad_examples():
    np.testing.assert_array_equal(obj.loss_grad([0.0], [1.0]), [-0.5])
    np.testing.assert_array_equal(obj.loss_grad([0.0], [-1.0]), [0.5])
    np.testing.assert_array_equal(obj.loss_grad([0.0], [1.0], 0.5), [-0.25])
    with pytest.raises(ValueError):
        obj.loss_grad([0.0], [1.0, 1.0])


def test_grad_finite_differences(rng):
    for _ in range(50):
        z = rng.normal(0, 3, 7)
        y = random_labels(rng, 7)
        g = obj.loss_grad(z, y)
        u = rng.standard_normal(7)
        u /= np.linalg.norm(u)
        h = 1e-5
        fd = (obj.loss_value(z + h * u, y) - obj.loss_value(z - h * u, y)) / (2 * h)
        assert abs(fd - g @ u) <= 1e-6 * max(1.0, abs(fd))


def test_lipschitz_constant():
    assert obj.loss_lipschitz(obj.ObjectiveConfig()) == 0.25
    assert obj.loss_lipschitz(obj.ObjectiveConfig(loss_scale=1 / 100), 100) == pytest.approx(0.0025)
    # the logistic slope peaks at 0 with value 1/4
    t = np.linspace(-20, 20, 400_001)
    s = 1 / (1 + np.exp(-t))
    assert np.max(s * (1 - s)) == pytest.approx(0.25, abs=1e-12)
    profile = obj.loss_profile(obj.ObjectiveConfig(loss_scale=2.0))
    assert profile.lipschitz == 0.5 and profile.convex


def test_curvature_below_lipschitz_numerically(rng):
    L = 0.25
    for _ in range(20):
        z = rng.normal(0, 4, 9)
        y = random_labels(rng, 9)
        h = 1e-4
        fd = (obj.loss_grad(z + h, y) - obj.loss_grad(z - h, y)) / (2 * h)
        np.testing.assert_allclose(fd, obj.loss_curvature(z, y), rtol=1e-6, atol=1e-10)
        assert np.all(fd <= L + 1e-8)


def test_reg_pieces():
    assert obj.reg_value([3.0, 4.0]) == 12.5
    np.testing.assert_array_equal(obj.reg_grad([3.0, 4.0]), [3.0, 4.0])
    assert obj.reg_value(np.zeros(3)) == 0.0
    np.testing.assert_array_equal(obj.reg_grad(np.zeros(3)), np.zeros(3))
    assert obj.reg_curvature() == obj.reg_curvature(np.ones(5)) == 1.0


def test_prox_examples(rng):
    v = rng.standard_normal(4)
    np.testing.assert_array_equal(obj.prox_reg(v, 0.0), v)
    np.testing.assert_array_equal(obj.prox_reg([2.0], 1.0), [1.0])
    with pytest.raises(ValueError):
        obj.prox_reg(v, -1.0)


@given(v=vecs, w=st.floats(0, 50))
def test_prox_matches_scalar_minimiser(v, w):
    got = obj.prox_reg(v, w)
    for vi, gi in zip(v[:5], got[:5]):
        res = minimize_scalar(lambda x: 0.5 * w * x * x + 0.5 * (x - vi) ** 2, bracket=(vi - 1, vi + 1),
                              tol=1e-12)
        assert abs(res.x - gi) <= 1e-6 * max(1.0, abs(vi))


def test_full_objective_examples(rng):
    shards = random_shards(rng, 12, [3, 2])
    y = random_labels(rng, 12)
    cfg = obj.ObjectiveConfig(lam=0.3, loss_scale=1 / 12)
    zero = obj.full_objective(shards, [np.zeros(3), np.zeros(2)], y, cfg)
    assert zero == pytest.approx(12 * (1 / 12) * math.log(2), rel=1e-14)
    x = rng.standard_normal(5)
    one = [PartyShard(0, np.eye(5))]
    y5 = random_labels(rng, 5)
    cfg = obj.ObjectiveConfig(lam=0.7)
    assert obj.full_objective(one, [x], y5, cfg) == pytest.approx(
        obj.loss_value(x, y5) + 0.7 * 0.5 * x @ x, rel=1e-14)
    with pytest.raises(ValueError, match="parameter blocks"):
        obj.full_objective(shards, [np.zeros(3)], y, cfg)
    with pytest.raises(ValueError, match="block"):
        obj.full_objective(shards, [np.zeros(3), np.zeros(4)], y, cfg)


def test_full_objective_vs_second_evaluator(rng):
    shards = random_shards(rng, 30, [4, 3, 5])
    y = random_labels(rng, 30)
    xs = [rng.standard_normal(s.width) for s in shards]
    cfg = obj.ObjectiveConfig(lam=0.05, loss_scale=0.2)
    D = np.hstack([s.block for s in shards])
    z = D @ np.concatenate(xs)
    ref = _loss_oracle(z, y, 0.2) + 0.05 * 0.5 * math.fsum(float(v) ** 2 for x in xs for v in x)
    assert obj.full_objective(shards, xs, y, cfg) == pytest.approx(ref, rel=1e-12)


# ---------------------------------------------------------------- properties

@given(z=vecs, scale=st.sampled_from([1.0, 0.01]))
def test_loss_matches_high_precision(z, scale):
    y = np.where(np.arange(z.size) % 2 == 0, 1.0, -1.0)
    assert obj.loss_value(z, y, scale) == pytest.approx(_loss_oracle(z, y, scale), rel=1e-12, abs=1e-300)


@given(z=vecs, seed=st.integers(0, 10_000))
def test_convexity_surrogate(z, seed):
    rng = np.random.default_rng(seed)
    y = random_labels(rng, z.size)
    z2 = z + rng.normal(0, 5, z.size)
    lhs = obj.loss_value(z2, y)
    rhs = obj.loss_value(z, y) + obj.loss_grad(z, y) @ (z2 - z)
    assert lhs >= rhs - 1e-12 * max(1.0, abs(lhs))


def test_gradient_lipschitz_pairs(rng):
    for _ in range(100):
        n = int(rng.integers(1, 20))
        y = random_labels(rng, n)
        z, z2 = rng.normal(0, 5, n), rng.normal(0, 5, n)
        g = obj.loss_grad(z, y) - obj.loss_grad(z2, y)
        assert np.linalg.norm(g) <= 0.25 * np.linalg.norm(z - z2) + 1e-15


@given(v=vecs, seed=st.integers(0, 10_000), w=st.floats(0, 100))
def test_prox_nonexpansive(v, seed, w):
    v2 = v + np.random.default_rng(seed).standard_normal(v.size)
    assert np.linalg.norm(obj.prox_reg(v, w) - obj.prox_reg(v2, w)) <= np.linalg.norm(v - v2) * (1 + 1e-15)
