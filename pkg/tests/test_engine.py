import functools
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from vfladmm import engine, objective as obj, privacy as pv
from vfladmm.dataset import PartyShard
from vfladmm.engine import EngineError, EngineState, HyperParams
from vfladmm.harness import load_config, prepare_data
from vfladmm.harness.experiment import resolve_hyper
from vfladmm.subsolvers import SubproblemError

from conftest import CONFIGS, random_labels, random_shards

L = 0.25


@functools.lru_cache(maxsize=None)
def _fixture():
    cfg = load_config(CONFIGS / "a9a_assumptions.json")
    data = prepare_data(cfg)
    return data, resolve_hyper(cfg, data)


def _random_state(rng, shards, n):
    xs = tuple(rng.standard_normal(s.width) for s in shards)
    shares = tuple(s.block @ x for s, x in zip(shards, xs))
    return EngineState(xs, shares, shares, rng.standard_normal(n), 0.3 * rng.standard_normal(n), 1)


# ------------------------------------------------------------------ hyper

def test_hyper_validation():
    with pytest.raises(ValueError):
        HyperParams(rho=0.0)
    with pytest.raises(ValueError):
        HyperParams(rho=1.0, max_epochs=-1)
    with pytest.raises(ValueError):
        HyperParams(rho=1.0, lam=-1.0)
    with pytest.raises(ValueError):
        HyperParams(rho=1.0, lyapunov_tol=0.0)
    assert HyperParams(rho=1.0, lam=2.0, loss_scale=0.5).objective == obj.ObjectiveConfig(2.0, 0.5)


# ------------------------------------------------------------------ state

def test_init_state_examples(rng):
    shards = random_shards(rng, 14, [3, 5])
    y = random_labels(rng, 14)
    hyper = HyperParams(rho=1.0, lam=0.4, loss_scale=0.5)
    s0 = engine.init_state(shards)
    assert s0.t == 0 and s0.n_parties == 2
    assert all(not x.any() for x in s0.x) and not s0.z.any() and not s0.y.any()
    rec = engine.diagnose(s0, shards, y, hyper)
    assert rec.objective == pytest.approx(14 * 0.5 * math.log(2), rel=1e-14)
    assert rec.primal_residual == 0.0
    assert rec.lagrangian == obj.loss_value(np.zeros(14), y, 0.5)


def _hand_rolled(n, labels, rho, epochs):
    # single party, D = I, lam = 0: x-step is x = -(y + rho*(a - s_prev)) / rho
    x = np.zeros(n)
    s = np.zeros(n)
    z = np.zeros(n)
    y = np.zeros(n)
    for _ in range(epochs):
        c = (s - z) - s
        x = -(y + rho * c) / rho
        s = x.copy()
        zn = np.empty(n)
        for i in range(n):
            def deriv(t, i=i):
                return -labels[i] / (1 + math.exp(labels[i] * t)) - y[i] + rho * (t - s[i])
            zn[i] = brentq(deriv, s[i] + (y[i] - 1) / rho, s[i] + (y[i] + 1) / rho, xtol=1e-300, rtol=1e-15)
        z = zn
        y = y + rho * (s - z)
    return x, z, y


def test_single_party_identity_large_rho(rng):
    n = 6
    labels = random_labels(rng, n)
    shards = [PartyShard(0, np.eye(n))]
    hyper = HyperParams(rho=1e7, lam=0.0, max_epochs=1)
    res = engine.run(shards, labels, hyper)
    assert res.trace[-1].primal_residual <= 1e-6
    hyper = HyperParams(rho=3.0, lam=0.0, max_epochs=12)
    res = engine.run(shards, labels, hyper)
    x, z, y = _hand_rolled(n, labels, 3.0, 12)
    np.testing.assert_allclose(res.state.x[0], x, rtol=0, atol=1e-12)
    np.testing.assert_allclose(res.state.z, z, rtol=0, atol=1e-12)
    np.testing.assert_allclose(res.state.y, y, rtol=0, atol=1e-12)


def test_order_independence(rng):
    shards = random_shards(rng, 20, [3, 4, 2])
    labels = random_labels(rng, 20)
    hyper = HyperParams(rho=0.7, lam=0.1)
    a = b = engine.init_state(shards)
    for _ in range(5):
        a = engine.iterate(a, shards, labels, hyper)
        b = engine.iterate(b, shards, labels, hyper, order=[2, 0, 1])
    for u, v in zip(a.x + (a.z, a.y), b.x + (b.z, b.y)):
        assert u.tobytes() == v.tobytes()


def test_zero_sigma_perturber_is_identity(rng):
    shards = random_shards(rng, 20, [3, 4])
    labels = random_labels(rng, 20)
    hyper = HyperParams(rho=0.7, lam=0.1, max_epochs=10)
    plain = engine.run(shards, labels, hyper)
    quiet = engine.run(shards, labels, hyper, perturber=pv.Perturber([0.0, 0.0], seed=3))
    assert plain.trace == quiet.trace


def test_zero_epochs(rng):
    shards = random_shards(rng, 8, [2])
    res = engine.run(shards, random_labels(rng, 8), HyperParams(rho=1.0, max_epochs=0))
    assert res.trace == []
    init = engine.init_state(shards)
    assert res.state.t == 0 and not res.state.x[0].any() and not res.state.z.any()
    assert init.z.shape == res.state.z.shape


def test_determinism(rng):
    shards = random_shards(rng, 25, [4, 4])
    labels = random_labels(rng, 25)
    hyper = HyperParams(rho=0.5, lam=0.05, max_epochs=15, seed=3)
    a, b = engine.run(shards, labels, hyper), engine.run(shards, labels, hyper)
    assert a.trace == b.trace
    params = pv.PrivacyParams(1.0, 1e-5, b1=1.0, seed=8)
    a = engine.run(shards, labels, hyper, privacy=params)
    b = engine.run(shards, labels, hyper, privacy=params)
    assert a.trace == b.trace


def test_shares_track_blocks(rng):
    shards = random_shards(rng, 30, [5, 3])
    labels = random_labels(rng, 30)

    def check(rec, state):
        for sh, x, s in zip(shards, state.x, state.shares):
            assert np.max(np.abs(sh.block @ x - s)) <= 1e-12

    engine.run(shards, labels, HyperParams(rho=0.5, lam=0.1, max_epochs=10), callbacks=[check])


def test_failure_keeps_partial_trace(rng, monkeypatch):
    shards = random_shards(rng, 10, [2, 2])
    labels = random_labels(rng, 10)
    real = engine.x_step
    calls = {"n": 0}

    def flaky(inp, **kw):
        calls["n"] += 1
        if calls["n"] == 8:  # epoch 4, party 1
            raise SubproblemError("synthetic failure")
        return real(inp, **kw)

    monkeypatch.setattr(engine, "x_step", flaky)
    with pytest.raises(EngineError, match="party 1: synthetic failure") as info:
        engine.run(shards, labels, HyperParams(rho=1.0, lam=0.1, max_epochs=10))
    assert [r.epoch for r in info.value.trace] == [1, 2, 3]


def test_early_stop(rng):
    shards = random_shards(rng, 20, [3])
    labels = random_labels(rng, 20)
    hyper = HyperParams(rho=2.0, lam=1.0, max_epochs=500, lyapunov_tol=1e-6, early_stop=True)
    res = engine.run(shards, labels, hyper)
    assert res.stopped_early and res.trace[-1].lyapunov <= 1e-6
    assert all(r.lyapunov > 1e-6 for r in res.trace[:-1])


def test_ball_report_logged_once(rng, caplog):
    shards = random_shards(rng, 20, [3])
    labels = random_labels(rng, 20)
    caplog.set_level("INFO", logger="vfladmm.engine")
    engine.run(shards, labels, HyperParams(rho=0.5, lam=0.01, max_epochs=10, ball_radius=1e-3))
    hits = [r for r in caplog.records if "exceed the ball radius" in r.getMessage()]
    assert len(hits) == 1


# ---------------------------------------------------------- diagnostics

def test_lagrangian_examples(rng):
    shards = random_shards(rng, 9, [2, 3])
    labels = random_labels(rng, 9)
    hyper = HyperParams(rho=1.7, lam=0.3)
    s0 = engine.init_state(shards)
    assert engine.augmented_lagrangian(s0, shards, labels, hyper) == obj.loss_value(np.zeros(9), labels)
    st_ = _random_state(rng, shards, 9)
    total = sum(st_.shares)
    feasible = EngineState(st_.x, st_.shares, st_.released, total, st_.y, 1)
    expect = obj.loss_value(total, labels) + 0.3 * sum(0.5 * x @ x for x in st_.x)
    assert engine.augmented_lagrangian(feasible, shards, labels, hyper) == pytest.approx(expect, rel=1e-12)


def test_lagrangian_vs_independent_formula(rng):
    for _ in range(10):
        shards = random_shards(rng, 15, [2, 4, 3])
        labels = random_labels(rng, 15)
        hyper = HyperParams(rho=float(rng.uniform(0.1, 5)), lam=float(rng.uniform(0, 2)),
                            loss_scale=float(rng.uniform(0.1, 1)))
        s = _random_state(rng, shards, 15)
        r = np.hstack([sh.block for sh in shards]) @ np.concatenate(s.x) - s.z
        loss = hyper.loss_scale * math.fsum(math.log1p(math.exp(-yi * zi)) for yi, zi in zip(labels, s.z))
        expect = (loss + hyper.lam * math.fsum(0.5 * float(v) ** 2 for x in s.x for v in x)
                  + float(s.y @ r) + 0.5 * hyper.rho * float(r @ r))
        assert engine.augmented_lagrangian(s, shards, labels, hyper) == pytest.approx(expect, rel=1e-12)


def _lyapunov_terms(s, shards, labels, hyper, convex=True):
    D = [sh.block for sh in shards]
    r = sum(d @ x for d, x in zip(D, s.x)) - s.z
    sig = 1 / (1 + np.exp(labels * s.z))
    grad = hyper.loss_scale * (-labels * sig)
    xs = 0.0
    for d, x in zip(D, s.x):
        g = d.T @ s.y + hyper.rho * d.T @ r
        if convex:
            v = x - g
            term = x - v / (1 + hyper.lam)
        else:
            term = hyper.lam * x + g
        xs += term @ term
    gz = grad - s.y + hyper.rho * (s.z - (r + s.z))
    return xs, gz @ gz, r @ r


@pytest.mark.parametrize("convex", [True, False])
def test_lyapunov_terms_vs_independent_formula(rng, convex):
    for _ in range(10):
        shards = random_shards(rng, 12, [3, 2])
        labels = random_labels(rng, 12)
        hyper = HyperParams(rho=float(rng.uniform(0.1, 5)), lam=float(rng.uniform(0, 2)))
        s = _random_state(rng, shards, 12)
        a, b, c = _lyapunov_terms(s, shards, labels, hyper, convex)
        total = sum(s.released)
        coord = engine.coordinator_terms(total, s.z, s.y, labels, hyper)
        parties = [engine.party_terms(sh, x, total - s.z, s.y, hyper, convex) for sh, x in zip(shards, s.x)]
        assert sum(p.grad_map_sq for p in parties) == pytest.approx(a, rel=1e-10)
        assert coord.z_grad_sq == pytest.approx(b, rel=1e-10)
        assert coord.residual_sq == pytest.approx(c, rel=1e-10)
        assert engine.lyapunov(s, shards, labels, hyper, convex) == pytest.approx(a + b + c, rel=1e-10)


def test_lyapunov_zero_data(rng):
    n = 7
    shards = [PartyShard(0, np.zeros((n, 3)))]
    labels = random_labels(rng, n)
    hyper = HyperParams(rho=1.0, lam=0.5)
    s0 = engine.init_state(shards)
    # with y = 0 only the loss gradient at 0 remains: N * (1/2)^2
    assert engine.lyapunov(s0, shards, labels, hyper) == pytest.approx(n / 4, rel=1e-15)
    # the stationary point of the zero-data problem has y = grad l(0)
    y = obj.loss_grad(np.zeros(n), labels)
    fixed = EngineState(s0.x, s0.shares, s0.released, s0.z, y, 0)
    assert engine.lyapunov(fixed, shards, labels, hyper) == 0.0
    assert all(v == 0.0 for v in engine.stationarity_residuals(fixed, shards, labels, hyper).values())
    # and the iteration finds it
    res = engine.run(shards, labels, HyperParams(rho=1.0, lam=0.5, max_epochs=60))
    assert all(v <= 1e-8 for v in engine.stationarity_residuals(res.state, shards, labels, hyper).values())


def test_lyapunov_at_fixed_point():
    data, hyper = _fixture()
    res = engine.run(data.shards, data.labels, replace(hyper, max_epochs=300))
    assert engine.lyapunov(res.state, data.shards, data.labels, hyper) <= 1e-8


# ------------------------------------------------------- stationarity

def test_stationarity_converged_fixture():
    data, hyper = _fixture()
    res = engine.run(data.shards, data.labels, hyper)
    r = engine.stationarity_residuals(res.state, data.shards, data.labels, hyper)
    assert set(r) == {"x_opt", "x_vi", "dual", "primal"}
    assert all(v <= 1e-4 for v in r.values()), r


def _one_d_stationary(d=1.7, lam=0.8, label=1.0):
    # solve lam x + d * l'(d x) = 0 for x
    def f(x):
        return lam * x - d * label / (1 + math.exp(label * d * x))
    x = brentq(f, -10, 10, xtol=1e-300, rtol=1e-15)
    z = d * x
    y = -label / (1 + math.exp(label * z))
    shard = PartyShard(0, np.array([[d]]))
    arr = np.array
    state = EngineState((arr([x]),), (arr([z]),), (arr([z]),), arr([z]), arr([y]), 1)
    return shard, state, arr([label]), HyperParams(rho=1.0, lam=lam)


def test_stationarity_one_dimensional():
    shard, state, labels, hyper = _one_d_stationary()
    r = engine.stationarity_residuals(state, [shard], labels, hyper)
    assert all(v <= 1e-10 for v in r.values()), r
    # the sampled variational check agrees on the same point
    r = engine.stationarity_residuals(state, [shard], labels, hyper, nonconvex_parties=[0])
    assert r["x_vi"] <= 1e-10
    # and flags a displaced one
    moved = EngineState((state.x[0] + 0.5,), state.shares, state.released, state.z, state.y, 1)
    assert engine.stationarity_residuals(moved, [shard], labels, hyper, nonconvex_parties=[0])["x_vi"] > 0.1
    assert engine.stationarity_residuals(moved, [shard], labels, hyper)["x_opt"] > 0.1


# ------------------------------------------------------------ assumptions

def test_assumption_check_examples():
    shards = [PartyShard(0, np.eye(3))]
    profile = obj.LossProfile(L)
    rep = engine.assumption_check(shards, HyperParams(rho=1.0, lam=0.0), profile)
    assert rep.gamma_m == (1.0,) and not rep.checks["gamma_m_ge_2sigma_max"] and not rep.passed
    assert "FAIL" in rep.summary()
    rep = engine.assumption_check(shards, HyperParams(rho=1e-3, lam=2.0), profile)
    assert rep.checks["gamma_m_ge_2sigma_max"]
    rep = engine.assumption_check(shards, HyperParams(rho=3.0, lam=0.0), profile)
    assert rep.passed and rep.checks["full_rank"]


def test_recommend_rho_identity_gram():
    shards = [PartyShard(0, np.eye(3))]
    rho = engine.recommend_rho(shards, obj.LossProfile(L), 0.0)
    assert rho == pytest.approx(0.25 * 1.1 ** 22 * 1.05, rel=1e-12)
    assert rho == pytest.approx(2.1375, abs=1e-3)


def test_recommend_rho_lambda_dominant():
    shards = [PartyShard(0, np.eye(3))]
    rho = engine.recommend_rho(shards, obj.LossProfile(L), 10.0)
    # rho^2 > 2 L^2 is the only binding check: 0.25 * 1.1^k > 0.3536 first at k = 4
    assert rho == pytest.approx(0.25 * 1.1 ** 4 * 1.05, rel=1e-12)


def test_recommend_rho_rank_deficient(rng):
    shards = random_shards(rng, 10, [3], full_rank=False)
    with pytest.raises(ValueError, match="increase lambda"):
        engine.recommend_rho(shards, obj.LossProfile(L), 0.0)


@settings(max_examples=30)
@given(seed=st.integers(0, 10_000), lam=st.floats(0.0, 5.0), lip=st.floats(0.01, 2.0))
def test_recommended_rho_passes(seed, lam, lip):
    rng = np.random.default_rng(seed)
    shards = random_shards(rng, 12, [int(rng.integers(1, 5)) for _ in range(int(rng.integers(1, 4)))])
    rho = engine.recommend_rho(shards, obj.LossProfile(lip), lam)
    assert engine.assumption_check(shards, HyperParams(rho=rho, lam=lam), obj.LossProfile(lip)).passed


# ---------------------------------------------------------- run properties

@settings(max_examples=15)
@given(seed=st.integers(0, 10_000), lam=st.floats(0.5, 3.0))
def test_lower_bound_and_dual_bound(seed, lam):
    rng = np.random.default_rng(seed)
    shards = random_shards(rng, 20, [2, 3])
    labels = random_labels(rng, 20)
    lam = lam * max(s.sigma_max for s in shards) * 2
    rho = engine.recommend_rho(shards, obj.LossProfile(L), lam)
    res = engine.run(shards, labels, HyperParams(rho=rho, lam=lam, max_epochs=40))
    assert res.assumption.passed
    for rec in res.trace:
        assert rec.lagrangian >= -1e-8
        assert rec.lyapunov >= 0 and rec.primal_residual >= 0
        if rec.epoch >= 2:
            assert rec.dy_sq <= L * L * rec.dz_sq + 1e-10
    lag = [r.lagrangian for r in res.trace]
    assert all(b <= a + 1e-8 for a, b in zip(lag, lag[1:]))


def test_primal_residual_on_fixture():
    data, hyper = _fixture()
    res = engine.run(data.shards, data.labels, hyper)
    assert res.trace[-1].primal_residual < 1e-3


def test_iteration_count_trend():
    data, hyper = _fixture()
    res = engine.run(data.shards, data.labels, replace(hyper, max_epochs=400))
    V = [r.lyapunov for r in res.trace]
    counts = {}
    for eps in (1e-1, 1e-2, 1e-3, 1e-4):
        counts[eps] = next(r.epoch for r, v in zip(res.trace, V) if v <= eps)
    products = [t * eps for eps, t in counts.items()]
    assert max(products) <= counts[1e-1] * 1e-1
    assert list(counts.values()) == sorted(counts.values())
