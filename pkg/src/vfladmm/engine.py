"""Parallel (Jacobi) ADMM sharing iteration and its diagnostics.

Diagnostics are assembled from two kinds of pieces so that a distributed run
can rebuild exactly the same numbers: :class:`CoordinatorTerms` need only the
released shares, ``z`` and ``y``; :class:`PartyTerms` need a party's own
``x_m`` and block and are computed where that data lives.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import objective as obj
from .dataset import PartyShard
from .subsolvers import SubproblemError, XStepInput, ZStepInput, x_step, y_step, z_step

log = logging.getLogger(__name__)

DESCENT_SLACK = 1e-8
DUAL_GAP_TOL = 1e-8
RANK_TOL = 1e-12
RHO_GRID_RATIO = 1.1
RHO_SAFETY = 1.05


class EngineError(RuntimeError):
    """A subsolver failed mid-run; ``trace`` holds the records produced so far."""

    def __init__(self, msg, trace=(), party_id=None):
        super().__init__(msg)
        self.trace = list(trace)
        self.party_id = party_id


@dataclass(frozen=True)
class HyperParams:
    rho: float
    lam: float = 0.0
    max_epochs: int = 50
    lyapunov_tol: float = 1e-4
    seed: int = 0
    loss_scale: float = 1.0
    ball_radius: float | None = None
    early_stop: bool = False

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError(f"rho must be > 0, got {self.rho}")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if not self.lyapunov_tol > 0:
            raise ValueError("lyapunov_tol must be > 0")
        obj.ObjectiveConfig(self.lam, self.loss_scale)

    @property
    def objective(self) -> obj.ObjectiveConfig:
        return obj.ObjectiveConfig(self.lam, self.loss_scale)


@dataclass(frozen=True)
class EngineState:
    x: tuple[np.ndarray, ...]
    shares: tuple[np.ndarray, ...]
    released: tuple[np.ndarray, ...]
    z: np.ndarray
    y: np.ndarray
    t: int = 0

    @property
    def n_parties(self) -> int:
        return len(self.x)


@dataclass(frozen=True)
class DiagnosticsRecord:
    epoch: int
    lagrangian: float
    primal_residual: float
    lyapunov: float
    objective: float
    stationarity: float
    dual_gap: float = 0.0
    dy_sq: float = 0.0
    dz_sq: float = 0.0


@dataclass(frozen=True)
class CoordinatorTerms:
    loss_z: float
    loss_total: float
    inner: float
    residual_sq: float
    z_grad_sq: float
    dual_residual: float
    dual_gap: float


@dataclass(frozen=True)
class PartyTerms:
    reg: float
    grad_map_sq: float
    stationarity: float


@dataclass
class RunResult:
    trace: list[DiagnosticsRecord]
    state: EngineState
    assumption: "AssumptionReport | None" = None
    stopped_early: bool = False


# ------------------------------------------------------------ iteration

def reduce_shares(shares: Sequence[np.ndarray]) -> np.ndarray:
    """Sum in ascending party order; the fixed order makes the result bitwise reproducible."""
    acc = np.array(shares[0], dtype=np.float64, copy=True)
    for s in shares[1:]:
        acc = acc + s
    return acc


def init_state(shards: Sequence[PartyShard]) -> EngineState:
    n = shards[0].n_samples
    zeros = tuple(np.zeros(n) for _ in shards)
    return EngineState(
        x=tuple(np.zeros(s.width) for s in shards),
        shares=zeros,
        released=tuple(z.copy() for z in zeros),
        z=np.zeros(n),
        y=np.zeros(n),
        t=0,
    )


def party_update(shard: PartyShard, x_prev, cached_share, aggregate, y, hyper: HyperParams):
    """One party's x-update from the broadcast aggregate ``a = sum_k s_k - z``.

    ``cached_share`` is the share this party released last round; subtracting
    it from the aggregate gives ``sum_{k != m} s_k - z``.
    """
    c = aggregate - cached_share
    x = x_step(XStepInput(shard, x_prev, c, y, hyper.rho, hyper.lam, hyper.ball_radius))
    return x, shard.block @ x


def coordinator_update(released: Sequence[np.ndarray], y, labels, hyper: HyperParams):
    total = reduce_shares(released)
    z = z_step(ZStepInput(total, y, hyper.rho, labels, hyper.loss_scale))
    y_new = y_step(y, hyper.rho, total, z)
    return total, z, y_new


def iterate(state: EngineState, shards: Sequence[PartyShard], labels, hyper: HyperParams,
            perturber=None, order: Sequence[int] | None = None) -> EngineState:
    """Advance one Jacobi round.

    Every party reads only iteration-``t`` data, so ``order`` (the sequence in
    which parties are visited) cannot change the result.
    """
    M = len(shards)
    aggregate = reduce_shares(state.released) - state.z
    xs, shares, released = [None] * M, [None] * M, [None] * M
    for m in (range(M) if order is None else order):
        try:
            x, s = party_update(shards[m], state.x[m], state.released[m], aggregate, state.y, hyper)
        except SubproblemError as exc:
            raise SubproblemError(f"party {m}: {exc}") from exc
        xs[m], shares[m] = x, s
        released[m] = s if perturber is None else perturber.perturb(m, s)
    _, z, y = coordinator_update(released, state.y, labels, hyper)
    return EngineState(tuple(xs), tuple(shares), tuple(released), z, y, state.t + 1)


# ---------------------------------------------------------- diagnostics

def coordinator_terms(total, z, y, labels, hyper: HyperParams) -> CoordinatorTerms:
    a = total - z
    grad = obj.loss_grad(z, labels, hyper.loss_scale)
    gz = grad - y - hyper.rho * a
    dual = grad - y
    return CoordinatorTerms(
        loss_z=obj.loss_value(z, labels, hyper.loss_scale),
        loss_total=obj.loss_value(total, labels, hyper.loss_scale),
        inner=float(y @ a),
        residual_sq=float(a @ a),
        z_grad_sq=float(gz @ gz),
        dual_residual=float(np.linalg.norm(dual)),
        dual_gap=float(np.max(np.abs(dual))) if dual.size else 0.0,
    )


def party_terms(shard: PartyShard, x, aggregate, y, hyper: HyperParams, convex: bool = True) -> PartyTerms:
    """Party-local pieces: regulariser value, Lyapunov x-term, stationarity of the x-condition."""
    D = shard.block
    coupling = D.T @ (y + hyper.rho * aggregate)
    if convex:
        gmap = x - obj.prox_reg(x - coupling, hyper.lam)
    else:
        gmap = hyper.lam * obj.reg_grad(x) + coupling
    g8 = x - obj.prox_reg(x - D.T @ y, hyper.lam)
    return PartyTerms(obj.reg_value(x), float(gmap @ gmap), float(np.linalg.norm(g8)))


def combine_terms(epoch: int, coord: CoordinatorTerms, parties: Sequence[PartyTerms],
                  hyper: HyperParams, dy_sq: float = 0.0, dz_sq: float = 0.0) -> DiagnosticsRecord:
    reg = 0.0
    gmap = 0.0
    stat8 = 0.0
    for p in parties:
        reg += p.reg
        gmap += p.grad_map_sq
        stat8 = max(stat8, p.stationarity)
    res = math.sqrt(coord.residual_sq)
    return DiagnosticsRecord(
        epoch=epoch,
        lagrangian=coord.loss_z + hyper.lam * reg + coord.inner + 0.5 * hyper.rho * coord.residual_sq,
        primal_residual=res,
        lyapunov=gmap + coord.z_grad_sq + coord.residual_sq,
        objective=coord.loss_total + hyper.lam * reg,
        stationarity=max(stat8, coord.dual_residual, res),
        dual_gap=coord.dual_gap,
        dy_sq=dy_sq,
        dz_sq=dz_sq,
    )


def diagnose(state: EngineState, shards, labels, hyper: HyperParams, prev: EngineState | None = None,
             convex: bool = True) -> DiagnosticsRecord:
    total = reduce_shares(state.released)
    a = total - state.z
    coord = coordinator_terms(total, state.z, state.y, labels, hyper)
    parties = [party_terms(sh, x, a, state.y, hyper, convex) for sh, x in zip(shards, state.x)]
    dy_sq = dz_sq = 0.0
    if prev is not None:
        dy, dz = state.y - prev.y, state.z - prev.z
        dy_sq, dz_sq = float(dy @ dy), float(dz @ dz)
    return combine_terms(state.t, coord, parties, hyper, dy_sq, dz_sq)


def augmented_lagrangian(state: EngineState, shards, labels, hyper: HyperParams) -> float:
    return diagnose(state, shards, labels, hyper).lagrangian


def lyapunov(state: EngineState, shards, labels, hyper: HyperParams, convex: bool = True) -> float:
    return diagnose(state, shards, labels, hyper, convex=convex).lyapunov


def stationarity_residuals(state: EngineState, shards, labels, hyper: HyperParams,
                           nonconvex_parties: Sequence[int] = (), samples: int = 64) -> dict:
    """Residuals of the four stationarity conditions at ``state``.

    ``x_opt`` (convex parties) is the prox gradient map norm of
    ``lam R_m + <y, D_m .>``; ``x_vi`` (smooth nonconvex parties) is the worst
    normalised violation of ``<x - x*, lam grad R(x*) + D^T y> >= 0`` over
    sampled feasible points.
    """
    total = reduce_shares(state.released)
    grad = obj.loss_grad(state.z, labels, hyper.loss_scale)
    x_opt = 0.0
    x_vi = 0.0
    rng = np.random.default_rng(hyper.seed)
    for m, (sh, x) in enumerate(zip(shards, state.x)):
        if m in nonconvex_parties:
            g = hyper.lam * obj.reg_grad(x) + sh.block.T @ state.y
            x_vi = max(x_vi, _vi_violation(x, g, hyper.ball_radius, rng, samples))
        else:
            x_opt = max(x_opt, float(np.linalg.norm(x - obj.prox_reg(x - sh.block.T @ state.y, hyper.lam))))
    return {
        "x_opt": x_opt,
        "x_vi": x_vi,
        "dual": float(np.linalg.norm(grad - state.y)),
        "primal": float(np.linalg.norm(total - state.z)),
    }


def _vi_violation(x, g, radius, rng, samples):
    dirs = rng.standard_normal((samples, x.shape[0]))
    if np.linalg.norm(g) > 0:
        dirs = np.vstack([dirs, -g])
    worst = 0.0
    for d in dirs:
        nd = np.linalg.norm(d)
        if nd == 0:
            continue
        cand = x + d / nd
        if radius is not None and np.linalg.norm(cand) > radius:
            cand = cand * (radius / np.linalg.norm(cand))
        step = cand - x
        ns = np.linalg.norm(step)
        if ns > 0:
            worst = max(worst, -float(step @ g) / ns)
    return worst


# ---------------------------------------------------- assumption checks

@dataclass(frozen=True)
class AssumptionReport:
    rho: float
    lam: float
    lipschitz: float
    gamma_m: tuple[float, ...]
    gamma: float
    sigma_min: tuple[float, ...]
    sigma_max: tuple[float, ...]
    checks: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        c = self.checks
        rank_ok = c["full_rank"] or self.lam > 0
        return c["gamma_m_ge_2sigma_max"] and c["rho_gamma_gt_2L2"] and c["rho_ge_L"] and rank_ok

    def summary(self) -> str:
        items = ", ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in self.checks.items())
        return f"rho={self.rho:.6g}: {items} -> {'pass' if self.passed else 'fail'}"


def _extremes(shards):
    lo, hi = zip(*(sh.extremes for sh in shards))
    return lo, hi


def assumption_check(shards, hyper: HyperParams, profile: obj.LossProfile) -> AssumptionReport:
    return _check_rho(hyper.rho, hyper.lam, shards, profile, *_extremes(shards))


def _check_rho(rho, lam, shards, profile, lo, hi) -> AssumptionReport:
    L = profile.lipschitz
    gamma_m = tuple(lam + rho * s for s in lo)
    gamma = rho  # z-subproblem: convex loss plus rho/2 ||.||^2
    checks = {
        "gamma_m_ge_2sigma_max": all(g >= 2 * h for g, h in zip(gamma_m, hi)),
        "rho_gamma_gt_2L2": rho * gamma > 2 * L * L,
        "rho_ge_L": rho >= L,
        "full_rank": all(s > RANK_TOL * max(h, 1.0) for s, h in zip(lo, hi)),
        # informational: Jacobi descent with the rho/2 penalty factor kept
        "gamma_m_ge_rho_sigma_max": all(g >= rho * h for g, h in zip(gamma_m, hi)),
    }
    return AssumptionReport(rho, lam, L, gamma_m, gamma, tuple(lo), tuple(hi), checks)


def recommend_rho(shards, profile: obj.LossProfile, lam: float, max_steps: int = 5000) -> float:
    """Smallest rho on a 1.1-geometric grid from max(L, 1e-6) passing every check, times 1.05."""
    lo, hi = _extremes(shards)
    for m, (s, h) in enumerate(zip(lo, hi)):
        if s <= RANK_TOL * max(h, 1.0) and lam < 2 * h:
            raise ValueError(
                f"no feasible rho: party {m} is rank deficient and lambda={lam:.4g} < 2*sigma_max="
                f"{2 * h:.4g}; increase lambda (>= {2 * h:.4g}) or drop dependent columns"
            )
    rho = max(profile.lipschitz, 1e-6)
    for _ in range(max_steps):
        if _check_rho(rho, lam, shards, profile, lo, hi).passed:
            return rho * RHO_SAFETY
        rho *= RHO_GRID_RATIO
    raise ValueError("rho grid exhausted without satisfying the assumptions")


# ------------------------------------------------------------------ run

def run(shards: Sequence[PartyShard], labels, hyper: HyperParams, privacy=None,
        callbacks: Sequence[Callable] = (), perturber=None, sigma_multiplier: float = 1.0,
        check_invariants: bool = True) -> RunResult:
    """Run up to ``hyper.max_epochs`` rounds; one record per epoch.

    ``privacy`` (a :class:`~vfladmm.privacy.PrivacyParams`) switches on share
    perturbation and the l2-ball constraint of radius ``b1``; ``perturber``
    may be given directly instead.  Callbacks get ``(record, state)``.
    """
    labels = np.ascontiguousarray(labels, dtype=np.float64)
    if privacy is not None and perturber is None:
        from .privacy import Perturber
        if hyper.ball_radius is None:
            hyper = replace(hyper, ball_radius=privacy.b1)
        perturber = Perturber.calibrated(shards, hyper, privacy, multiplier=sigma_multiplier)

    profile = obj.loss_profile(hyper.objective)
    report = None
    try:
        report = assumption_check(shards, hyper, profile)
        if not report.passed:
            log.warning("assumption check failed (run continues): %s", report.summary())
    except Exception as exc:  # spectrum estimation trouble is not fatal
        log.warning("assumption check unavailable: %s", exc)

    state = init_state(shards)
    trace: list[DiagnosticsRecord] = []
    watch_descent = check_invariants and perturber is None and report is not None and report.passed
    radius = hyper.ball_radius
    stopped = False
    for _ in range(hyper.max_epochs):
        prev = state
        try:
            state = iterate(state, shards, labels, hyper, perturber)
        except SubproblemError as exc:
            raise EngineError(str(exc), trace) from exc
        rec = diagnose(state, shards, labels, hyper, prev)
        if check_invariants:
            _check_record(rec, trace, watch_descent, profile.lipschitz)
        if radius is not None and max(np.linalg.norm(state.z), np.linalg.norm(state.y)) > radius:
            # x is confined to the ball; z and y are only reported, once per run
            log.info("epoch %d: ||z||=%.3g, ||y||=%.3g exceed the ball radius %.3g used by the "
                     "sensitivity bound", rec.epoch, np.linalg.norm(state.z), np.linalg.norm(state.y), radius)
            radius = None
        trace.append(rec)
        for cb in callbacks:
            cb(rec, state)
        if hyper.early_stop and rec.lyapunov <= hyper.lyapunov_tol:
            stopped = True
            break
    return RunResult(trace, state, report, stopped)


def _check_record(rec, trace, watch_descent, L):
    if rec.dual_gap > DUAL_GAP_TOL:
        log.warning("epoch %d: dual identity gap %.3e", rec.epoch, rec.dual_gap)
    # y^0 = 0 need not equal grad l(z^0), so the bound starts at epoch 2
    if rec.epoch >= 2 and rec.dy_sq > L * L * rec.dz_sq + 1e-10:
        log.warning("epoch %d: ||dy||^2=%.3e exceeds L^2||dz||^2=%.3e", rec.epoch, rec.dy_sq, L * L * rec.dz_sq)
    if watch_descent and trace and rec.lagrangian > trace[-1].lagrangian + DESCENT_SLACK:
        log.warning("epoch %d: augmented Lagrangian rose by %.3e", rec.epoch,
                    rec.lagrangian - trace[-1].lagrangian)
