"""Exact solvers for the three per-iteration ADMM sharing subproblems."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import kernels
from .dataset import PartyShard

CHOLESKY_MAX_DIM = 4096
CG_TOL = 1e-10
BALL_TOL = 1e-8
Z_TOL = 1e-10
Z_MAX_ITER = 100


class SubproblemError(RuntimeError):
    pass


class AssumptionViolation(SubproblemError):
    pass


@dataclass(frozen=True)
class XStepInput:
    """Data for one party's x-update.

    ``others_minus_z`` is ``c = sum_{k != m} D_k x_k - z``.
    """

    shard: PartyShard
    x_prev: np.ndarray
    others_minus_z: np.ndarray
    dual: np.ndarray
    rho: float
    lam: float
    ball_radius: float | None = None

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be > 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        n = self.shard.n_samples
        if self.others_minus_z.shape != (n,) or self.dual.shape != (n,):
            raise ValueError(f"aggregate/dual vectors must have length N={n}")
        if self.ball_radius is not None and not self.ball_radius > 0:
            raise ValueError("ball radius must be > 0")


@dataclass(frozen=True)
class ZStepInput:
    aggregate: np.ndarray
    dual: np.ndarray
    rho: float
    labels: np.ndarray
    loss_scale: float = 1.0

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be > 0")


def x_step_rhs(inp: XStepInput) -> np.ndarray:
    D = inp.shard.block
    return -(D.T @ (inp.dual + inp.rho * inp.others_minus_z))


def x_step(inp: XStepInput, force_cg: bool = False) -> np.ndarray:
    """Minimise ``lam/2 ||x||^2 + <y, D x> + rho/2 ||c + D x||^2`` (optionally over ``||x|| <= b1``)."""
    shard = inp.shard
    rhs = x_step_rhs(inp)
    if inp.lam == 0.0:
        lo, hi = shard.extremes
        if lo <= 1e-12 * max(hi, 1.0):
            raise AssumptionViolation(
                f"party {shard.party_id}: lambda=0 and the shard is rank deficient "
                f"(sigma_min={lo:.3g}); the full-column-rank assumption fails, use lambda > 0"
            )
    if shard.width <= CHOLESKY_MAX_DIM and not force_cg:
        x = scipy.linalg.cho_solve(_cholesky(shard, inp.lam, inp.rho), rhs)
    else:
        x = _cg(shard, inp.lam, inp.rho, rhs, inp.x_prev)

    if inp.ball_radius is not None and np.linalg.norm(x) > inp.ball_radius:
        x = _ball_solve(shard, inp.lam, inp.rho, rhs, inp.ball_radius)
    return x


def _cholesky(shard: PartyShard, lam: float, rho: float):
    key = ("chol", lam, rho)
    factor = shard._cache.get(key)
    if factor is None:
        A = rho * shard.gram + lam * np.eye(shard.width)
        try:
            factor = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise AssumptionViolation(
                f"party {shard.party_id}: lam*I + rho*G is not positive definite "
                "(the full-column-rank assumption needs lambda > 0 here)"
            ) from exc
        shard._cache[key] = factor
    return factor


def _cg(shard, lam, rho, rhs, x0, max_iter=None):
    D = shard.block

    def apply(v):
        return lam * v + rho * (D.T @ (D @ v))

    x = np.array(x0, dtype=np.float64, copy=True)
    r = rhs - apply(x)
    p = r.copy()
    rr = r @ r
    target = CG_TOL * max(1.0, np.linalg.norm(rhs))
    for _ in range(max_iter or 10 * shard.width + 100):
        if np.sqrt(rr) <= target:
            return x
        Ap = apply(p)
        alpha = rr / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    if np.sqrt(rr) <= target:
        return x
    raise SubproblemError(
        f"party {shard.party_id}: conjugate gradients stalled at residual {np.sqrt(rr):.3e}"
    )


def _ball_solve(shard, lam, rho, rhs, radius):
    """Solve ``((lam + nu) I + rho G) x = rhs`` with ``nu >= 0`` chosen so ``||x|| = radius``."""
    key = "eigh"
    eig = shard._cache.get(key)
    if eig is None:
        eig = np.linalg.eigh(shard.gram)
        shard._cache[key] = eig
    evals, Q = eig
    coef = Q.T @ rhs
    base = lam + rho * np.clip(evals, 0.0, None)

    def solve(nu):
        return Q @ (coef / (base + nu))

    lo, hi = 0.0, max(np.linalg.norm(rhs) / radius, 1e-300)
    x_hi = solve(hi)
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        x_mid = solve(mid)
        nrm = np.linalg.norm(x_mid)
        if nrm > radius:
            lo = mid
        else:
            hi, x_hi = mid, x_mid
            if radius - nrm <= BALL_TOL:
                break
        if hi - lo <= 1e-15 * hi:
            break
    return x_hi


def z_step(inp: ZStepInput, tol: float = Z_TOL, max_iter: int = Z_MAX_ITER) -> np.ndarray:
    """Entry-wise ``argmin_z l_i(z_i) - y_i z_i + rho/2 (w_i - z_i)^2``.

    ``loss_scale = 0`` switches the loss off, giving ``w + y / rho`` exactly.
    """
    w = np.ascontiguousarray(inp.aggregate, dtype=np.float64)
    y = np.ascontiguousarray(inp.dual, dtype=np.float64)
    labels = np.ascontiguousarray(inp.labels, dtype=np.float64)
    if not (w.shape == y.shape == labels.shape):
        raise ValueError("aggregate, dual and labels must have equal length")
    z = kernels.zstep(w, y, labels, float(inp.rho), float(inp.loss_scale), float(tol), int(max_iter))
    if not np.all(np.isfinite(z)):
        raise SubproblemError("z-update produced non-finite values (bracket failure)")
    return z


def z_step_derivative(z, inp: ZStepInput) -> np.ndarray:
    g = kernels.logistic_grad(np.ascontiguousarray(z, dtype=np.float64),
                              np.ascontiguousarray(inp.labels, dtype=np.float64),
                              float(inp.loss_scale))
    return g - inp.dual + inp.rho * (z - inp.aggregate)


def y_step(y, rho: float, aggregate_w, z) -> np.ndarray:
    y, w, z = (np.asarray(a, dtype=np.float64) for a in (y, aggregate_w, z))
    if not (y.shape == w.shape == z.shape):
        raise ValueError("y, aggregate and z must have equal length")
    return y + rho * (w - z)
