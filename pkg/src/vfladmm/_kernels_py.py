"""Pure-NumPy implementations of the hot kernels.

Used when the compiled extension is unavailable or ``VFLADMM_PURE_PYTHON=1``.
Semantics match ``_kernels.pyx`` exactly; results agree to rounding.
"""
import numpy as np

SOFTPLUS_CUTOFF = 30.0


def _softplus(t):
    out = np.empty_like(t)
    big = t >= SOFTPLUS_CUTOFF
    out[big] = t[big]
    out[~big] = np.log1p(np.exp(t[~big]))
    return out


def _sigmoid(t):
    # 1 / (1 + exp(-t)) without overflow for large |t|
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def logistic_loss(z, labels, scale):
    t = -labels * z
    return scale * float(np.sum(_softplus(t)))


def logistic_grad(z, labels, scale):
    t = -labels * z
    return scale * (-labels * _sigmoid(t))


def logistic_curv(z, labels, scale):
    s = _sigmoid(-labels * z)
    return scale * s * (1.0 - s)


def zstep(w, y, labels, rho, scale, tol, max_iter):
    """Entry-wise minimiser of scale*softplus(-Y z) - y z + rho/2 (w - z)^2.

    Safeguarded Newton on the derivative with a bisection fallback inside the
    bracket ``[w + (y - scale)/rho, w + (y + scale)/rho]``, which always holds
    the root because the logistic gradient lies in (-scale, scale).
    """
    z = w + y / rho
    if scale == 0.0:
        return z
    lo = w + (y - scale) / rho
    hi = w + (y + scale) / rho
    active = np.ones(z.shape, dtype=bool)
    for _ in range(max_iter):
        zi = z[active]
        yl = labels[active]
        s = _sigmoid(-yl * zi)
        d = scale * (-yl * s) - y[active] + rho * (zi - w[active])
        done = np.abs(d) <= tol
        lo_a, hi_a = lo[active], hi[active]
        # d is increasing in z: shrink the bracket around the root
        lo_a = np.where(d < 0, zi, lo_a)
        hi_a = np.where(d > 0, zi, hi_a)
        h = scale * s * (1.0 - s) + rho
        newton = zi - d / h
        bad = (newton <= lo_a) | (newton >= hi_a)
        nxt = np.where(bad, 0.5 * (lo_a + hi_a), newton)
        nxt = np.where(done, zi, nxt)
        idx = np.flatnonzero(active)
        z[idx] = nxt
        lo[idx] = lo_a
        hi[idx] = hi_a
        # bracket collapsed to adjacent doubles: nothing left to refine
        stuck = (hi_a - lo_a) <= 4.0 * np.finfo(float).eps * np.maximum(1.0, np.abs(nxt))
        active[idx[done | stuck]] = False
        if not active.any():
            break
    return z
