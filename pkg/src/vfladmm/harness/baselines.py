"""Reference models trained on one machine: all features, or one party's block."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import objective as obj
from ..dataset import LabeledDataset, PartitionSpec

ARMIJO = 1e-4
MAX_HALVINGS = 60
ROUNDOFF = 1e-12


class BaselineError(RuntimeError):
    pass


@dataclass(frozen=True)
class BaselineResult:
    weights: np.ndarray
    train_objective: float
    test_log_loss: float
    test_accuracy: float
    grad_norm: float
    iterations: int
    converged: bool


def _objective(X, y, w, lam, scale):
    s = X @ w
    return (obj.loss_value(s, y, scale) + lam * obj.reg_value(w),
            X.T @ obj.loss_grad(s, y, scale) + lam * w, s)


def fit_logistic(X, y, lam: float, loss_scale: float = 1.0, tol: float = 1e-6, max_steps: int = 100_000,
                 step_size: float | None = None, method: str = "newton") -> tuple[np.ndarray, float, float, int, bool]:
    """Minimise ``loss_scale * sum log(1 + exp(-y Xw)) + lam/2 ||w||^2``.

    ``method="gd"`` is gradient descent with Armijo backtracking starting
    from ``step_size`` (default ``1/L`` for the smooth part);
    ``method="newton"`` damps full Newton steps the same way.  Both stop once
    the gradient norm drops to ``tol``.

    Returns
    -------
    w, objective, grad_norm, iterations, converged
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    n, d = X.shape
    if d == 0:
        raise ValueError("empty feature block")
    if method not in ("gd", "newton"):
        raise ValueError(f"unknown method {method!r}")
    if method == "gd" and step_size is None:
        smax = np.linalg.norm(X, 2) ** 2 if n and d else 0.0
        step_size = 1.0 / (loss_scale * obj.LOGISTIC_CURVATURE_MAX * smax + lam + 1e-12)
    w = np.zeros(d)
    f, g, s = _objective(X, y, w, lam, loss_scale)
    for k in range(max_steps):
        gn = float(np.linalg.norm(g))
        if gn <= tol:
            return w, f, gn, k, True
        if method == "newton":
            curv = obj.loss_curvature(s, y, loss_scale)
            H = (X.T * curv) @ X
            H[np.diag_indices_from(H)] += lam
            try:
                p = -np.linalg.solve(H, g)
            except np.linalg.LinAlgError:
                p = -g
            if not float(p @ g) < 0:
                p = -g
            alpha = 1.0
        else:
            p = -g
            alpha = step_size
        slope = float(p @ g)
        for _ in range(MAX_HALVINGS):
            w_new = w + alpha * p
            f_new, g_new, s_new = _objective(X, y, w_new, lam, loss_scale)
            if f_new <= f + ARMIJO * alpha * slope:
                break
            # near the optimum f is flat to round-off; accept if the gradient shrinks
            if f_new - f <= ROUNDOFF * max(1.0, abs(f)) and np.linalg.norm(g_new) < gn:
                break
            alpha *= 0.5
        else:
            if f_new - f > ROUNDOFF * max(1.0, abs(f)):
                raise BaselineError(
                    f"line search failed at step {k}: objective would rise from {f:.12g} to {f_new:.12g}")
            # stalled at round-off level: no further progress possible
            return w, f, gn, k, False
        w, f, g, s = w_new, f_new, g_new, s_new
    return w, f, float(np.linalg.norm(g)), max_steps, float(np.linalg.norm(g)) <= tol


def evaluate_scores(scores, labels) -> tuple[float, float]:
    """Mean log loss and accuracy of ``sign(scores)``, ties counted as +1."""
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.float64)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.shape[0]} scores for {labels.shape[0]} labels")
    n = labels.shape[0]
    if n == 0:
        raise ValueError("empty test set")
    pred = np.where(scores >= 0, 1.0, -1.0)
    return obj.loss_value(scores, labels) / n, float(np.mean(pred == labels))


def evaluate(model, test: LabeledDataset) -> tuple[float, float]:
    """Test log loss and accuracy of a full weight vector or of per-party blocks.

    Party blocks are taken to cover consecutive columns in party order; the
    score is the sum of the per-party scores in that order.
    """
    if isinstance(model, np.ndarray) and model.ndim == 1:
        blocks = [model]
    else:
        blocks = [np.asarray(b, dtype=np.float64).reshape(-1) for b in model]
    widths = [b.shape[0] for b in blocks]
    if sum(widths) != test.n_features:
        raise ValueError(f"model covers {sum(widths)} features, test set has {test.n_features}")
    X = test.features
    scores = None
    lo = 0
    for b, w in zip(blocks, widths):
        part = X[:, lo:lo + w] @ b
        scores = part if scores is None else scores + part
        lo += w
    return evaluate_scores(np.asarray(scores).reshape(-1), test.labels)


def _columns(test: LabeledDataset, lo: int, hi: int) -> np.ndarray:
    return test.features[:, lo:hi].toarray()


def baseline_centralized(train: LabeledDataset, test: LabeledDataset, lam: float, steps: int = 100_000,
                         step_size: float | None = None, method: str = "newton", tol: float = 1e-6,
                         loss_scale: float = 1.0, columns: tuple[int, int] | None = None) -> BaselineResult:
    """Full-feature (or column-range) l2-regularised logistic regression."""
    lo, hi = columns if columns is not None else (0, train.n_features)
    if hi <= lo:
        raise ValueError(f"empty feature block [{lo}, {hi})")
    if test.n_features < hi:
        raise ValueError(f"test set has {test.n_features} features, need {hi}")
    X = _columns(train, lo, hi)
    w, f, gn, k, ok = fit_logistic(X, train.labels, lam, loss_scale, tol, steps, step_size, method)
    ll, acc = evaluate_scores(_columns(test, lo, hi) @ w, test.labels)
    return BaselineResult(w, f, ll, acc, gn, k, ok)


def baseline_local(train: LabeledDataset, test: LabeledDataset, lam: float,
                   partition: PartitionSpec | tuple[int, int], party: int = 0, **kw) -> BaselineResult:
    """Centralized baseline restricted to one party's columns (party 1, index 0, by default).

    ``partition`` is either a :class:`PartitionSpec` or an explicit
    ``(start, stop)`` column range.
    """
    if isinstance(partition, PartitionSpec):
        offs = partition.offsets()
        if not 0 <= party < partition.n_parties:
            raise ValueError(f"party {party} outside 0..{partition.n_parties - 1}")
        cols = (offs[party], offs[party + 1])
    else:
        cols = tuple(partition)
    return baseline_centralized(train, test, lam, columns=cols, **kw)
