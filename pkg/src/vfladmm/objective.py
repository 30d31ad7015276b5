"""l2-regularised logistic regression pieces: loss, regulariser, prox, and the full objective.

The loss acts on the score vector ``z = sum_m D_m x_m`` with labels absorbed:
``l(z) = loss_scale * sum_i log(1 + exp(-Y_i z_i))``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels

LOGISTIC_CURVATURE_MAX = 0.25


@dataclass(frozen=True)
class ObjectiveConfig:
    lam: float = 0.0
    loss_scale: float = 1.0

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not self.loss_scale > 0:
            raise ValueError(f"loss_scale must be > 0, got {self.loss_scale}")


@dataclass(frozen=True)
class LossProfile:
    lipschitz: float
    convex: bool = True

    def __post_init__(self):
        if not self.lipschitz > 0:
            raise ValueError("lipschitz constant must be positive")


def _check(z, labels):
    z = np.ascontiguousarray(z, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.float64)
    if z.shape != labels.shape:
        raise ValueError(f"score length {z.shape} does not match label length {labels.shape}")
    return z, labels


def loss_value(z, labels, loss_scale: float = 1.0) -> float:
    z, labels = _check(z, labels)
    return kernels.logistic_loss(z, labels, float(loss_scale))


def loss_grad(z, labels, loss_scale: float = 1.0) -> np.ndarray:
    z, labels = _check(z, labels)
    return kernels.logistic_grad(z, labels, float(loss_scale))


def loss_curvature(z, labels, loss_scale: float = 1.0) -> np.ndarray:
    """Diagonal of the loss Hessian."""
    z, labels = _check(z, labels)
    return kernels.logistic_curv(z, labels, float(loss_scale))


def loss_lipschitz(config: ObjectiveConfig, n_samples: int | None = None) -> float:
    # separable loss: the Hessian is diagonal with entries <= scale * max sigma'
    return config.loss_scale * LOGISTIC_CURVATURE_MAX


def loss_profile(config: ObjectiveConfig) -> LossProfile:
    return LossProfile(loss_lipschitz(config), convex=True)


# R_m(x) = 0.5 ||x||^2

def reg_value(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * float(x @ x)


def reg_grad(x) -> np.ndarray:
    return np.array(x, dtype=np.float64)


def reg_curvature(x=None) -> float:
    return 1.0


def prox_reg(v, w: float) -> np.ndarray:
    """``argmin_x w * 0.5||x||^2 + 0.5||x - v||^2``."""
    if w < 0:
        raise ValueError("prox weight must be >= 0")
    return np.asarray(v, dtype=np.float64) / (1.0 + w)


def full_objective(shards: Sequence, xs: Sequence, labels, config: ObjectiveConfig) -> float:
    if len(shards) != len(xs):
        raise ValueError(f"{len(shards)} shards but {len(xs)} parameter blocks")
    n = len(labels)
    scores = np.zeros(n)
    reg = 0.0
    for shard, x in zip(shards, xs):
        x = np.asarray(x, dtype=np.float64)
        if shard.block.shape != (n, x.shape[0]):
            raise ValueError(
                f"party {shard.party_id}: block {shard.block.shape} vs x {x.shape}, N={n}"
            )
        scores = scores + shard.block @ x
        reg += reg_value(x)
    return loss_value(scores, labels, config.loss_scale) + config.lam * reg
