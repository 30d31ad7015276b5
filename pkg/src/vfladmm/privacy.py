"""Gaussian share perturbation: sensitivity bound, noise calibration, accounting.

Noise is added in share space: each released ``D_m x_m`` receives i.i.d.
``N(0, sigma_m^2)`` entries, drawn from a per-party stream derived from the
master seed and the party id.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import PartyShard
from .subsolvers import XStepInput, x_step


@dataclass(frozen=True)
class PrivacyParams:
    epsilon: float
    delta: float
    delta_prime: float = 1e-4
    b1: float = 1.0
    c1: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.epsilon <= 1:
            raise ValueError(f"per-iteration epsilon must lie in (0, 1], got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if not 0 < self.delta_prime < 1:
            raise ValueError(f"delta_prime must lie in (0, 1), got {self.delta_prime}")
        if not (self.b1 > 0 and self.c1 > 0):
            raise ValueError("b1 and c1 must be positive")


@dataclass(frozen=True)
class NoiseCalibration:
    sensitivity: float
    sigma: float


def sensitivity_bound(lam: float, c1: float, b1: float, rho: float, n_parties: int, width: int) -> float:
    """l2 sensitivity bound of a released share: ``3/(d_m rho) * (lam c1 + (1 + M rho) b1)``."""
    if width <= 0 or rho <= 0:
        raise ValueError("share width and rho must be positive")
    if lam < 0 or c1 <= 0 or b1 <= 0 or n_parties < 1:
        raise ValueError("need lam >= 0, c1 > 0, b1 > 0, M >= 1")
    return (3.0 / (width * rho)) * (lam * c1 + (1.0 + n_parties * rho) * b1)


def calibrate_sigma(sensitivity: float, epsilon: float, delta: float) -> float:
    """Gaussian-mechanism scale ``sqrt(2 ln(1.25/delta)) * C / epsilon``."""
    if not 0 < epsilon <= 1:
        raise ValueError(f"epsilon must lie in (0, 1], got {epsilon}")
    if not 0 < delta < 1.25:
        raise ValueError(f"delta must lie in (0, 1.25), got {delta}")
    return math.sqrt(2.0 * math.log(1.25 / delta)) * sensitivity / epsilon


def total_budget(epsilon: float, delta: float, T: int, delta_prime: float) -> tuple[float, float]:
    """Advanced composition over ``T`` releases: ``(eps', T delta + delta')``."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < delta_prime < 1:
        raise ValueError("delta_prime must lie in (0, 1)")
    eps_total = math.sqrt(2.0 * T * math.log(1.0 / delta_prime)) * epsilon + T * epsilon * math.expm1(epsilon)
    return eps_total, T * delta + delta_prime


def party_rng(seed: int, party_id: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(party_id),))))


def perturb_share(share: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0.0:
        return np.array(share, dtype=np.float64, copy=True)
    return share + rng.normal(0.0, sigma, size=share.shape)


def calibrate_party(width: int, n_parties: int, rho: float, lam: float, params: PrivacyParams,
                    multiplier: float = 1.0) -> NoiseCalibration:
    C = sensitivity_bound(lam, params.c1, params.b1, rho, n_parties, width)
    return NoiseCalibration(C, multiplier * calibrate_sigma(C, params.epsilon, params.delta))


class Perturber:
    """Per-party noise injection with independent seeded streams."""

    def __init__(self, sigmas: Sequence[float], seed: int = 0):
        self.sigmas = [float(s) for s in sigmas]
        self._rngs = [party_rng(seed, m) for m in range(len(self.sigmas))]

    @classmethod
    def calibrated(cls, shards, hyper, params: PrivacyParams, multiplier: float = 1.0) -> "Perturber":
        M = len(shards)
        sig = [calibrate_party(sh.width, M, hyper.rho, hyper.lam, params, multiplier).sigma for sh in shards]
        return cls(sig, params.seed)

    def perturb(self, party_id: int, share: np.ndarray) -> np.ndarray:
        return perturb_share(share, self.sigmas[party_id], self._rngs[party_id])


# ------------------------------------------------- empirical sensitivity

def synthetic_shard(n_samples: int, width: int, rng: np.random.Generator, party_id: int = 0) -> PartyShard:
    """Gaussian block with unit-norm rows."""
    B = rng.standard_normal((n_samples, width))
    B /= np.linalg.norm(B, axis=1, keepdims=True)
    return PartyShard(party_id, B)


def _in_ball(rng, dim, radius):
    v = rng.standard_normal(dim)
    return v * (radius * rng.uniform() ** (1.0 / dim) / np.linalg.norm(v))


def neighbor_column(block: np.ndarray, rng: np.random.Generator, max_norm: float = 1.0) -> np.ndarray:
    """Copy of ``block`` with one column moved by a vector of l2 norm at most ``max_norm``."""
    out = np.array(block, copy=True)
    j = rng.integers(block.shape[1])
    delta = rng.standard_normal(block.shape[0])
    nrm = np.linalg.norm(delta)
    if max_norm > 0 and nrm > 0:
        out[:, j] += delta * (max_norm * rng.uniform(0.5, 1.0) / nrm)
    return out


@dataclass(frozen=True)
class SensitivityStudy:
    empirical: float
    bound: float
    trials: int


def empirical_sensitivity(shard: PartyShard, lam: float, rho: float, b1: float, n_parties: int = 1,
                          trials: int = 200, seed: int = 0, max_column_change: float = 1.0,
                          c1: float = 1.0) -> SensitivityStudy:
    """Largest observed ``||D x - D' x'||`` over random neighbouring blocks.

    Each trial draws a context with ``||y||, ||z||, ||x_k|| <= b1`` (other
    parties get fresh unit-row blocks), solves the ball-constrained x-update
    on ``D`` and on a one-column neighbour ``D'``, and records the share gap.
    The result is a lower bound on the true sensitivity, to be compared with
    :func:`sensitivity_bound`.
    """
    rng = np.random.default_rng(seed)
    N, d = shard.block.shape
    worst = 0.0
    for _ in range(trials):
        y = _in_ball(rng, N, b1)
        z = _in_ball(rng, N, b1)
        c = -z
        for k in range(n_parties - 1):
            other = synthetic_shard(N, d, rng, k + 1)
            c = c + other.block @ _in_ball(rng, d, b1)
        nb = PartyShard(shard.party_id, neighbor_column(shard.block, rng, max_column_change))
        x0 = np.zeros(d)
        xa = x_step(XStepInput(shard, x0, c, y, rho, lam, b1))
        xb = x_step(XStepInput(nb, x0, c, y, rho, lam, b1))
        worst = max(worst, float(np.linalg.norm(shard.block @ xa - nb.block @ xb)))
    return SensitivityStudy(worst, sensitivity_bound(lam, c1, b1, rho, n_parties, d), trials)
