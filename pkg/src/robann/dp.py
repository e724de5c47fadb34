"""Laplace noise and the privacy-parameter calculators behind the robust decider."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .metric import ProblemParams

__all__ = [
    "PrivacyParams",
    "DeciderConstants",
    "laplace_sample",
    "laplace_cdf",
    "laplace_tail_bound",
    "laplace_mechanism",
    "advanced_composition",
    "subsampling_amplification",
    "per_query_epsilon",
    "decider_constants",
    "subsample_privacy_check",
]

DECIDER_EPSILON = 0.01


@dataclass(frozen=True)
class PrivacyParams:
    epsilon: float
    delta: float = 0.0
    sensitivity: float = 1.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 <= self.delta <= 1:
            raise ValueError("delta must lie in [0, 1]")
        if not self.sensitivity > 0:
            raise ValueError("sensitivity must be positive")

    @property
    def scale(self) -> float:
        return self.sensitivity / self.epsilon


def laplace_sample(lam: float, rng: np.random.Generator, size=None):
    """Inverse-CDF draw(s) from ``Lap(lam)``, density ``exp(-|x|/lam) / (2 lam)``."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    u = rng.random(size) - 0.5
    # rng.random() lies in [0, 1), so |u| == 0.5 only at u == -0.5
    u = np.where(u == -0.5, np.nextafter(-0.5, 0.0), u)
    x = -lam * np.sign(u) * np.log1p(-2.0 * np.abs(u))
    return float(x) if size is None else x


def laplace_cdf(x, lam: float = 1.0):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x < 0, 0.5 * np.exp(x / lam), 1.0 - 0.5 * np.exp(-x / lam))


def laplace_tail_bound(m: int, t: float) -> float:
    """Bound ``exp(-t)`` on the chance that any of ``m`` draws exceeds ``lam (ln m + t)``."""
    return math.exp(-t)


def laplace_mechanism(value: float, pp: PrivacyParams, rng: np.random.Generator) -> float:
    return value + laplace_sample(pp.scale, rng)


def advanced_composition(eps: float, delta: float, k: int, delta_prime: float) -> tuple[float, float]:
    if not 0 < delta_prime < 1:
        raise ValueError("delta_prime must lie in (0, 1)")
    if eps < 0 or delta < 0 or k < 1:
        raise ValueError("need eps >= 0, delta >= 0, k >= 1")
    return eps * math.sqrt(2 * k * math.log(1 / delta_prime)) + 2 * k * eps * eps, k * delta + delta_prime


def subsampling_amplification(eps: float, delta: float, m: int, n: int) -> tuple[float, float]:
    """Privacy of running an ``(eps, delta)`` mechanism on ``m`` of ``n`` items."""
    if n < 2 * m:
        raise ValueError(f"subsampling needs n >= 2m, got n={n}, m={m}")
    e = 6 * eps * m / n
    return e, math.exp(e) * (4 * m / n) * delta


def per_query_epsilon(eps: float, Q: int, delta: float) -> float:
    """Per-query budget so that ``Q`` adaptive queries compose to about ``eps / 2``."""
    return eps / (2 * math.sqrt(2 * Q * math.log(1 / delta)))


@dataclass(frozen=True)
class DeciderConstants:
    L: int
    k_sub: int
    epsilon: float


def decider_constants(
    params: ProblemParams,
    *,
    epsilon: float = DECIDER_EPSILON,
    l_scale: float = 1.0,
    k_const: float = 40.0,
    delta: float | None = None,
) -> DeciderConstants:
    """Copy count ``L`` and subsample size ``k_sub`` of the robust decider (natural logs)."""
    delta = params.delta if delta is None else delta
    Q = params.Q
    L = math.ceil(l_scale * 24 / epsilon * math.log(1 / delta) ** 1.5 * math.sqrt(2 * Q))
    k_sub = max(math.ceil(k_const * math.log(Q / delta)), 1)
    return DeciderConstants(max(L, 1), k_sub, epsilon)


def subsample_privacy_check(Q: int, delta: float, epsilon: float = DECIDER_EPSILON) -> tuple[float, float, bool]:
    """Compare ``6k/L`` with the per-query budget for ``k = ln(Q/delta)``.

    Returns ``(6k/L, eps', 6k/L < eps')`` with ``L`` from :func:`decider_constants`
    before rounding.
    """
    k = math.log(Q / delta)
    L = 24 / epsilon * math.log(1 / delta) ** 1.5 * math.sqrt(2 * Q)
    lhs = 6 * k / L
    rhs = per_query_epsilon(epsilon, Q, delta)
    return lhs, rhs, lhs < rhs
