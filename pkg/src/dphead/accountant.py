"""Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism.

A training run that adds Gaussian noise of scale ``sigma * C`` to a sum of
per-example gradients clipped to norm ``C``, over ``T`` steps that each touch a
random fraction ``q`` of the data, is (epsilon, delta)-DP: for any two datasets
differing in one example and any set of outcomes S,
``P[M(D) in S] <= exp(epsilon) * P[M(D') in S] + delta``.

The bound is tracked as Renyi-DP over a grid of integer orders, composed
additively across steps and converted to (epsilon, delta) with the classic
``rdp(alpha) + log(1/delta) / (alpha - 1)`` rule.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

DEFAULT_ORDERS: tuple[int, ...] = tuple(range(2, 65)) + (128, 256, 512)

SIGMA_BRACKET = (1e-2, 1e2)
CALIBRATION_TOL = 1e-4

ACCOUNTING_NOTE = (
    "accounted as Poisson subsampling with sampling_rate q; "
    "fixed-size shuffled batches are treated as Poisson with q = batch_size / n"
)


class AccountingError(ValueError):
    """Invalid input to an accounting routine."""


class BracketError(AccountingError):
    """The target epsilon cannot be met inside the sigma search bracket."""


@dataclass(frozen=True)
class RdpProfile:
    orders: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (len(self.orders),):
            raise AccountingError("orders and values must have the same length")
        object.__setattr__(self, "values", values)

    def __add__(self, other: "RdpProfile") -> "RdpProfile":
        if self.orders != other.orders:
            raise AccountingError("cannot add profiles over different orders")
        return RdpProfile(self.orders, self.values + other.values)

    def table(self) -> list[list[float]]:
        return [[int(a), float(v)] for a, v in zip(self.orders, self.values)]


@dataclass
class PrivacySpec:
    """Privacy parameters for one training run.

    ``noise_multiplier`` stays ``None`` until it is resolved, either by
    :func:`calibrate_sigma` or by the caller fixing it directly.
    """

    epsilon: float
    delta: float
    sampling_rate: float
    steps: int
    clip_norm: float = 1.0
    noise_multiplier: float | None = None
    n: int | None = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise AccountingError(f"epsilon must be positive, got {self.epsilon}")
        _check_delta(self.delta)
        _check_q(self.sampling_rate)
        if int(self.steps) != self.steps or self.steps < 1:
            raise AccountingError(f"steps must be a positive integer, got {self.steps}")
        if not self.clip_norm > 0:
            raise AccountingError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.noise_multiplier is not None and not self.noise_multiplier >= 0:
            raise AccountingError("noise_multiplier must be nonnegative")
        if self.n is not None and self.delta >= 1.0 / self.n:
            warnings.warn(
                f"delta={self.delta} is not below 1/n={1.0 / self.n:.3g}",
                stacklevel=2,
            )

    @property
    def resolved(self) -> bool:
        return self.noise_multiplier is not None

    def resolve(self, orders: Sequence[int] = DEFAULT_ORDERS) -> "PrivacySpec":
        """Return a copy with the noise multiplier calibrated to ``epsilon``."""
        sigma = calibrate_sigma(
            self.epsilon, self.delta, self.sampling_rate, self.steps, orders
        )
        return PrivacySpec(
            self.epsilon, self.delta, self.sampling_rate, self.steps,
            self.clip_norm, sigma, self.n,
        )


@dataclass
class PrivacyReport:
    epsilon: float
    delta: float
    sigma: float
    clip_norm: float
    sampling_rate: float
    steps: int
    best_order: int
    rdp: list[list[float]] = field(default_factory=list)
    target_epsilon: float | None = None
    accounting: str = ACCOUNTING_NOTE

    def to_dict(self) -> dict:
        # JSON has no infinity; an unbounded epsilon (sigma = 0) becomes null
        return {
            "epsilon": _finite_or_none(self.epsilon),
            "delta": self.delta,
            "sigma": self.sigma,
            "clip_norm": self.clip_norm,
            "sampling_rate": self.sampling_rate,
            "steps": self.steps,
            "best_order": self.best_order,
            "target_epsilon": self.target_epsilon,
            "accounting": self.accounting,
            "rdp": [[a, _finite_or_none(v)] for a, v in self.rdp],
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)


def _finite_or_none(x):
    return x if x is None or math.isfinite(x) else None


def _check_q(q: float) -> None:
    if not 0.0 < q <= 1.0:
        raise AccountingError(f"sampling rate must lie in (0, 1], got {q}")


def _check_delta(delta: float) -> None:
    if not 0.0 < delta < 1.0:
        raise AccountingError(f"delta must lie in (0, 1), got {delta}")


def _check_orders(orders: Sequence[int]) -> tuple[int, ...]:
    out = []
    for a in orders:
        if int(a) != a or a < 2:
            raise AccountingError(f"orders must be integers >= 2, got {a}")
        out.append(int(a))
    if not out:
        raise AccountingError("at least one order is required")
    return tuple(out)


def _log_binomials(alpha: int) -> np.ndarray:
    k = np.arange(alpha + 1)
    return (
        math.lgamma(alpha + 1)
        - np.array([math.lgamma(i + 1) for i in k])
        - np.array([math.lgamma(alpha - i + 1) for i in k])
    )


def _log_expm1(x: np.ndarray) -> np.ndarray:
    # log(exp(x) - 1) for x > 0 without overflow
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    small = x < 30.0
    out[small] = np.log(np.expm1(x[small]))
    out[~small] = x[~small] + np.log1p(-np.exp(-x[~small]))
    return out


def _rdp_integer_order(q: float, sigma: float, alpha: int) -> float:
    if q == 1.0:
        return alpha / (2.0 * sigma**2)
    # sum_k C(a,k)(1-q)^(a-k) q^k exp(k(k-1)/2s^2) = 1 + sum_{k>=2} ... * expm1(.)
    # since the k-terms without the expm1 factor sum to exactly 1.
    k = np.arange(2, alpha + 1)
    log_terms = (
        _log_binomials(alpha)[2:]
        + (alpha - k) * math.log1p(-q)
        + k * math.log(q)
        + _log_expm1(k * (k - 1) / (2.0 * sigma**2))
    )
    log_rest = logsumexp(log_terms)
    return float(np.logaddexp(0.0, log_rest)) / (alpha - 1)


def rdp_sampled_gaussian(
    q: float, sigma: float, orders: Sequence[int] = DEFAULT_ORDERS
) -> RdpProfile:
    """Single-step RDP of the Poisson-subsampled Gaussian mechanism.

    Uses the integer-order bound
    ``(1/(a-1)) log sum_k C(a,k) (1-q)^(a-k) q^k exp(k(k-1) / (2 sigma^2))``,
    evaluated in log space.
    """
    _check_q(q)
    if not sigma > 0:
        raise AccountingError(f"sigma must be positive, got {sigma}")
    orders = _check_orders(orders)
    values = np.array([_rdp_integer_order(q, sigma, a) for a in orders])
    return RdpProfile(orders, values)


def compose(profile: RdpProfile, steps: int) -> RdpProfile:
    if int(steps) != steps or steps < 1:
        raise AccountingError(f"steps must be a positive integer, got {steps}")
    return RdpProfile(profile.orders, profile.values * steps)


def rdp_to_eps(profile: RdpProfile, delta: float) -> tuple[float, int]:
    """Convert an RDP profile to (epsilon, best order) at the given delta.

    Ties go to the smallest order.
    """
    _check_delta(delta)
    if len(profile.orders) == 0:
        raise AccountingError("empty RDP profile")
    orders = np.asarray(profile.orders, dtype=np.float64)
    eps = profile.values + math.log(1.0 / delta) / (orders - 1.0)
    # stable argmin over orders sorted ascending
    order_idx = np.argsort(orders, kind="stable")
    i = order_idx[int(np.argmin(eps[order_idx]))]
    return float(eps[i]), int(profile.orders[i])


def epsilon_for(
    sigma: float,
    delta: float,
    q: float,
    steps: int,
    orders: Sequence[int] = DEFAULT_ORDERS,
) -> tuple[float, int]:
    return rdp_to_eps(compose(rdp_sampled_gaussian(q, sigma, orders), steps), delta)


def calibrate_sigma(
    eps_target: float,
    delta: float,
    q: float,
    steps: int,
    orders: Sequence[int] = DEFAULT_ORDERS,
    tol: float = CALIBRATION_TOL,
) -> float:
    """Smallest noise multiplier (to relative ``tol``) meeting ``eps_target``.

    Bisects on log sigma over ``SIGMA_BRACKET`` and returns the upper
    (conservative) end of the final interval.
    """
    if not eps_target > 0:
        raise AccountingError(f"eps_target must be positive, got {eps_target}")
    _check_delta(delta)
    _check_q(q)

    def eps(sigma):
        return epsilon_for(sigma, delta, q, steps, orders)[0]

    lo, hi = SIGMA_BRACKET
    if eps(hi) > eps_target:
        raise BracketError(
            f"upper endpoint sigma={hi:g} gives epsilon={eps(hi):.6g} > target {eps_target:g}"
        )
    if eps(lo) <= eps_target:
        raise BracketError(
            f"lower endpoint sigma={lo:g} already meets target {eps_target:g}; "
            "the tight sigma lies below the bracket"
        )
    log_lo, log_hi = math.log(lo), math.log(hi)
    log_tol = math.log1p(tol)
    while log_hi - log_lo > log_tol:
        mid = 0.5 * (log_lo + log_hi)
        if eps(math.exp(mid)) <= eps_target:
            log_hi = mid
        else:
            log_lo = mid
    sigma = math.exp(log_hi)
    # exp/log round trip must not push us over the target
    while eps(sigma) > eps_target:
        sigma = math.nextafter(sigma, math.inf)
    return sigma


def privacy_report(
    spec: PrivacySpec, orders: Sequence[int] = DEFAULT_ORDERS
) -> PrivacyReport:
    """Achieved (epsilon, delta) for a resolved spec, with the per-order table."""
    if not spec.resolved:
        raise AccountingError("privacy spec has no resolved noise multiplier")
    sigma = spec.noise_multiplier
    if sigma == 0:
        return PrivacyReport(
            epsilon=math.inf, delta=spec.delta, sigma=0.0, clip_norm=spec.clip_norm,
            sampling_rate=spec.sampling_rate, steps=spec.steps, best_order=0,
            rdp=[[int(a), math.inf] for a in orders], target_epsilon=spec.epsilon,
        )
    profile = compose(rdp_sampled_gaussian(spec.sampling_rate, sigma, orders), spec.steps)
    eps, best = rdp_to_eps(profile, spec.delta)
    return PrivacyReport(
        epsilon=eps,
        delta=spec.delta,
        sigma=sigma,
        clip_norm=spec.clip_norm,
        sampling_rate=spec.sampling_rate,
        steps=spec.steps,
        best_order=best,
        rdp=profile.table(),
        target_epsilon=spec.epsilon,
    )
