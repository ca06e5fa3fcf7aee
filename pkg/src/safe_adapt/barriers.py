"""Barrier functions: plain, adaptive, modified adaptive and robust adaptive.

A robust adaptive barrier h_r keeps the tightened set
    { x : h_r(x, theta_hat) >= 1/2 v' Gamma^-1 v }
forward invariant, where v is the per-parameter maximum estimation error.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

KINDS = ("plain", "adaptive", "modified_adaptive", "robust_adaptive")


def linear_class_k(slope: float) -> Callable:
    if slope <= 0:
        raise ValueError("class-K slope must be positive")

    def alpha(r):
        return slope * r

    alpha.slope = slope
    return alpha


@dataclass(frozen=True)
class BarrierSpec:
    h: Callable
    dh_dx: Callable
    dh_dtheta: Optional[Callable] = None
    alpha: Callable = linear_class_k(10.0)
    kind: str = "robust_adaptive"
    name: str = "barrier"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown barrier kind {self.kind!r}")

    def grad_theta(self, x, theta_hat):
        if self.dh_dtheta is None:
            return np.zeros(np.size(theta_hat))
        return np.asarray(self.dh_dtheta(x, theta_hat), dtype=float)


@dataclass(frozen=True)
class TighteningData:
    gamma: np.ndarray
    vartheta_max: np.ndarray

    def __post_init__(self):
        g = np.atleast_2d(np.asarray(self.gamma, dtype=float))
        v = np.atleast_1d(np.asarray(self.vartheta_max, dtype=float))
        if np.any(v < 0):
            raise ValueError("maximum parameter error must be nonnegative")
        if not np.allclose(g, g.T):
            raise ValueError("adaptation gain must be symmetric")
        np.linalg.cholesky(g)
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "vartheta_max", v)

    def margin(self) -> float:
        v = self.vartheta_max
        return 0.5 * float(v @ np.linalg.solve(self.gamma, v))


# ---------------------------------------------------------------------------
# Barrier factories for the shipped scenarios
# ---------------------------------------------------------------------------

def pitch_rate_ceiling(q_max: float, slope: float = 10.0, kind="robust_adaptive") -> BarrierSpec:
    """h = q_max - q."""
    grad = np.array([0.0, 0.0, -1.0])
    return BarrierSpec(lambda x, th: q_max - x[2], lambda x, th: grad,
                       alpha=linear_class_k(slope), kind=kind, name="q_ceiling")


def pitch_rate_band(q_max: float, slope: float = 10.0, kind="robust_adaptive") -> BarrierSpec:
    """h = 1 - (q / q_max)^2."""
    return BarrierSpec(lambda x, th: 1.0 - (x[2] / q_max) ** 2,
                       lambda x, th: np.array([0.0, 0.0, -2.0 * x[2] / q_max ** 2]),
                       alpha=linear_class_k(slope), kind=kind, name="q_band")


def state_floor(x_min: float, slope: float = 10.0, kind="robust_adaptive") -> BarrierSpec:
    """h = x - x_min for a scalar state."""
    return BarrierSpec(lambda x, th: x[0] - x_min, lambda x, th: np.ones(1),
                       alpha=linear_class_k(slope), kind=kind, name="x_floor")


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def lambda_map(theta_hat, spec: BarrierSpec, gamma, x) -> np.ndarray:
    """theta_hat - Gamma (dh/dtheta)'."""
    theta_hat = np.atleast_1d(np.asarray(theta_hat, dtype=float))
    gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
    return theta_hat - gamma @ spec.grad_theta(x, theta_hat)


def constraint_row(sys, dh_dx, Lam, x, rhs_term):
    """Row of  dh/dx (f - Delta' Lam + B u) >= rhs_term  as (coeff_u, rhs)."""
    dh_dx = np.asarray(dh_dx, dtype=float)
    coeff_u = dh_dx @ sys.B(x)
    drift = dh_dx @ (sys.f(x) - sys.delta(x).T @ Lam)
    return coeff_u, float(rhs_term - drift)


def racbf_constraint_row(sys, spec: BarrierSpec, tight: TighteningData, x, theta_hat):
    """Robust adaptive row  coeff_u . u >= rhs.

    coeff_u = dh_r/dx B and rhs = -alpha(h_r - margin) - dh_r/dx (f - Delta' Lambda).
    """
    Lam = lambda_map(theta_hat, spec, tight.gamma, x)
    h = spec.h(x, theta_hat)
    return constraint_row(sys, spec.dh_dx(x, theta_hat), Lam, x,
                          -spec.alpha(h - tight.margin()))


def acbf_constraint_row(sys, spec: BarrierSpec, gamma, x, theta_hat):
    """Adaptive row  dh_a/dx (f - Delta' Lambda + B u) >= 0."""
    Lam = lambda_map(theta_hat, spec, gamma, x)
    return constraint_row(sys, spec.dh_dx(x, theta_hat), Lam, x, 0.0)


def barrier_adaptation_rhs(sys, spec: BarrierSpec, gamma, x, theta_hat) -> np.ndarray:
    """Gamma Delta(x) (dh_r/dx)'."""
    gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
    return gamma @ (sys.delta(x) @ np.asarray(spec.dh_dx(x, theta_hat), dtype=float))


def admissible_gain_floor(vartheta_max, h_r_reference: float) -> float:
    """Smallest admissible lambda_min(Gamma): |v|^2 / (2 h_r(x_r, theta_r))."""
    if not h_r_reference > 0:
        raise ValueError("reference barrier value must be positive")
    v = np.atleast_1d(np.asarray(vartheta_max, dtype=float))
    return float(v @ v) / (2.0 * h_r_reference)


def modified_acbf(h_a: float, sigma: float) -> float:
    """sigma^2 above h_a = sigma, sigma^2 - (h_a - sigma)^2 below."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if h_a >= sigma:
        return sigma ** 2
    return sigma ** 2 - (h_a - sigma) ** 2


def modified_acbf_slope(h_a: float, sigma: float) -> float:
    """d(modified)/d(h_a); zero on the flat branch."""
    return 0.0 if h_a >= sigma else -2.0 * (h_a - sigma)


def project_to_box(theta_hat, box) -> np.ndarray:
    """Componentwise clamp into ``box`` (anything with ``lower``/``upper``)."""
    return np.minimum(np.maximum(np.asarray(theta_hat, dtype=float), box.lower), box.upper)


def projected_rate(theta_hat, rate, box) -> np.ndarray:
    """Zero the rate components that push outward through an active bound."""
    rate = np.array(rate, dtype=float)
    at_lo = (theta_hat <= box.lower) & (rate < 0)
    at_hi = (theta_hat >= box.upper) & (rate > 0)
    rate[at_lo | at_hi] = 0.0
    return rate


def composite_barrier(spec: BarrierSpec, tight: TighteningData, x, theta_hat, theta_true) -> float:
    """h_r(x, theta_hat) - 1/2 e' Gamma^-1 e with e = theta_hat - theta_true."""
    e = np.atleast_1d(np.asarray(theta_hat, dtype=float) - np.asarray(theta_true, dtype=float))
    return float(spec.h(x, theta_hat) - 0.5 * e @ np.linalg.solve(tight.gamma, e))
