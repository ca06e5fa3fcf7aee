"""Uncertain control-affine systems  xdot = f(x) - Delta(x)' theta + B(x) u.

Contains the generic system bundle, the aircraft pitch plant, the scalar
chatter example, desired-motion generators and a fixed-step RK4 simulator.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

DEG = np.pi / 180.0


class SimulationError(RuntimeError):
    """Raised when the controller fails during a simulation step."""

    def __init__(self, message, t, partial=None):
        super().__init__(f"t={t:.6f}s: {message}")
        self.t = t
        self.partial = partial  # SimTrace of the rows completed before the failure


def gram_schmidt_annihilator(B: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Orthonormal basis of null(B') (columns), via Gram-Schmidt on [B | I]."""
    n, m = B.shape
    basis = []
    for v in np.hstack([B, np.eye(n)]).T:
        w = v.astype(float).copy()
        for q in basis:
            w -= (q @ w) * q
        nrm = np.linalg.norm(w)
        if nrm > tol:
            basis.append(w / nrm)
    rank_b = np.linalg.matrix_rank(B) if B.size else 0
    perp = basis[rank_b:]
    if not perp:
        return np.zeros((n, 0))
    return np.array(perp).T


@dataclass(frozen=True)
class UncertainSystem:
    """Callable bundle for xdot = f(x) - Delta(x)' theta + B(x) u.

    ``delta(x)`` is p x n; ``jac_delta_rows(x)`` returns the p Jacobians
    (each n x n) of the rows of Delta, ``jac_b_cols(x)`` the m Jacobians of
    the columns of B.
    """

    dim_x: int
    dim_u: int
    dim_theta: int
    f: Callable
    delta: Callable
    B: Callable
    jac_f: Callable
    jac_delta_rows: Callable
    jac_b_cols: Callable
    b_perp_fn: Optional[Callable] = None
    name: str = "system"

    def B_perp(self, x) -> np.ndarray:
        if self.b_perp_fn is not None:
            return np.asarray(self.b_perp_fn(x), dtype=float)
        return gram_schmidt_annihilator(np.asarray(self.B(x), dtype=float))


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError(f"non-finite input: {a}")


def eval_dynamics(sys: UncertainSystem, x, u, theta) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    _check_finite(x, u, theta)
    if x.size != sys.dim_x or u.size != sys.dim_u or theta.size != sys.dim_theta:
        raise ValueError(f"dimension mismatch for {sys.name}: x{x.shape} u{u.shape} theta{theta.shape}")
    return sys.f(x) - sys.delta(x).T @ theta + sys.B(x) @ u


def eval_closed_loop_jacobian(sys: UncertainSystem, x, u, theta) -> np.ndarray:
    """d/dx of f - Delta' theta + B u at fixed (u, theta)."""
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    _check_finite(x, u, theta)
    A = np.array(sys.jac_f(x), dtype=float)
    for th_i, J in zip(theta, sys.jac_delta_rows(x)):
        A -= th_i * J
    for u_i, J in zip(u, sys.jac_b_cols(x)):
        A += u_i * J
    return A


# ---------------------------------------------------------------------------
# Concrete plants
# ---------------------------------------------------------------------------

def lift(alpha):
    """Flat-plate lift coefficient shape."""
    return 0.8 * np.sin(2.0 * alpha)


def lift_slope(alpha):
    return 1.6 * np.cos(2.0 * alpha)


@dataclass(frozen=True)
class PitchPlant:
    """Longitudinal pitch dynamics, state (pitch angle, angle of attack, pitch rate).

    theta = (k_q, l_alpha): pitch damping and lift moment arm; the pitching
    moment is -l_alpha * lift(alpha).
    """

    k_q: float = 0.2
    l_alpha: float = -1.0

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.k_q, self.l_alpha])

    def system(self) -> UncertainSystem:
        return pitch_system()


def pitch_system() -> UncertainSystem:
    b = np.array([[0.0], [0.0], [1.0]])
    b_perp = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    zeros = np.zeros((3, 3))

    def f(x):
        return np.array([x[2], x[2] - lift(x[1]), 0.0])

    def delta(x):
        return np.array([[0.0, 0.0, x[2]], [0.0, 0.0, lift(x[1])]])

    def jac_f(x):
        return np.array([[0.0, 0.0, 1.0], [0.0, -lift_slope(x[1]), 1.0], [0.0, 0.0, 0.0]])

    def jac_delta_rows(x):
        j_q = np.zeros((3, 3))
        j_q[2, 2] = 1.0
        j_l = np.zeros((3, 3))
        j_l[2, 1] = lift_slope(x[1])
        return [j_q, j_l]

    return UncertainSystem(
        dim_x=3, dim_u=1, dim_theta=2,
        f=f, delta=delta, B=lambda x: b,
        jac_f=jac_f, jac_delta_rows=jac_delta_rows,
        jac_b_cols=lambda x: [zeros],
        b_perp_fn=lambda x: b_perp,
        name="pitch",
    )


def scalar_drift_system() -> UncertainSystem:
    """xdot = -theta + u (the one-dimensional chatter example)."""
    one = np.ones((1, 1))
    zero = np.zeros((1, 1))
    return UncertainSystem(
        dim_x=1, dim_u=1, dim_theta=1,
        f=lambda x: np.zeros(1), delta=lambda x: one, B=lambda x: one,
        jac_f=lambda x: zero, jac_delta_rows=lambda x: [zero],
        jac_b_cols=lambda x: [zero], b_perp_fn=lambda x: np.zeros((1, 0)),
        name="example1",
    )


def linear_system(A, B, delta=None) -> UncertainSystem:
    """xdot = A x + B u (optionally with a constant Delta)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    n, m = B.shape
    D = np.zeros((1, n)) if delta is None else np.atleast_2d(np.asarray(delta, dtype=float))
    p = D.shape[0]
    zeros = np.zeros((n, n))
    return UncertainSystem(
        dim_x=n, dim_u=m, dim_theta=p,
        f=lambda x: A @ x, delta=lambda x: D, B=lambda x: B,
        jac_f=lambda x: A, jac_delta_rows=lambda x: [zeros] * p,
        jac_b_cols=lambda x: [zeros] * m, name="linear",
    )


# ---------------------------------------------------------------------------
# Desired motion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DesiredMotion:
    x_d: Callable
    xdot_d: Callable
    kind: str

    def __call__(self, t):
        return self.x_d(t), self.xdot_d(t)


SINE_AMPLITUDE = 20.0 * DEG


def make_desired_motion(scenario: str) -> DesiredMotion:
    if scenario == "immelmann":
        target = np.array([np.pi, 0.0, 0.0])
        return DesiredMotion(lambda t: target.copy(), lambda t: np.zeros(3), "terminal_state")
    if scenario == "sine_tracking":
        a = SINE_AMPLITUDE

        def x_d(t):
            return np.array([-a * np.cos(t), 0.0, a * np.sin(t)])

        def xdot_d(t):
            return np.array([a * np.sin(t), 0.0, a * np.cos(t)])

        return DesiredMotion(x_d, xdot_d, "trajectory")
    if scenario == "example1":
        return DesiredMotion(lambda t: np.zeros(1), lambda t: np.zeros(1), "terminal_state")
    raise ValueError(f"unknown scenario {scenario!r}")


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

@dataclass
class SimTrace:
    """Fixed-step record; every array has one row per grid time."""

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    extras: dict = field(default_factory=dict)

    def __len__(self):
        return self.t.size

    def __getattr__(self, name):
        extras = self.__dict__.get("extras", {})
        if name in extras:
            return extras[name]
        raise AttributeError(name)


def rk4_step(fun, x, dt):
    k1 = fun(x)
    k2 = fun(x + 0.5 * dt * k1)
    k3 = fun(x + 0.5 * dt * k2)
    k4 = fun(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate(sys: UncertainSystem, controller: Callable, x0, theta_true, t_span, dt=1e-3) -> SimTrace:
    """Classical RK4 with the control held constant over each step.

    ``controller(t, x)`` returns ``u`` or ``(u, info)``; scalar or array
    entries of ``info`` are stacked into ``trace.extras``. The controller is
    also evaluated at the final time so all rows line up.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if np.isscalar(t_span):
        t0, tf = 0.0, float(t_span)
    else:
        t0, tf = map(float, t_span)
    n_steps = int(round((tf - t0) / dt))
    theta_true = np.atleast_1d(np.asarray(theta_true, dtype=float))
    x = np.asarray(x0, dtype=float).copy()

    ts = t0 + dt * np.arange(n_steps + 1)
    xs = np.zeros((n_steps + 1, sys.dim_x))
    us = np.zeros((n_steps + 1, sys.dim_u))
    extras: dict = {}
    def partial(k):
        return SimTrace(ts[:k], xs[:k], us[:k], {key: v[:k] for key, v in extras.items()})

    for k, t in enumerate(ts):
        try:
            out = controller(t, x)
        except SimulationError:
            raise
        except Exception as exc:  # noqa: BLE001 - re-raised with the timestamp
            raise SimulationError(f"controller error: {exc}", t, partial(k)) from exc
        if isinstance(out, tuple):
            u, info = out
        else:
            u, info = out, {}
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if not np.all(np.isfinite(u)):
            raise SimulationError(f"controller returned non-finite input {u}", t, partial(k))
        xs[k] = x
        us[k] = u
        for key, val in info.items():
            arr = extras.get(key)
            val = np.asarray(val, dtype=float)
            if arr is None:
                arr = np.zeros((n_steps + 1,) + val.shape)
                extras[key] = arr
            arr[k] = val
        if k < n_steps:
            x = rk4_step(lambda z: eval_dynamics(sys, z, u, theta_true), x, dt)
            if not np.all(np.isfinite(x)):
                raise SimulationError("state diverged", t + dt, partial(k + 1))
    return SimTrace(ts, xs, us, extras)
