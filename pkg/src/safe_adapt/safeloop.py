"""Per-step safe adaptive controllers.

``step_racbf`` runs one control period: geodesic, QP over (u, slack),
parameter adaptation for the tracking and barrier estimates, and a periodic
set-membership update. ``step_acbf_baseline`` is the adaptive-barrier
comparison controller in its plain and modified forms.
"""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Optional

import numpy as np

from .barriers import (
    BarrierSpec,
    TighteningData,
    acbf_constraint_row,
    barrier_adaptation_rhs,
    modified_acbf_slope,
    project_to_box,
    projected_rate,
    racbf_constraint_row,
)
from .geodesics import GeodesicResult, energy_rate_lhs, solve_geodesic
from .metrics import MetricFamily
from .optkit import QuadraticProgram, SolveReport, solve_qp
from .smid import MeasurementBuffer, ParameterBox, estimate_rate, max_error_vector, should_update, update_bounds
from .sysmodel import DesiredMotion, UncertainSystem

ACTIVE_TOL = 1e-6


class ControllerError(RuntimeError):
    """The control QP had no solution."""


@dataclass
class SmidSettings:
    buffer: MeasurementBuffer
    stride: int = 10
    termination: float = 1e-3


@dataclass
class ControllerState:
    theta_hat_C: np.ndarray
    theta_hat_B: np.ndarray
    param_box: ParameterBox
    vartheta: np.ndarray
    gamma_C: np.ndarray
    gamma_B: np.ndarray
    lam: float = 0.0
    slack_weight: float = 1e3
    freeze_C: bool = False
    smid: Optional[SmidSettings] = None
    u_bounds: Optional[tuple] = None
    sigma: float = 0.1
    geodesic_opts: dict = field(default_factory=dict)
    warm_start: Optional[np.ndarray] = None
    history: tuple = ()
    step_count: int = 0

    def __post_init__(self):
        self.theta_hat_C = np.atleast_1d(np.asarray(self.theta_hat_C, dtype=float))
        self.theta_hat_B = np.atleast_1d(np.asarray(self.theta_hat_B, dtype=float))
        self.vartheta = np.atleast_1d(np.asarray(self.vartheta, dtype=float))
        self.gamma_C = np.atleast_2d(np.asarray(self.gamma_C, dtype=float))
        self.gamma_B = np.atleast_2d(np.asarray(self.gamma_B, dtype=float))

    @property
    def tightening(self) -> TighteningData:
        return TighteningData(self.gamma_B, self.vartheta)


@dataclass
class StepOutput:
    u: np.ndarray
    eps: float
    energy: float
    h_r: float
    safety_active: bool
    geodesic: Optional[GeodesicResult] = None
    qp: Optional[SolveReport] = None
    timings: dict = field(default_factory=dict)


def detect_safety_active(qp_report: SolveReport, row: int, residual: float, tol: float = ACTIVE_TOL) -> bool:
    """Barrier row counts as active if the solver says so or it is within ``tol``."""
    if row in qp_report.active_set:
        return True
    return bool(residual < tol)


def _stability_row(sys, metric, geo: GeodesicResult, theta_hat_C, x, xdot_d, lam):
    """Row  [gamma1' M B, -1] (u, eps) <= -lam E - gamma1' M (f - Delta' theta) + gamma0' M(x_d) xdot_d."""
    M_x = metric.eval_M(x, theta_hat_C)
    drift = sys.f(x) - sys.delta(x).T @ theta_hat_C
    B = sys.B(x)
    # energy_rate_lhs is affine in u; split it into the drift part and the input part
    lhs_drift = energy_rate_lhs(geo, metric, theta_hat_C, drift, xdot_d, M_x=M_x)
    coeff_u = geo.gamma_s1 @ M_x @ B
    return coeff_u, -lam * geo.energy - lhs_drift, M_x


def _feasible_start(A, b, m):
    """(u, eps) satisfying every row: u from the rows without slack, eps covering the rest.

    Phase 1 on the joint problem can lose the slack column when the energy
    row is badly scaled, so the start is built from the problem structure.
    Returns None when the hard rows alone are infeasible.
    """
    soft = A[:, -1] != 0.0
    hard = ~soft
    if hard.any():
        rep = solve_qp(QuadraticProgram(np.eye(m), np.zeros(m), A[hard, :m], b[hard]))
        if not rep.ok:
            return None
        u0 = rep.solution
    else:
        u0 = np.zeros(m)
    need = (A[soft, :m] @ u0 - b[soft]) / -A[soft, -1]
    eps0 = max(0.0, float(need.max(initial=0.0)))
    return np.concatenate([u0, [eps0 * (1.0 + 1e-12) + 1e-300]])


def _solve_control_qp(m, rows, rhs, slack_weight, u_bounds, context):
    """min 1/2 u'u + r eps^2 over (u, eps) with eps >= 0 appended."""
    A = [np.asarray(r, dtype=float) for r in rows]
    b = list(rhs)
    e = np.zeros(m + 1)
    e[-1] = -1.0
    A.append(e)
    b.append(0.0)
    if u_bounds is not None:
        lo, hi = (np.broadcast_to(np.asarray(v, dtype=float), (m,)) for v in u_bounds)
        for i in range(m):
            row = np.zeros(m + 1)
            row[i] = 1.0
            A.append(row.copy())
            b.append(hi[i])
            A.append(-row)
            b.append(-lo[i])
    A, b = np.array(A), np.array(b)
    H = np.diag(np.concatenate([np.ones(m), [2.0 * slack_weight]]))
    rep = solve_qp(QuadraticProgram(H, np.zeros(m + 1), A, b), x0=_feasible_start(A, b, m))
    if not rep.ok:
        raise ControllerError(f"control QP {rep.status} ({context})")
    return rep, np.array(A), np.array(b)


def _smid_step(state: ControllerState, sys, x, u, t, dt):
    """Record the previous sample and refresh the box every ``stride`` steps."""
    smid = state.smid
    history = (state.history + ((t, np.array(x), np.array(u)),))[-3:]
    box = state.param_box
    lp_time = 0.0
    if len(history) == 3:
        (t0, x0, u0), (t1, x1, u1), (t2, x2, _) = history
        rate = estimate_rate(SimpleNamespace(t=np.array([t0, t1, t2]), x=np.array([x0, x1, x2])), 1)
        # the central difference spans both held inputs around x1
        smid.buffer.append(x1, 0.5 * (u0 + u1), rate, t=t1)
    if state.step_count % smid.stride == 0 and len(smid.buffer) and should_update(box, smid.termination):
        tic = time.perf_counter()
        box = update_bounds(smid.buffer, box, sys)
        lp_time = time.perf_counter() - tic
    return history, box, lp_time


def step_racbf(state: ControllerState, sys: UncertainSystem, metric: Optional[MetricFamily],
               barrier: BarrierSpec, motion: DesiredMotion, x, t, dt):
    """One control period of the robust adaptive safety controller.

    Returns ``(StepOutput, new_state)``. ``metric=None`` drops the tracking
    constraint (pure safety filter around u = 0).
    """
    x = np.asarray(x, dtype=float)
    timings = {}
    x_d, xdot_d = motion(t)
    m = sys.dim_u
    rows, rhs = [], []

    geo = None
    E = 0.0
    M_x = None
    if metric is not None:
        tic = time.perf_counter()
        geo = solve_geodesic(x, x_d, metric, state.theta_hat_C, state.geodesic_opts, warm_start=state.warm_start)
        timings["nlp"] = time.perf_counter() - tic
        E = geo.energy
        coeff_u, b_stab, M_x = _stability_row(sys, metric, geo, state.theta_hat_C, x, xdot_d, state.lam)
        rows.append(np.concatenate([coeff_u, [-1.0]]))
        rhs.append(b_stab)

    tight = state.tightening
    coeff_b, rhs_b = racbf_constraint_row(sys, barrier, tight, x, state.theta_hat_B)
    barrier_row = len(rows)
    rows.append(np.concatenate([-coeff_b, [0.0]]))
    rhs.append(-rhs_b)

    tic = time.perf_counter()
    rep, A, b = _solve_control_qp(m, rows, rhs, state.slack_weight, state.u_bounds,
                                  f"t={t:.4f}, x={x}, barrier row {coeff_b}.u >= {rhs_b:.6g}")
    timings["qp"] = time.perf_counter() - tic
    u = rep.solution[:m]
    eps = max(float(rep.solution[m]), 0.0)
    residual = float(b[barrier_row] - A[barrier_row] @ rep.solution)
    active = detect_safety_active(rep, barrier_row, residual)
    h_r = float(barrier.h(x, state.theta_hat_B))

    # adaptation (explicit Euler, projected into the current box)
    box = state.param_box
    rate_B = barrier_adaptation_rhs(sys, barrier, state.gamma_B, x, state.theta_hat_B)
    theta_B = project_to_box(state.theta_hat_B + dt * projected_rate(state.theta_hat_B, rate_B, box), box)
    theta_C = state.theta_hat_C
    if geo is not None and not (active or state.freeze_C):
        rate_C = -state.gamma_C @ (sys.delta(x) @ (M_x @ geo.gamma_s1))
        theta_C = project_to_box(theta_C + dt * projected_rate(theta_C, rate_C, box), box)

    history, vartheta = state.history, state.vartheta
    if state.smid is not None:
        history, box, timings["lp"] = _smid_step(state, sys, x, u, t, dt)
        if box is not state.param_box:
            vartheta = np.minimum(vartheta, max_error_vector(box))
            theta_B = project_to_box(theta_B, box)
            theta_C = project_to_box(theta_C, box)

    new_state = dataclasses.replace(
        state, theta_hat_B=theta_B, theta_hat_C=theta_C, param_box=box, vartheta=vartheta,
        warm_start=None if geo is None else geo.interior, history=history, step_count=state.step_count + 1)
    out = StepOutput(u, eps, E, h_r, active, geo, rep, timings)
    return out, new_state


def step_acbf_baseline(state: ControllerState, sys: UncertainSystem, barrier: BarrierSpec,
                       motion: DesiredMotion, x, t, dt, variant: str = "modified",
                       metric: Optional[MetricFamily] = None):
    """Adaptive-barrier comparison controller.

    ``plain``: dh_a/dx (f - Delta' Lambda + B u) >= 0 with the barrier
    estimate adapted by Gamma Delta (dh_a/dx)'.
    ``modified``: the smoothed barrier sigma^2 - (h_a - sigma)^2 below
    sigma must not decrease; the estimate moves by
    -Gamma (h_a - sigma) Delta (dh_a/dx)' below sigma and is frozen above.
    With ``metric`` the tracking constraint of ``step_racbf`` is added.
    """
    if variant not in ("plain", "modified"):
        raise ValueError(f"unknown baseline variant {variant!r}")
    x = np.asarray(x, dtype=float)
    timings = {}
    m = sys.dim_u
    x_d, xdot_d = motion(t)
    rows, rhs = [], []
    geo = None
    E = 0.0
    M_x = None
    if metric is not None:
        tic = time.perf_counter()
        geo = solve_geodesic(x, x_d, metric, state.theta_hat_C, state.geodesic_opts, warm_start=state.warm_start)
        timings["nlp"] = time.perf_counter() - tic
        E = geo.energy
        coeff_u, b_stab, M_x = _stability_row(sys, metric, geo, state.theta_hat_C, x, xdot_d, state.lam)
        rows.append(np.concatenate([coeff_u, [-1.0]]))
        rhs.append(b_stab)

    h_a = float(barrier.h(x, state.theta_hat_B))
    coeff_b, rhs_b = acbf_constraint_row(sys, barrier, state.gamma_B, x, state.theta_hat_B)
    if variant == "plain":
        scale = 1.0
    else:
        scale = modified_acbf_slope(h_a, state.sigma)
    barrier_row = None
    if scale > 0:
        barrier_row = len(rows)
        rows.append(np.concatenate([-scale * coeff_b, [0.0]]))
        rhs.append(-scale * rhs_b)

    tic = time.perf_counter()
    rep, A, b = _solve_control_qp(m, rows, rhs, state.slack_weight, state.u_bounds,
                                  f"t={t:.4f}, x={x}, h_a={h_a:.6g}")
    timings["qp"] = time.perf_counter() - tic
    u = rep.solution[:m]
    eps = max(float(rep.solution[m]), 0.0)
    active = False
    if barrier_row is not None:
        residual = float(b[barrier_row] - A[barrier_row] @ rep.solution)
        active = detect_safety_active(rep, barrier_row, residual)

    box = state.param_box
    base = barrier_adaptation_rhs(sys, barrier, state.gamma_B, x, state.theta_hat_B)
    rate_B = base if variant == "plain" else 0.5 * scale * base
    theta_B = project_to_box(state.theta_hat_B + dt * projected_rate(state.theta_hat_B, rate_B, box), box)
    theta_C = state.theta_hat_C
    if geo is not None and not (active or state.freeze_C):
        rate_C = -state.gamma_C @ (sys.delta(x) @ (M_x @ geo.gamma_s1))
        theta_C = project_to_box(theta_C + dt * projected_rate(theta_C, rate_C, box), box)

    new_state = dataclasses.replace(state, theta_hat_B=theta_B, theta_hat_C=theta_C,
                                    warm_start=None if geo is None else geo.interior,
                                    step_count=state.step_count + 1)
    return StepOutput(u, eps, E, h_a, active, geo, rep, timings), new_state
