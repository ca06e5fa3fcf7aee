"""Set-membership identification of the uncertain parameters.

Each measured sample (x, u, xdot) is consistent with a parameter vector rho
when |xdot - f(x) + Delta(x)' rho - B(x) u| <= D + rate_error componentwise.
The set of consistent parameters is a polytope; its bounding box, found with
two LPs per parameter, is intersected with the current box so bounds never
grow.
"""
from __future__ import annotations

import logging
import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np

from .optkit import LinearProgram, solve_lp_many
from .sysmodel import UncertainSystem

log = logging.getLogger(__name__)

DEFAULT_TERMINATION = 1e-3
INFO_TOL = 1e-8


class SmidWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ParameterBox:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float)).copy()
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float)).copy()
        if lo.shape != hi.shape:
            raise ValueError("bound vectors differ in length")
        if np.any(lo > hi):
            raise ValueError(f"empty box: lower {lo} above upper {hi}")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def center(self):
        return 0.5 * (self.lower + self.upper)

    def contains(self, theta, tol=0.0) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.lower - tol) and np.all(theta <= self.upper + tol))

    def is_subset_of(self, other: "ParameterBox", tol=0.0) -> bool:
        return bool(np.all(self.lower >= other.lower - tol) and np.all(self.upper <= other.upper + tol))

    def vertices(self):
        import itertools
        return [np.array(v) for v in itertools.product(*zip(self.lower, self.upper))]


def max_error_vector(box: ParameterBox) -> np.ndarray:
    return box.upper - box.lower


def should_update(box: ParameterBox, eps: float = DEFAULT_TERMINATION) -> bool:
    """False once every parameter is pinned down to within ``eps``."""
    return bool(np.any(max_error_vector(box) > eps))


class MeasurementBuffer:
    """Sliding window of (x, u, xdot_est, rate-error factor) samples."""

    def __init__(self, capacity: int = 50, disturbance_bound: float = 0.1, rate_error_bound: float = 0.0):
        if disturbance_bound <= 0:
            raise ValueError("disturbance bound must be positive")
        if rate_error_bound < 0:
            raise ValueError("rate error bound must be nonnegative")
        self.capacity = capacity
        self.disturbance_bound = disturbance_bound
        self.rate_error_bound = rate_error_bound
        self.entries = deque(maxlen=capacity)

    def __len__(self):
        return len(self.entries)

    def append(self, x, u, xdot_est, t=None, error_factor=1.0):
        x = np.asarray(x, dtype=float)
        u = np.atleast_1d(np.asarray(u, dtype=float))
        xdot_est = np.asarray(xdot_est, dtype=float)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u)) and np.all(np.isfinite(xdot_est))):
            raise ValueError("measurement entries must be finite")
        if t is not None and self.entries and self.entries[-1][4] is not None and t < self.entries[-1][4]:
            raise ValueError("measurements must be appended in time order")
        self.entries.append((x, u, xdot_est, float(error_factor), t))

    def clear(self):
        self.entries.clear()


def estimate_rate(trace, index: int, return_factor: bool = False):
    """Finite-difference state rate at ``trace.x[index]``.

    Central difference inside the record, one-sided at the ends (with a
    rate-error factor of 2 instead of 1).
    """
    t = np.asarray(trace.t, dtype=float)
    x = np.asarray(trace.x, dtype=float)
    if len(t) < 2:
        raise ValueError("rate estimation needs at least two samples")
    if index < 0:
        index += len(t)
    if 0 < index < len(t) - 1:
        rate = (x[index + 1] - x[index - 1]) / (t[index + 1] - t[index - 1])
        factor = 1.0
    elif index == 0:
        rate = (x[1] - x[0]) / (t[1] - t[0])
        factor = 2.0
    else:
        rate = (x[index] - x[index - 1]) / (t[index] - t[index - 1])
        factor = 2.0
    return (rate, factor) if return_factor else rate


def consistency_rows(buffer: MeasurementBuffer, sys: UncertainSystem):
    """Half-space rows  A rho <= b  encoding every informative sample."""
    rows, rhs = [], []
    D = buffer.disturbance_bound
    for x, u, xdot, factor, _ in buffer.entries:
        delta = sys.delta(x)
        resid = xdot - sys.f(x) - sys.B(x) @ u
        bound = D + factor * buffer.rate_error_bound
        for j in range(sys.dim_x):
            col = delta[:, j]
            if np.linalg.norm(col) < INFO_TOL:
                continue
            rows.append(col)
            rhs.append(bound - resid[j])
            rows.append(-col)
            rhs.append(bound + resid[j])
    p = sys.dim_theta
    return np.array(rows).reshape(-1, p), np.array(rhs)


def update_bounds(buffer: MeasurementBuffer, current: ParameterBox, sys: UncertainSystem) -> ParameterBox:
    """Intersect ``current`` with the bounding box of the consistent set."""
    if len(buffer) == 0:
        raise ValueError("empty measurement buffer")
    A, b = consistency_rows(buffer, sys)
    if A.shape[0] == 0:
        return current
    p = sys.dim_theta
    bounds = (current.lower.copy(), current.upper.copy())
    lo = current.lower.copy()
    hi = current.upper.copy()
    eye = np.eye(p)
    reports = solve_lp_many(LinearProgram(eye[0], A, b, bounds), list(eye) + list(-eye))
    for k, rep in enumerate(reports):
        if not rep.ok:
            warnings.warn(f"set-membership LP {rep.status}; keeping current bounds", SmidWarning)
            log.warning("set-membership update skipped: LP %s", rep.status)
            return current
        i = k % p
        if k < p:
            lo[i] = max(lo[i], rep.solution[i])
        else:
            hi[i] = min(hi[i], rep.solution[i])
    # LP round-off can cross a collapsed interval
    crossed = lo > hi
    if np.any(crossed):
        mid = 0.5 * (lo + hi)
        lo[crossed] = hi[crossed] = mid[crossed]
    return ParameterBox(lo, hi)
