"""Small dense solvers: two-phase simplex LP, primal active-set QP and an
Armijo descent method for smooth unconstrained problems.

The problems solved here are tiny (a handful of variables, at most a few
hundred rows), so every routine favours robustness and determinism over
speed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

FEAS_TOL = 1e-9
OPT_TOL = 1e-8

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
MAX_ITER = "max_iter"
STALLED = "stalled"


class NonFiniteIterateError(FloatingPointError):
    """Objective or gradient became non-finite at an accepted iterate."""

    def __init__(self, message, iterate):
        super().__init__(message)
        self.iterate = np.array(iterate, dtype=float)


@dataclass(frozen=True)
class LinearProgram:
    """min cost.x  s.t.  ineq_matrix @ x <= ineq_rhs,  lo <= x <= hi.

    ``var_bounds`` is ``(lo, hi)`` with ``-inf``/``inf`` allowed; ``None``
    leaves every variable free.
    """

    cost: np.ndarray
    ineq_matrix: np.ndarray
    ineq_rhs: np.ndarray
    var_bounds: Optional[tuple] = None

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.cost, dtype=float))
        A = np.asarray(self.ineq_matrix, dtype=float).reshape(-1, c.size)
        b = np.atleast_1d(np.asarray(self.ineq_rhs, dtype=float))
        if c.size < 1:
            raise ValueError("LP needs at least one variable")
        if A.shape[0] != b.size:
            raise ValueError(f"row count {A.shape[0]} != rhs length {b.size}")
        object.__setattr__(self, "cost", c)
        object.__setattr__(self, "ineq_matrix", A)
        object.__setattr__(self, "ineq_rhs", b)
        if self.var_bounds is not None:
            lo, hi = self.var_bounds
            lo = np.broadcast_to(np.asarray(lo, dtype=float), c.shape).copy()
            hi = np.broadcast_to(np.asarray(hi, dtype=float), c.shape).copy()
            object.__setattr__(self, "var_bounds", (lo, hi))


@dataclass(frozen=True)
class QuadraticProgram:
    """min 1/2 x'Hx + g'x  s.t.  ineq_matrix @ x <= ineq_rhs."""

    hessian: np.ndarray
    gradient: np.ndarray
    ineq_matrix: np.ndarray
    ineq_rhs: np.ndarray

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.gradient, dtype=float))
        H = np.asarray(self.hessian, dtype=float).reshape(g.size, g.size)
        A = np.asarray(self.ineq_matrix, dtype=float).reshape(-1, g.size)
        b = np.atleast_1d(np.asarray(self.ineq_rhs, dtype=float))
        if A.shape[0] != b.size:
            raise ValueError(f"row count {A.shape[0]} != rhs length {b.size}")
        object.__setattr__(self, "hessian", H)
        object.__setattr__(self, "gradient", g)
        object.__setattr__(self, "ineq_matrix", A)
        object.__setattr__(self, "ineq_rhs", b)


@dataclass
class SolveReport:
    status: str
    solution: np.ndarray
    objective: float
    active_set: list = field(default_factory=list)
    multipliers: Optional[np.ndarray] = None
    iterations: int = 0

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


# ---------------------------------------------------------------------------
# Linear programming
# ---------------------------------------------------------------------------

def _standardize(lp: LinearProgram):
    """Map x = T y + shift with y >= 0 and collect the <= rows in y."""
    d = lp.cost.size
    if lp.var_bounds is None:
        lo = np.full(d, -np.inf)
        hi = np.full(d, np.inf)
    else:
        lo, hi = lp.var_bounds
    if np.any(lo > hi + FEAS_TOL):
        return None
    cols = []
    shift = np.zeros(d)
    extra_rows = []
    for j in range(d):
        if np.isfinite(lo[j]):
            shift[j] = lo[j]
            cols.append((j, 1.0))
            if np.isfinite(hi[j]):
                extra_rows.append((len(cols) - 1, hi[j] - lo[j]))
        elif np.isfinite(hi[j]):
            shift[j] = hi[j]
            cols.append((j, -1.0))
        else:
            cols.append((j, 1.0))
            cols.append((j, -1.0))
    T = np.zeros((d, len(cols)))
    for k, (j, s) in enumerate(cols):
        T[j, k] = s
    A = lp.ineq_matrix @ T
    b = lp.ineq_rhs - lp.ineq_matrix @ shift
    if extra_rows:
        E = np.zeros((len(extra_rows), len(cols)))
        e = np.zeros(len(extra_rows))
        for r, (k, ub) in enumerate(extra_rows):
            E[r, k] = 1.0
            e[r] = ub
        A = np.vstack([A, E])
        b = np.concatenate([b, e])
    return T, shift, A, b


def _pivot(tab, basis, row, col):
    tab[row] /= tab[row, col]
    pcol = tab[:, col].copy()
    pcol[row] = 0.0
    tab -= np.outer(pcol, tab[row])
    basis[row] = col


def _simplex(tab, basis, ncols, max_iter):
    """Primal simplex on a tableau whose last row is the cost.

    Dantzig pricing; after a run of degenerate pivots it switches to
    Bland's rule, which cannot cycle. Only the first ``ncols`` columns may
    enter. Returns a status string.
    """
    m = tab.shape[0] - 1
    degenerate_run = 0
    for it in range(max_iter):
        red = tab[-1, :ncols]
        scale = max(1.0, np.abs(red).max(initial=0.0))
        entering = np.flatnonzero(red < -OPT_TOL * scale)
        if entering.size == 0:
            return OPTIMAL, it
        bland = degenerate_run >= 50
        col = int(entering[0]) if bland else int(entering[np.argmin(red[entering])])
        colvals = tab[:m, col]
        pos = colvals > FEAS_TOL
        if not np.any(pos):
            return UNBOUNDED, it
        ratios = np.full(m, np.inf)
        ratios[pos] = tab[:m, -1][pos] / colvals[pos]
        best = ratios.min()
        ties = np.flatnonzero(ratios <= best + FEAS_TOL * max(1.0, abs(best)))
        if bland:
            row = int(ties[np.argmin(np.asarray(basis)[ties])])
        else:
            # largest pivot among the tied rows for stability
            row = int(ties[np.argmax(colvals[ties])])
        degenerate_run = degenerate_run + 1 if best <= FEAS_TOL else 0
        _pivot(tab, basis, row, col)
    return MAX_ITER, max_iter


def _phase_one(A, b, max_iter):
    """Feasible basis for A y <= b, y >= 0 (with b of any sign).

    Returns (status, tableau, basis, n_active_cols, iterations); the
    tableau's last row is left for the caller to overwrite.
    """
    m, n = A.shape
    neg = b < 0
    A = np.where(neg[:, None], -A, A)
    b = np.abs(b)
    slack_sign = np.where(neg, -1.0, 1.0)
    n_art = int(neg.sum())
    ncols = n + m + n_art
    tab = np.zeros((m + 1, ncols + 1))
    tab[:m, :n] = A
    tab[:m, n:n + m] = np.diag(slack_sign)
    tab[:m, -1] = b
    basis = list(range(n, n + m))
    art_rows = np.flatnonzero(neg)
    for k, i in enumerate(art_rows):
        tab[i, n + m + k] = 1.0
        basis[i] = n + m + k
    if not n_art:
        return OPTIMAL, tab, basis, ncols, 0

    # minimise the sum of artificials
    tab[-1, n + m:ncols] = 1.0
    for i in art_rows:
        tab[-1] -= tab[i]
    status, it = _simplex(tab, basis, ncols, max_iter)
    if status == MAX_ITER:
        return MAX_ITER, None, None, 0, it
    resid = -tab[-1, -1]
    if resid > FEAS_TOL * max(1.0, np.abs(b).max(initial=0.0)):
        return INFEASIBLE, None, None, 0, it
    # drive remaining artificials out of the basis
    keep = np.ones(m, dtype=bool)
    for i in range(m):
        if basis[i] >= n + m:
            cand = np.flatnonzero(np.abs(tab[i, :n + m]) > FEAS_TOL)
            if cand.size:
                _pivot(tab, basis, i, int(cand[0]))
            else:
                keep[i] = False
    if not keep.all():
        rows = np.concatenate([np.flatnonzero(keep), [m]])
        tab = tab[rows]
        basis = [basis[i] for i in np.flatnonzero(keep)]
    tab = np.hstack([tab[:, :n + m], tab[:, -1:]])
    return OPTIMAL, tab, basis, n + m, it


def _phase_two(lp, cost, T, shift, tab, basis, ncols, n, max_iter):
    cost_y = T.T @ cost
    tab[-1, :] = 0.0
    tab[-1, :n] = cost_y
    for i, bv in enumerate(basis):
        if tab[-1, bv] != 0.0:
            tab[-1] -= tab[-1, bv] * tab[i]
    status, it = _simplex(tab, basis, ncols, max_iter)
    y = np.zeros(ncols)
    for i, bv in enumerate(basis):
        y[bv] = tab[i, -1]
    x = T @ y[:n] + shift
    if status != OPTIMAL:
        return SolveReport(status, x, np.nan, iterations=it)
    resid = lp.ineq_matrix @ x - lp.ineq_rhs
    scale = np.maximum(1.0, np.abs(lp.ineq_rhs))
    active = [int(i) for i in np.flatnonzero(np.abs(resid) <= 1e3 * FEAS_TOL * scale)]
    return SolveReport(OPTIMAL, x, float(cost @ x), active, iterations=it)


def solve_lp_many(lp: LinearProgram, costs, max_iter: int = 5000) -> list:
    """Solve one feasible region against several cost vectors.

    Phase 1 runs once; every phase 2 restarts from the same feasible basis.
    ``lp.cost`` only fixes the dimension.
    """
    d = lp.cost.size
    costs = [np.asarray(c, dtype=float).reshape(d) for c in costs]
    std = _standardize(lp)
    if std is None:
        return [SolveReport(INFEASIBLE, np.full(d, np.nan), np.nan) for _ in costs]
    T, shift, A, b = std
    n = A.shape[1]
    status, tab, basis, ncols, it1 = _phase_one(A, b, max_iter)
    if status != OPTIMAL:
        return [SolveReport(status, np.full(d, np.nan), np.nan, iterations=it1) for _ in costs]
    reports = []
    for c in costs:
        rep = _phase_two(lp, c, T, shift, tab.copy(), list(basis), ncols, n, max_iter)
        rep.iterations += it1
        reports.append(rep)
    return reports


def solve_lp(lp: LinearProgram, max_iter: int = 5000) -> SolveReport:
    """Two-phase dense simplex (Dantzig pricing, Bland fallback).

    Unboundedness and infeasibility come back as a status, never as an
    exception.
    """
    return solve_lp_many(lp, [lp.cost], max_iter)[0]


def find_feasible_point(A, b, lo=None, hi=None):
    """Phase-1 only: a vertex of {A x <= b}, or ``None`` if empty."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    d = A.shape[1]
    bounds = None if lo is None else (lo, hi)
    # row equilibration; the feasible set is unchanged but pivots stay well scaled
    norms = np.abs(A).max(axis=1) if A.size else np.zeros(0)
    norms = np.where(norms > 0, norms, 1.0)
    rep = solve_lp(LinearProgram(np.zeros(d), A / norms[:, None], b / norms, bounds))
    return rep.solution if rep.ok else None


# ---------------------------------------------------------------------------
# Quadratic programming
# ---------------------------------------------------------------------------

def _eqp_step(H, grad, Aw):
    """Solve min 1/2 p'Hp + grad'p s.t. Aw p = 0; return (p, mu)."""
    d = H.shape[0]
    k = Aw.shape[0]
    if k == 0:
        return np.linalg.solve(H, -grad), np.zeros(0)
    K = np.zeros((d + k, d + k))
    K[:d, :d] = H
    K[:d, d:] = Aw.T
    K[d:, :d] = Aw
    rhs = np.concatenate([-grad, np.zeros(k)])
    sol = np.linalg.solve(K, rhs)
    return sol[:d], sol[d:]


def solve_qp(qp: QuadraticProgram, max_iter: int = 200, x0=None) -> SolveReport:
    """Primal active-set method.

    A feasible start comes from an LP phase 1 when the unconstrained minimum
    is infeasible. Ties (blocking constraint, constraint to drop) are broken
    by the lowest constraint index so runs are reproducible.
    """
    H, g, A, b = qp.hessian, qp.gradient, qp.ineq_matrix, qp.ineq_rhs
    d = g.size
    try:
        np.linalg.cholesky(0.5 * (H + H.T))
    except np.linalg.LinAlgError:
        raise ValueError("QP hessian is not symmetric positive definite")
    r = A.shape[0]
    scale = np.maximum(1.0, np.abs(b))

    x = np.linalg.solve(H, -g)
    if r == 0 or np.all(A @ x - b <= FEAS_TOL * scale):
        active = [int(i) for i in np.flatnonzero(np.abs(A @ x - b) <= FEAS_TOL * scale)] if r else []
        return SolveReport(OPTIMAL, x, float(0.5 * x @ H @ x + g @ x), active,
                           np.zeros(r), 0)

    if x0 is not None and np.all(A @ x0 - b <= FEAS_TOL * scale):
        x = np.array(x0, dtype=float)
    else:
        x = find_feasible_point(A, b)
        if x is None:
            return SolveReport(INFEASIBLE, np.full(d, np.nan), np.nan)

    # initial working set: tight rows that keep A_W full row rank
    work: list[int] = []
    for i in np.flatnonzero(np.abs(A @ x - b) <= FEAS_TOL * scale):
        trial = work + [int(i)]
        if len(trial) <= d and np.linalg.matrix_rank(A[trial]) == len(trial):
            work = trial

    mult = np.zeros(r)
    for it in range(1, max_iter + 1):
        grad = H @ x + g
        Aw = A[work] if work else np.zeros((0, d))
        p, mu = _eqp_step(H, grad, Aw)
        if np.linalg.norm(p) <= OPT_TOL * max(1.0, np.linalg.norm(x)):
            # KKT: grad + Aw' lam = 0 with lam >= 0 for the <= rows
            if work:
                lam = np.linalg.lstsq(Aw.T, -grad, rcond=None)[0]
            else:
                lam = np.zeros(0)
            if lam.size == 0 or lam.min() >= -OPT_TOL:
                mult = np.zeros(r)
                mult[work] = np.maximum(lam, 0.0)
                return SolveReport(OPTIMAL, x, float(0.5 * x @ H @ x + g @ x),
                                   sorted(work), mult, it)
            worst = lam.min()
            # lowest constraint index among equally negative multipliers
            cands = [work[k] for k, v in enumerate(lam) if v <= worst + OPT_TOL * abs(worst)]
            work.remove(min(cands))
            continue
        Ap = A @ p
        slack = b - A @ x
        step = 1.0
        block = None
        for i in range(r):
            if i in work or Ap[i] <= FEAS_TOL:
                continue
            t = max(slack[i], 0.0) / Ap[i]
            if t < step - 1e-15:
                step, block = t, i
        x = x + step * p
        if block is not None:
            work.append(block)
    return SolveReport(MAX_ITER, x, float(0.5 * x @ H @ x + g @ x), sorted(work), mult, max_iter)


# ---------------------------------------------------------------------------
# Smooth unconstrained minimisation
# ---------------------------------------------------------------------------

def minimize_smooth(objective: Callable, gradient: Callable, x0, opts: Optional[dict] = None,
                    precondition: Optional[Callable] = None) -> SolveReport:
    """Descent with Armijo backtracking (c = 1e-4, halving).

    ``opts``: ``max_iter``, ``grad_tol`` (gradient norm) and ``f_tol``
    (relative decrease of an accepted step below which the search stops).
    ``precondition(x, g)`` may return a scaled direction ``P g`` with ``P``
    positive definite; the default is steepest descent. Every accepted step
    strictly lowers the objective.
    """
    opts = dict(opts or {})
    max_iter = int(opts.get("max_iter", 500))
    grad_tol = float(opts.get("grad_tol", 1e-8))
    f_tol = float(opts.get("f_tol", 0.0))
    c1 = 1e-4

    x = np.array(x0, dtype=float)
    f = float(objective(x))
    g = np.asarray(gradient(x), dtype=float)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise NonFiniteIterateError("non-finite objective or gradient at start", x)
    history = [f]
    for it in range(max_iter):
        if np.linalg.norm(g) <= grad_tol:
            return SolveReport(OPTIMAL, x, f, iterations=it, multipliers=np.array(history))
        d = -g
        if precondition is not None:
            pd = -np.asarray(precondition(x, g), dtype=float)
            if np.all(np.isfinite(pd)) and pd @ g < 0:
                d = pd
        slope = float(g @ d)
        step = 1.0
        while True:
            xn = x + step * d
            fn = objective(xn)
            if np.isfinite(fn) and fn <= f + c1 * step * slope and fn < f:
                break
            step *= 0.5
            if step < 1e-20:
                return SolveReport(STALLED, x, f, iterations=it, multipliers=np.array(history))
        decrease = f - float(fn)
        x, f = xn, float(fn)
        g = np.asarray(gradient(x), dtype=float)
        if not np.all(np.isfinite(g)):
            raise NonFiniteIterateError("non-finite gradient at accepted iterate", x)
        history.append(f)
        if decrease <= f_tol * max(1.0, abs(f)):
            return SolveReport(OPTIMAL, x, f, iterations=it + 1, multipliers=np.array(history))
    status = OPTIMAL if np.linalg.norm(g) <= grad_tol else MAX_ITER
    return SolveReport(status, x, f, iterations=max_iter, multipliers=np.array(history))
