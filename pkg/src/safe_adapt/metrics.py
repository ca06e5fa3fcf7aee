"""Control contraction metrics: families, gridded C1/C2 checks, synthesis.

The dual metric W = M^-1 must satisfy on the region of interest

    C1:  B_perp' (W A' + A W - Wdot + 2 lam W) B_perp  <= 0
    C2:  d_{b_i} W - W (db_i/dx)' - (db_i/dx) W = 0

Both are checked pointwise on a state grid (and at the vertices of the
parameter box for the theta-dependent drift).
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .sysmodel import UncertainSystem, eval_closed_loop_jacobian

log = logging.getLogger(__name__)

TOL_C1 = 1e-6
TOL_C2 = 1e-8


class MetricError(ValueError):
    """W is not symmetric positive definite at an evaluated point."""

    def __init__(self, message, point=None, locate=None):
        super().__init__(message)
        self._point = point
        self._locate = locate

    @property
    def point(self):
        # line searches raise and catch this often, so locating the point is deferred
        if self._point is None and self._locate is not None:
            self._point = self._locate()
        return self._point

    def __str__(self):
        base = super().__str__()
        return base if self.point is None else f"{base} at {np.array2string(np.asarray(self.point))}"


class SynthesisError(RuntimeError):
    def __init__(self, message, best_margin):
        super().__init__(f"{message} (best C1 margin {best_margin:.3e})")
        self.best_margin = best_margin


class MetricFamily:
    """Dual metric W(x, theta_hat) with contraction rate ``lam``.

    Subclasses provide ``eval_W`` and ``grad_W`` (all partials dW/dx_i,
    shape (n, n, n)). Batched versions default to loops.
    """

    lam: float = 0.0
    param_dependent: bool = False
    dim: int = 0
    # index of the only state W depends on, if any (enables cheaper geodesics)
    single_coordinate: Optional[int] = None

    def eval_W(self, x, theta_hat=None) -> np.ndarray:
        raise NotImplementedError

    def grad_W(self, x, theta_hat=None) -> np.ndarray:
        raise NotImplementedError

    def eval_M(self, x, theta_hat=None) -> np.ndarray:
        return np.linalg.inv(self.eval_W(x, theta_hat))

    def dW_dx(self, x, theta_hat, v) -> np.ndarray:
        """Directional derivative sum_i dW/dx_i v_i."""
        return np.tensordot(np.asarray(v, dtype=float), self.grad_W(x, theta_hat), axes=(0, 0))

    def W_batch(self, X, theta_hat=None):
        return np.array([self.eval_W(x, theta_hat) for x in X])

    def grad_W_batch(self, X, theta_hat=None):
        return np.array([self.grad_W(x, theta_hat) for x in X])

    def hess_W_batch(self, X, theta_hat=None, step=1e-6):
        """Second partials d2W/dx_i dx_j, shape (K, n, n, n, n).

        Central differences of ``grad_W_batch`` unless overridden.
        """
        X = np.asarray(X, dtype=float)
        n = X.shape[1]
        out = np.zeros((len(X), n) + (n,) * 3)
        for j in range(n):
            e = np.zeros(n)
            e[j] = step
            out[:, :, j] = (self.grad_W_batch(X + e, theta_hat) - self.grad_W_batch(X - e, theta_hat)) / (2 * step)
        return 0.5 * (out + np.swapaxes(out, 1, 2))

    def M_derivatives(self, X, theta_hat=None, order=0):
        """M and, up to ``order``, its first and second state partials.

        Returns ``M`` (K, n, n), ``dM`` (K, n, n, n) with dM[k, i] = dM/dx_i
        and ``d2M`` (K, n, n, n, n) with d2M[k, i, j] = d2M/dx_i dx_j.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        W = self.W_batch(X, theta_hat)
        try:
            np.linalg.cholesky(W)
        except np.linalg.LinAlgError:
            eig = np.linalg.eigvalsh(W).min(axis=1)
            bad = int(np.argmin(eig))
            raise MetricError("W not positive definite", X[bad])
        M = np.linalg.inv(W)
        if order == 0:
            return (M,)
        dW = self.grad_W_batch(X, theta_hat)
        MdW = np.einsum("kab,kibc->kiac", M, dW)
        dM = -np.einsum("kiac,kcd->kiad", MdW, M)
        if order == 1:
            return M, dM
        d2W = self.hess_W_batch(X, theta_hat)
        # d2M_ij = M (dW_i M dW_j + dW_j M dW_i - d2W_ij) M
        cross = np.einsum("kiab,kjbc->kijac", MdW, MdW)
        d2M = np.einsum("kijac,kcd->kijad", cross + np.swapaxes(cross, 1, 2), M)
        d2M -= np.einsum("kab,kijbc,kcd->kijad", M, d2W, M)
        return M, dM, d2M

    def M_batch(self, X, theta_hat=None, with_grad=False):
        """M at each row of X, optionally with dM/dx_i (shape (K, n, n, n))."""
        out = self.M_derivatives(X, theta_hat, order=1 if with_grad else 0)
        return out if with_grad else out[0]


class ConstantMetric(MetricFamily):
    def __init__(self, W, lam=0.0):
        self.W = np.atleast_2d(np.asarray(W, dtype=float))
        self.dim = self.W.shape[0]
        self.lam = lam
        self._M = np.linalg.inv(self.W)

    def eval_W(self, x, theta_hat=None):
        return self.W.copy()

    def grad_W(self, x, theta_hat=None):
        return np.zeros((self.dim,) * 3)

    def W_batch(self, X, theta_hat=None):
        return np.broadcast_to(self.W, (len(X),) + self.W.shape).copy()

    def grad_W_batch(self, X, theta_hat=None):
        return np.zeros((len(X),) + (self.dim,) * 3)

    def hess_W_batch(self, X, theta_hat=None):
        return np.zeros((len(X),) + (self.dim,) * 4)


class FunctionMetric(MetricFamily):
    """W and its partials from user callables (toy metrics, tests)."""

    def __init__(self, W_fn, grad_fn, dim, lam=0.0):
        self._W = W_fn
        self._grad = grad_fn
        self.dim = dim
        self.lam = lam

    def eval_W(self, x, theta_hat=None):
        return np.asarray(self._W(np.asarray(x, dtype=float)), dtype=float)

    def grad_W(self, x, theta_hat=None):
        return np.asarray(self._grad(np.asarray(x, dtype=float)), dtype=float)


class PolynomialMetric(MetricFamily):
    """W(x) = sum_j coeffs[j] * x[coord]**j with symmetric coefficients."""

    def __init__(self, coeffs: Sequence, coord: int = 1, lam: float = 0.0):
        C = np.array([np.asarray(c, dtype=float) for c in coeffs])
        if C.ndim != 3 or C.shape[1] != C.shape[2]:
            raise ValueError("coefficients must be a list of square matrices")
        if not np.allclose(C, np.swapaxes(C, 1, 2)):
            raise ValueError("coefficient matrices must be symmetric")
        self.coeffs = 0.5 * (C + np.swapaxes(C, 1, 2))
        self.coord = coord
        self.single_coordinate = coord
        self.dim = C.shape[1]
        self.lam = lam
        deg = len(C) - 1
        self._dcoeffs = np.array([j * self.coeffs[j] for j in range(1, deg + 1)]) if deg else np.zeros((1, self.dim, self.dim))

    @property
    def degree(self):
        return len(self.coeffs) - 1

    def _poly(self, s, C):
        # Horner; cheaper than tensordot for the short coefficient stacks used here
        s = np.asarray(s, dtype=float)[..., None, None]
        out = np.broadcast_to(C[-1], s.shape[:-2] + C.shape[1:]).copy()
        for Cj in C[-2::-1]:
            out *= s
            out += Cj
        return out

    def eval_W(self, x, theta_hat=None):
        return self._poly(np.asarray(x[self.coord], dtype=float), self.coeffs)

    def grad_W(self, x, theta_hat=None):
        g = np.zeros((self.dim,) * 3)
        g[self.coord] = self._poly(np.asarray(x[self.coord], dtype=float), self._dcoeffs)
        return g

    def W_batch(self, X, theta_hat=None):
        return self._poly(np.asarray(X)[:, self.coord], self.coeffs)

    def grad_W_batch(self, X, theta_hat=None):
        X = np.asarray(X)
        g = np.zeros((len(X),) + (self.dim,) * 3)
        g[:, self.coord] = self._poly(X[:, self.coord], self._dcoeffs)
        return g

    def hess_W_batch(self, X, theta_hat=None):
        X = np.asarray(X)
        h = np.zeros((len(X),) + (self.dim,) * 4)
        if self.degree >= 2:
            C2 = np.array([j * (j - 1) * self.coeffs[j] for j in range(2, self.degree + 1)])
            h[:, self.coord, self.coord] = self._poly(X[:, self.coord], C2)
        return h

    def coordinate_W(self, s):
        """W, dW/ds and d2W/ds2 at coordinate values ``s`` (each (K, n, n))."""
        s = np.asarray(s, dtype=float)
        deg = self.degree
        C2 = (np.array([j * (j - 1) * self.coeffs[j] for j in range(2, deg + 1)])
              if deg >= 2 else np.zeros((1, self.dim, self.dim)))
        return self._poly(s, self.coeffs), self._poly(s, self._dcoeffs), self._poly(s, C2)

    def to_rows(self):
        """Coefficient matrices as row-major, semicolon-separated strings."""
        return [";".join(",".join(repr(float(v)) for v in row) for row in C) for C in self.coeffs]

    @classmethod
    def from_rows(cls, rows: Sequence[str], coord=1, lam=0.0):
        mats = []
        for text in rows:
            mats.append(np.array([[float(v) for v in r.split(",")] for r in text.split(";") if r.strip()]))
        return cls(mats, coord=coord, lam=lam)


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

@dataclass
class CcmReport:
    c1_worst_eig: float
    c2_worst_residual: float
    grid_size: int
    lam: float
    violations: list = field(default_factory=list)
    tol_c1: float = TOL_C1
    tol_c2: float = TOL_C2
    message: str = ""

    @property
    def passed(self) -> bool:
        return (self.c1_worst_eig <= self.tol_c1 and self.c2_worst_residual <= self.tol_c2
                and not self.message)


def c1_matrix(family: MetricFamily, sys: UncertainSystem, x, theta, lam=None) -> np.ndarray:
    """B_perp' (W A' + A W - Wdot + 2 lam W) B_perp at (x, theta), u = 0.

    Wdot is taken along the drift f - Delta' theta.
    """
    lam = family.lam if lam is None else lam
    x = np.asarray(x, dtype=float)
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    W = family.eval_W(x, theta)
    A = eval_closed_loop_jacobian(sys, x, np.zeros(sys.dim_u), theta)
    drift = sys.f(x) - sys.delta(x).T @ theta
    Wdot = family.dW_dx(x, theta, drift)
    P = sys.B_perp(x)
    return P.T @ (W @ A.T + A @ W - Wdot + 2.0 * lam * W) @ P


def c2_residual(family: MetricFamily, sys: UncertainSystem, x, theta_hat=None) -> float:
    """max_i || d_{b_i} W - W (db_i/dx)' - (db_i/dx) W ||_F."""
    x = np.asarray(x, dtype=float)
    W = family.eval_W(x, theta_hat)
    grads = family.grad_W(x, theta_hat)
    B = sys.B(x)
    worst = 0.0
    for i, J in enumerate(sys.jac_b_cols(x)):
        dbW = np.tensordot(B[:, i], grads, axes=(0, 0))
        worst = max(worst, float(np.linalg.norm(dbW - W @ J.T - J @ W)))
    return worst


def verify_ccm(family: MetricFamily, sys: UncertainSystem, grid, theta_vertices,
               lam=None, tol_c1=TOL_C1, tol_c2=TOL_C2, max_violations=20) -> CcmReport:
    """Worst-case C1 eigenvalue and C2 residual over grid x parameter vertices."""
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty verification grid")
    lam = family.lam if lam is None else lam
    vertices = [np.atleast_1d(np.asarray(v, dtype=float)) for v in theta_vertices] or [np.zeros(sys.dim_theta)]
    worst1, worst2 = -np.inf, 0.0
    violations = []
    for x in grid:
        for th in vertices:
            W = family.eval_W(x, th)
            eigW = np.linalg.eigvalsh(0.5 * (W + W.T))
            if eigW[0] <= 0 or not np.allclose(W, W.T, atol=1e-12):
                return CcmReport(np.inf, np.inf, len(grid), lam, [(x, th)], tol_c1, tol_c2,
                                 message=f"W not SPD at x={x}")
            C = c1_matrix(family, sys, x, th, lam)
            e1 = float(np.linalg.eigvalsh(C).max()) if C.size else -np.inf
            e2 = c2_residual(family, sys, x, th)
            if (e1 > tol_c1 or e2 > tol_c2) and len(violations) < max_violations:
                violations.append((x.copy(), th.copy()))
            worst1 = max(worst1, e1)
            worst2 = max(worst2, e2)
    return CcmReport(worst1, worst2, len(grid), lam, violations, tol_c1, tol_c2)


def box_vertices(lower, upper):
    return [np.array(v) for v in itertools.product(*zip(lower, upper))]


def pitch_grid(alpha_range_deg, q_range_deg, n_alpha=25, n_q=25):
    """States (0, alpha, q) on a rectangular grid given in degrees."""
    a = np.deg2rad(np.linspace(*alpha_range_deg, n_alpha))
    q = np.deg2rad(np.linspace(*q_range_deg, n_q))
    A, Q = np.meshgrid(a, q, indexing="ij")
    return np.column_stack([np.zeros(A.size), A.ravel(), Q.ravel()])


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------

def _sym_basis(n):
    basis = []
    for a in range(n):
        for b in range(a, n):
            E = np.zeros((n, n))
            E[a, b] = E[b, a] = 1.0
            basis.append(E)
    return basis


def _template_maps(sys, grid, vertices, lam, coord, deg):
    """Linear maps from template coefficients to C1 blocks and to W."""
    n = sys.dim_x
    sym = _sym_basis(n)
    c1_maps, w_maps = [], []
    for x in grid:
        s = x[coord]
        P = sys.B_perp(x)
        Wk = np.array([s ** j * E for j in range(deg + 1) for E in sym])
        dWk = np.array([(j * s ** (j - 1) if j else 0.0) * E for j in range(deg + 1) for E in sym])
        w_maps.append(Wk)
        for th in vertices:
            A = eval_closed_loop_jacobian(sys, x, np.zeros(sys.dim_u), th)
            sdot = (sys.f(x) - sys.delta(x).T @ th)[coord]
            G = Wk @ np.swapaxes(A, 0, 1) + A @ Wk - sdot * dWk + 2.0 * lam * Wk
            c1_maps.append(np.einsum("ia,kab,bj->kij", P.T, G, P))
    c1 = np.array(c1_maps)
    # pitch-like systems give identical blocks at every parameter vertex
    c1 = np.unique(np.round(c1, 12), axis=0)
    return sym, c1, np.array(w_maps)


def synthesize_quadratic_metric(sys: UncertainSystem, grid, lam: float, template_degree: int = 2,
                                theta_vertices=None, coord: int = 1, pd_grid=None,
                                margin: float = 1e-3, cond_cap: float = 1e9) -> PolynomialMetric:
    """Find W(x) = sum_j W_j x[coord]^j passing C1 on ``grid`` at rate ``lam``.

    C1 and the bounds I <= W <= s I are linear matrix inequalities in the
    template coefficients, so the search is a small semidefinite program
    (one 2x2-ish block per grid point). Among the feasible metrics the one
    with the smallest upper eigenvalue bound s is returned.

    The template only depends on x[coord]; C2 must hold structurally (true
    when B is constant with no component along x[coord]). Raises
    SynthesisError, carrying the best C1 eigenvalue any bounded metric
    reaches, when no template member achieves ``-margin``.
    """
    try:
        import cvxpy as cp
    except ImportError as exc:  # pragma: no cover - optional extra
        raise ImportError("metric synthesis needs the 'synthesis' extra (cvxpy)") from exc

    grid = np.asarray(grid, dtype=float)
    if theta_vertices is None:
        theta_vertices = [np.zeros(sys.dim_theta)]
    vertices = [np.atleast_1d(np.asarray(v, dtype=float)) for v in theta_vertices]
    deg = template_degree
    sym, c1_maps, w_maps = _template_maps(sys, grid, vertices, lam, coord, deg)
    if pd_grid is not None:
        extra = [np.array([x[coord] ** j * E for j in range(deg + 1) for E in sym])
                 for x in np.asarray(pd_grid, dtype=float)]
        w_maps = np.concatenate([w_maps, np.array(extra)])
    w_maps = np.unique(np.round(w_maps, 12), axis=0)
    nc = c1_maps.shape[1]
    r = c1_maps.shape[2]
    n = sys.dim_x

    c = cp.Variable(nc)
    t = cp.Variable()
    s = cp.Variable()

    def lmi(maps, k):
        G = maps.reshape(len(maps), nc, k * k)
        return [cp.reshape(G[i].T @ c, (k, k), order="C") for i in range(len(maps))]

    C1 = lmi(c1_maps, r) if r else []
    Wp = lmi(w_maps, n)
    eye_r, eye_n = np.eye(r), np.eye(n)
    sym_part = lambda X: 0.5 * (X + X.T)

    def solve(objective, cons):
        prob = cp.Problem(objective, cons)
        try:
            prob.solve(solver=cp.CLARABEL)
        except cp.SolverError:
            return None
        if prob.status not in ("optimal", "optimal_inaccurate"):
            return None
        return prob

    # smallest-eigenvalue-bound metric with the requested margin
    cons = [sym_part(C) << -margin * eye_r for C in C1]
    cons += [sym_part(W) >> eye_n for W in Wp] + [sym_part(W) << s * eye_n for W in Wp]
    cons += [s <= cond_cap]
    prob = solve(cp.Minimize(s), cons)
    if prob is None:
        # how close can a bounded metric get
        cons = [sym_part(C) << t * eye_r for C in C1]
        cons += [sym_part(W) >> eye_n for W in Wp] + [sym_part(W) << cond_cap * eye_n for W in Wp]
        best = solve(cp.Minimize(t), cons)
        best_margin = float(t.value) if best is not None else np.inf
        raise SynthesisError(f"no degree-{deg} metric passes C1 at lam={lam}", best_margin)

    coef = np.asarray(c.value)
    nb = len(sym)
    coeffs = [sum(coef[j * nb + k] * sym[k] for k in range(nb)) for j in range(deg + 1)]
    family = PolynomialMetric(coeffs, coord=coord, lam=lam)
    # interior-point solutions sit on the constraint boundary up to solver
    # tolerance; scale up slightly so W >= I holds exactly on the grid
    low = np.linalg.eigvalsh(family.W_batch(grid)).min()
    if low < 1.0:
        family = PolynomialMetric([C / low for C in family.coeffs], coord=coord, lam=lam)
    log.info("synthesized metric at lam=%g with eigenvalue bound %.3g", lam, float(s.value))
    return family


def bisect_rate(sys, grid, lam_hi, lam_lo=0.0, iters=12, **kwargs):
    """Largest rate in [lam_lo, lam_hi] for which synthesis succeeds."""
    best = None
    for _ in range(iters):
        mid = 0.5 * (lam_lo + lam_hi)
        try:
            best = synthesize_quadratic_metric(sys, grid, mid, **kwargs)
            lam_lo = mid
        except SynthesisError:
            lam_hi = mid
    return lam_lo, best
