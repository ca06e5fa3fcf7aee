import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from safe_adapt.metrics import (
    ConstantMetric,
    FunctionMetric,
    MetricError,
    PolynomialMetric,
    SynthesisError,
    box_vertices,
    c1_matrix,
    c2_residual,
    pitch_grid,
    synthesize_quadratic_metric,
    verify_ccm,
)
from safe_adapt.sysmodel import linear_system, pitch_system

from oracles import finite_difference_jacobian, pitch_c1_oracle

PITCH_VERTICES = box_vertices([0.1, -3.0], [0.8, 1.0])
GRID_1 = ((-5, 50), (-10, 50))


def random_poly_metric(seed, lam=0.3):
    rng = np.random.default_rng(seed)
    mats = []
    for j in range(3):
        R = rng.standard_normal((3, 3))
        mats.append(R @ R.T + (5 * np.eye(3) if j == 0 else 0))
    return PolynomialMetric(mats, coord=1, lam=lam)


class TestFamilies:
    def test_inverse_consistency(self):
        m = random_poly_metric(0)
        for a in np.linspace(-0.5, 0.5, 7):
            x = np.array([0.0, a, 0.0])
            assert m.eval_M(x) @ m.eval_W(x) == pytest.approx(np.eye(3), abs=1e-9)

    def test_gradient_matches_finite_differences(self):
        m = random_poly_metric(1)
        x = np.array([0.2, 0.3, -0.1])
        fd = finite_difference_jacobian(m.eval_W, x)
        assert np.moveaxis(m.grad_W(x), 0, -1) == pytest.approx(fd, abs=1e-6)

    def test_metric_derivatives_match_finite_differences(self):
        m = random_poly_metric(2)
        X = np.array([[0.0, 0.1, 0.0], [0.0, -0.3, 0.5]])
        M, dM, d2M = m.M_derivatives(X, order=2)
        for k, x in enumerate(X):
            fd = finite_difference_jacobian(lambda z: m.eval_M(z), x)
            assert np.moveaxis(dM[k], 0, -1) == pytest.approx(fd, abs=1e-6)
            fd2 = finite_difference_jacobian(lambda z: np.moveaxis(m.M_derivatives(z[None], order=1)[1][0], 0, -1), x)
            assert np.moveaxis(d2M[k], (0, 1), (-1, -2)) == pytest.approx(fd2, abs=1e-5)

    def test_coordinate_derivatives(self):
        m = random_poly_metric(3)
        s = np.array([-0.4, 0.0, 0.7])
        W, W1, W2 = m.coordinate_W(s)
        C0, C1, C2 = m.coeffs
        assert W1 == pytest.approx(np.array([C1 + 2 * v * C2 for v in s]))
        assert W2 == pytest.approx(np.array([2 * C2] * 3))

    def test_rows_round_trip(self):
        m = random_poly_metric(4)
        back = PolynomialMetric.from_rows(m.to_rows(), coord=1, lam=m.lam)
        assert np.array_equal(back.coeffs, m.coeffs)

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            PolynomialMetric([np.array([[1.0, 2.0], [0.0, 1.0]])])

    def test_non_pd_point_reported(self):
        m = PolynomialMetric([np.eye(2), np.zeros((2, 2)), -np.eye(2)], coord=0)
        with pytest.raises(MetricError) as info:
            m.M_derivatives(np.array([[0.0, 0.0], [2.0, 0.0]]))
        assert info.value.point == pytest.approx([2.0, 0.0])

    def test_point_located_lazily(self):
        calls = []

        def locate():
            calls.append(1)
            return np.array([3.0])

        err = MetricError("W not positive definite", locate=locate)
        assert not calls
        assert "3." in str(err) and err.point == pytest.approx([3.0])
        err.point
        assert len(calls) == 1


class TestVerification:
    def test_lyapunov_oracle_constant_metric_passes(self):
        A = np.array([[-1.0, 2.0, 0.0], [0.0, -2.0, 1.0], [0.0, 0.0, -3.0]])
        B = np.array([0.0, 0.0, 1.0])
        lam = 0.4
        # (A + lam I) W + W (A + lam I)' = -I has an SPD solution since A + lam I is Hurwitz
        W = scipy.linalg.solve_continuous_lyapunov(A + lam * np.eye(3), -np.eye(3))
        sys = linear_system(A, B)
        rng = np.random.default_rng(0)
        report = verify_ccm(ConstantMetric(W, lam), sys, rng.uniform(-1, 1, (30, 3)), [np.zeros(1)])
        assert report.passed
        assert report.c1_worst_eig == pytest.approx(-1.0, abs=1e-9)

    def test_identity_on_pitch_grid_matches_eigensolve(self):
        sys = pitch_system()
        grid = pitch_grid(*GRID_1)
        report = verify_ccm(ConstantMetric(np.eye(3), 0.5), sys, grid, PITCH_VERTICES)
        ident = PolynomialMetric([np.eye(3), np.zeros((3, 3)), np.zeros((3, 3))], coord=1, lam=0.5)
        worst = max(pitch_c1_oracle(ident, x, th, 0.5).max() for x in grid for th in PITCH_VERTICES)
        assert report.c1_worst_eig == pytest.approx(worst, abs=1e-12)
        # A has a unit (theta, q) coupling the identity metric cannot absorb
        assert not report.passed
        assert report.violations

    def test_c1_matches_hand_written_oracle(self):
        sys = pitch_system()
        grid = pitch_grid(*GRID_1)
        rng = np.random.default_rng(5)
        m = random_poly_metric(6, lam=0.5)
        for idx in rng.choice(len(grid), 20, replace=False):
            x = grid[idx]
            th = PITCH_VERTICES[idx % 4]
            ours = np.linalg.eigvalsh(c1_matrix(m, sys, x, th))
            assert ours == pytest.approx(pitch_c1_oracle(m, x, th, 0.5), abs=1e-9)

    def test_killing_condition_holds_for_alpha_dependent_metric(self):
        m = random_poly_metric(7)
        for x in pitch_grid((-30, 30), (-10, 10), 5, 5):
            assert c2_residual(m, pitch_system(), x) == 0.0

    def test_killing_condition_detects_q_dependence(self):
        m = PolynomialMetric([np.eye(3), np.diag([0.1, 0.0, 0.0])], coord=2)
        assert c2_residual(m, pitch_system(), np.zeros(3)) == pytest.approx(0.1)

    def test_non_spd_metric_fails_with_point(self):
        m = PolynomialMetric([np.eye(3), np.zeros((3, 3)), -np.eye(3)], coord=1)
        report = verify_ccm(m, pitch_system(), pitch_grid((60, 80), (0, 1), 3, 2), PITCH_VERTICES)
        assert not report.passed and "SPD" in report.message

    def test_empty_grid_rejected(self):
        with pytest.raises(ValueError):
            verify_ccm(ConstantMetric(np.eye(3)), pitch_system(), np.zeros((0, 3)), PITCH_VERTICES)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.0, 2.0), st.floats(0.0, 2.0))
    def test_worst_eigenvalue_monotone_in_rate(self, seed, lam_a, lam_b):
        lo, hi = sorted((lam_a, lam_b))
        m = random_poly_metric(seed)
        grid = pitch_grid((-5, 50), (-10, 50), 4, 4)
        r_lo = verify_ccm(m, pitch_system(), grid, PITCH_VERTICES, lam=lo)
        r_hi = verify_ccm(m, pitch_system(), grid, PITCH_VERTICES, lam=hi)
        assert r_lo.c1_worst_eig <= r_hi.c1_worst_eig + 1e-9
        if r_hi.passed:
            assert r_lo.passed


class TestSynthesis:
    cp = pytest.importorskip("cvxpy")

    def test_pitch_grid_one_at_half_rate(self):
        sys = pitch_system()
        grid = pitch_grid(*GRID_1)
        m = synthesize_quadratic_metric(sys, grid, 0.5, theta_vertices=PITCH_VERTICES)
        assert verify_ccm(m, sys, grid, PITCH_VERTICES).passed
        assert np.linalg.eigvalsh(m.W_batch(grid)).min() >= 1.0 - 1e-9

    def test_linear_system_constant_template(self):
        A = np.array([[-1.0, 1.0], [0.0, -1.0]])
        sys = linear_system(A, [0.0, 1.0])
        grid = np.random.default_rng(1).uniform(-1, 1, (10, 2))
        m = synthesize_quadratic_metric(sys, grid, 0.5, template_degree=0, coord=0)
        assert verify_ccm(m, sys, grid, [np.zeros(1)]).passed

    def test_unreachable_rate_raises(self):
        sys = pitch_system()
        with pytest.raises(SynthesisError) as info:
            synthesize_quadratic_metric(sys, pitch_grid(*GRID_1, 7, 7), 1e6, theta_vertices=PITCH_VERTICES)
        assert info.value.best_margin > 0


def test_function_metric_batches_match_pointwise():
    m = random_poly_metric(8)
    f = FunctionMetric(m.eval_W, m.grad_W, 3)
    X = np.random.default_rng(0).uniform(-0.5, 0.5, (4, 3))
    assert f.W_batch(X) == pytest.approx(m.W_batch(X))
    assert f.grad_W_batch(X) == pytest.approx(m.grad_W_batch(X))
