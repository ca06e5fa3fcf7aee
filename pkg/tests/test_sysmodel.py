import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from safe_adapt.sysmodel import (
    DEG,
    PitchPlant,
    SimulationError,
    eval_closed_loop_jacobian,
    eval_dynamics,
    gram_schmidt_annihilator,
    integrate,
    linear_system,
    make_desired_motion,
    pitch_system,
    scalar_drift_system,
)

from oracles import finite_difference_jacobian

THETA = np.array([0.2, -1.0])


@pytest.fixture(scope="module")
def pitch():
    return pitch_system()


class TestDynamics:
    def test_equilibrium_at_origin(self, pitch):
        assert eval_dynamics(pitch, np.zeros(3), 0.0, THETA) == pytest.approx(np.zeros(3))

    def test_lift_at_quarter_pi(self, pitch):
        xdot = eval_dynamics(pitch, [0.0, np.pi / 4, 0.0], 0.0, THETA)
        assert xdot == pytest.approx([0.0, -0.8, 0.8], abs=1e-12)

    def test_hand_substitution(self, pitch):
        xdot = eval_dynamics(pitch, [0.0, 0.0, 0.1], 0.5, THETA)
        assert xdot == pytest.approx([0.1, 0.1, -0.02 + 0.5], abs=1e-12)

    def test_rejects_non_finite(self, pitch):
        with pytest.raises(ValueError):
            eval_dynamics(pitch, [np.nan, 0, 0], 0.0, THETA)

    def test_uncertainty_only_in_pitch_rate_row(self, pitch):
        x = np.array([0.3, 0.4, -0.2])
        rows = pitch.delta(x).T @ THETA
        assert rows[:2] == pytest.approx([0, 0])
        assert rows[2] == pytest.approx(0.2 * -0.2 + -1.0 * 0.8 * np.sin(0.8))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-2, 2), min_size=3, max_size=3),
           st.floats(-3, 3), st.floats(-3, 3),
           st.lists(st.floats(-3, 3), min_size=2, max_size=2))
    def test_superposition_in_u_and_theta(self, x, u1, u2, th2):
        sys = pitch_system()
        x = np.array(x)
        th2 = np.array(th2)
        base = eval_dynamics(sys, x, 0.0, np.zeros(2))
        a = eval_dynamics(sys, x, u1, THETA) - base
        b = eval_dynamics(sys, x, u2, th2) - base
        c = eval_dynamics(sys, x, u1 + u2, THETA + th2) - base
        assert c == pytest.approx(a + b, abs=1e-12)


class TestJacobian:
    def test_linear_system_returns_A(self):
        A = np.array([[0.0, 1.0], [-2.0, -3.0]])
        sys = linear_system(A, [[0.0], [1.0]])
        assert eval_closed_loop_jacobian(sys, [0.3, 0.1], [2.0], [0.0]) == pytest.approx(A)

    def test_alpha_derivative_at_zero(self, pitch):
        A = eval_closed_loop_jacobian(pitch, np.zeros(3), [0.0], np.zeros(2))
        assert A[1, 1] == pytest.approx(-1.6)

    def test_constant_input_matrix_adds_nothing(self, pitch):
        x = np.array([0.1, 0.2, 0.3])
        A0 = eval_closed_loop_jacobian(pitch, x, [0.0], THETA)
        A1 = eval_closed_loop_jacobian(pitch, x, [5.0], THETA)
        assert A1 == pytest.approx(A0)

    def test_matches_finite_differences(self, pitch):
        rng = np.random.default_rng(0)
        for _ in range(50):
            x = rng.uniform(-1, 1, 3)
            u = rng.uniform(-2, 2, 1)
            th = rng.uniform(-3, 1, 2)
            A = eval_closed_loop_jacobian(pitch, x, u, th)
            J = finite_difference_jacobian(lambda z: eval_dynamics(pitch, z, u, th), x)
            assert A == pytest.approx(J, rel=1e-5, abs=1e-8)

    def test_delta_row_jacobians(self, pitch):
        x = np.array([0.1, 0.7, -0.4])
        for i, J in enumerate(pitch.jac_delta_rows(x)):
            fd = finite_difference_jacobian(lambda z: pitch.delta(z)[i], x)
            assert J == pytest.approx(fd, abs=1e-8)


class TestAnnihilator:
    def test_pitch_b_perp_orthogonal(self, pitch):
        rng = np.random.default_rng(1)
        for x in rng.uniform(-np.pi, np.pi, (1000, 3)):
            assert np.abs(pitch.B_perp(x).T @ pitch.B(x)).max() <= 1e-10

    def test_gram_schmidt_fallback(self):
        B = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 2.0], [3.0, 0.0]])
        P = gram_schmidt_annihilator(B)
        assert P.shape == (4, 2)
        assert np.abs(P.T @ B).max() <= 1e-12
        assert P.T @ P == pytest.approx(np.eye(2))

    def test_fully_actuated_is_empty(self):
        assert scalar_drift_system().B_perp(np.zeros(1)).shape == (1, 0)


class TestIntegrate:
    def test_zero_dynamics_constant_trace(self):
        sys = linear_system([[0.0]], [[0.0]])
        tr = integrate(sys, lambda t, x: [0.0], [1.5], [0.0], 1.0, 0.01)
        assert np.all(tr.x == 1.5)

    def test_exponential_decay(self):
        sys = linear_system([[-1.0]], [[1.0]])
        tr = integrate(sys, lambda t, x: [0.0], [1.0], [0.0], 1.0, 1e-3)
        assert tr.x[-1, 0] == pytest.approx(np.exp(-1), abs=1e-6)
        assert tr.t[-1] == pytest.approx(1.0)

    def test_constant_drift_closed_form(self):
        tr = integrate(scalar_drift_system(), lambda t, x: [0.0], [2.0], [1.0], 1.0, 1e-3)
        assert tr.x[:, 0] == pytest.approx(2.0 - tr.t, abs=1e-12)

    def test_rk4_fourth_order(self):
        sys = linear_system([[-1.0]], [[1.0]])
        errs = []
        for dt in (0.1, 0.05):
            tr = integrate(sys, lambda t, x: [0.0], [1.0], [0.0], 1.0, dt)
            errs.append(abs(tr.x[-1, 0] - np.exp(-1)))
        assert 12 <= errs[0] / errs[1] <= 20

    def test_fixed_step_and_shared_lengths(self):
        def ctrl(t, x):
            return [0.0], {"h": 1.0, "theta": [t, 2 * t]}
        tr = integrate(scalar_drift_system(), ctrl, [0.0], [0.0], 0.5, 0.1)
        assert len(tr.t) == len(tr.x) == len(tr.u) == len(tr.h) == 6
        assert tr.theta.shape == (6, 2)
        assert np.diff(tr.t) == pytest.approx(np.full(5, 0.1))

    def test_zero_order_hold(self):
        calls = []

        def ctrl(t, x):
            calls.append(t)
            return [1.0]
        tr = integrate(scalar_drift_system(), ctrl, [0.0], [0.0], 0.3, 0.1)
        assert len(calls) == 4
        assert tr.x[-1, 0] == pytest.approx(0.3)

    def test_controller_error_carries_time(self):
        def ctrl(t, x):
            if t > 0.25:
                raise RuntimeError("boom")
            return [0.0]
        with pytest.raises(SimulationError) as info:
            integrate(scalar_drift_system(), ctrl, [0.0], [0.0], 1.0, 0.1)
        assert info.value.t == pytest.approx(0.3)
        part = info.value.partial
        # rows with a completed input only
        assert len(part.t) == 3 and part.t[-1] == pytest.approx(0.2)

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_divergence_keeps_partial_trace(self):
        sys = linear_system([[0.0]], [[1.0]])
        with pytest.raises(SimulationError) as info:
            integrate(sys, lambda t, x: [1e308 if t > 0.15 else 1.0], [0.0], [0.0], 1.0, 0.1)
        assert info.value.partial.x[:, 0] == pytest.approx(info.value.partial.t)


class TestDesiredMotion:
    def test_immelmann_terminal_state(self):
        m = make_desired_motion("immelmann")
        for t in (0.0, 3.7):
            x_d, xdot_d = m(t)
            assert x_d == pytest.approx([np.pi, 0, 0])
            assert xdot_d == pytest.approx(np.zeros(3))
        assert m.kind == "terminal_state"

    def test_sine_at_zero(self):
        x_d, _ = make_desired_motion("sine_tracking")(0.0)
        assert x_d[0] == pytest.approx(-20 * DEG)
        assert x_d[2] == pytest.approx(0.0)

    def test_sine_quarter_period(self):
        x_d, xdot_d = make_desired_motion("sine_tracking")(np.pi / 2)
        assert x_d[0] == pytest.approx(0.0, abs=1e-15)
        assert x_d[2] == pytest.approx(20 * DEG)
        assert xdot_d == pytest.approx([20 * DEG, 0.0, 0.0], abs=1e-15)

    def test_sine_derivative_consistent(self):
        m = make_desired_motion("sine_tracking")
        t, h = 0.7, 1e-6
        fd = (m.x_d(t + h) - m.x_d(t - h)) / (2 * h)
        assert m.xdot_d(t) == pytest.approx(fd, abs=1e-8)

    def test_unknown(self):
        with pytest.raises(ValueError):
            make_desired_motion("barrel_roll")

    def test_plant_parameters(self):
        assert PitchPlant().theta == pytest.approx([0.2, -1.0])
