import numpy as np
import pytest

from slungmpc.energy import (
    PassivityParams,
    passivity_residual,
    passivity_row,
    physical_force,
    shaped_from_physical,
    shaped_input,
    storage,
    unshaped_input,
)
from slungmpc.model import ModelParams, SystemState
from slungmpc.sim import rk4_step

P = ModelParams()
PASS = PassivityParams()


class TestStorage:
    def test_zero_at_equilibrium(self):
        xi_d = np.array([1.0, -2.0, 1.5])
        st = SystemState.hover(xi_d)
        assert storage(st, xi_d, PASS, P) == 0.0

    def test_swing_potential_value(self):
        xi_d = np.zeros(3)
        st = SystemState(xi_d, [np.pi / 3, 0.0], np.zeros(3), np.zeros(2))
        assert storage(st, xi_d, PASS, P) == pytest.approx(0.2 * 9.81 * 0.5 * 0.5)

    def test_positive_away_from_equilibrium(self):
        rng = np.random.default_rng(0)
        xi_d = np.zeros(3)
        for _ in range(50):
            st = SystemState(rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 2),
                             rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 2))
            if np.linalg.norm(st.as_vector()) > 1e-6:
                assert storage(st, xi_d, PASS, P) > 0.0

    def test_port_relation_along_trajectory(self):
        # Finite-difference V_dot must match v . u_a while a fixed physical
        # force drives the system (u_a then varies through the state).
        xi_d = np.array([1.0, 0.0, 1.0])
        st = SystemState([0.0, 0.0, 1.0], [0.1, -0.05], [0.2, 0.0, 0.0], [0.0, 0.0])
        force = P.hover_thrust() + np.array([0.3, -0.2, 0.1])
        dt = 1e-4
        for _ in range(200):
            st_next = rk4_step(st, force, dt, P)
            V0 = storage(st, xi_d, PASS, P)
            V1 = storage(st_next, xi_d, PASS, P)
            mid = rk4_step(st, force, dt / 2, P)
            u_a_mid = shaped_from_physical(force, mid, xi_d, PASS, P)
            assert (V1 - V0) / dt == pytest.approx(float(mid.xi_dot @ u_a_mid), abs=1e-4)
            st = st_next


class TestShapedInput:
    def test_zero_error_identity(self):
        xi_d = np.array([0.5, 0.5, 1.0])
        st = SystemState.hover(xi_d)
        u = np.array([1.0, 2.0, 3.0])
        assert np.allclose(shaped_input(u, st, xi_d, PASS), u)

    def test_pure_error_term(self):
        params = PassivityParams(shaping=np.eye(3))
        st = SystemState.hover([1.0, 2.0, 3.0])
        u_a = shaped_input(np.zeros(3), st, np.zeros(3), params)
        assert np.allclose(u_a, [1.0, 2.0, 3.0])

    def test_round_trip(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            st = SystemState(rng.uniform(-2, 2, 3), rng.uniform(-1, 1, 2),
                             rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 2))
            xi_d = rng.uniform(-2, 2, 3)
            u = rng.uniform(-5, 5, 3)
            back = unshaped_input(shaped_input(u, st, xi_d, PASS), st, xi_d, PASS)
            assert np.allclose(back, u, atol=1e-14)

    def test_physical_force_at_hover(self):
        xi_d = np.array([0.0, 0.0, 1.0])
        st = SystemState.hover(xi_d)
        assert np.allclose(physical_force(np.zeros(3), st, xi_d, PASS, P), P.hover_thrust())


class TestPassivityResidual:
    def test_boundary_at_rest(self):
        assert passivity_residual(np.zeros(3), np.zeros(3), PASS) == 0.0

    def test_violated_arithmetic(self):
        params = PassivityParams(rho=0.1, epsilon=0.1)
        r = passivity_residual([1, 0, 0], [1, 0, 0], params)
        assert r == pytest.approx(1.2)

    def test_pure_damping_feasible(self):
        params = PassivityParams(rho=0.5, epsilon=0.01)
        rng = np.random.default_rng(2)
        for c in [0.6, 1.0, 5.0, 20.0]:
            for _ in range(20):
                v = rng.uniform(-2, 2, 3)
                if np.linalg.norm(v) < 1e-6:
                    continue
                u_a = -c * v
                # damping strong enough (c > rho / (1 - eps c)) dissipates
                if 1 - params.epsilon * c > 0 and c * (1 - params.epsilon * c) > params.rho:
                    assert passivity_residual(u_a, v, params) < 0


class TestPassivityRow:
    def test_trivial_row_at_origin(self):
        a, ub = passivity_row(np.zeros(3), np.zeros(3), PASS)
        assert np.allclose(a, 0) and ub == 0.0

    def test_row_nearly_exact_for_tiny_epsilon(self):
        params = PassivityParams(rho=0.5, epsilon=1e-9)
        rng = np.random.default_rng(3)
        for _ in range(50):
            u_ref = rng.uniform(-2, 2, 3)
            v = rng.uniform(-2, 2, 3)
            u = rng.uniform(-2, 2, 3)
            a, ub = passivity_row(u_ref, v, params)
            lin = float(a @ u) - ub
            assert lin == pytest.approx(passivity_residual(u, v, params), abs=1e-7)

    def test_under_approximation_gap_is_quadratic(self):
        # true residual = linearized slack + eps |u - u_ref|^2, exactly
        rng = np.random.default_rng(4)
        for _ in range(100):
            u_ref = rng.uniform(-3, 3, 3)
            v = rng.uniform(-3, 3, 3)
            u = rng.uniform(-3, 3, 3)
            a, ub = passivity_row(u_ref, v, PASS)
            gap = passivity_residual(u, v, PASS) - (float(a @ u) - ub)
            assert gap == pytest.approx(PASS.epsilon * np.sum((u - u_ref) ** 2), abs=1e-12)


class TestParams:
    def test_strictness_required(self):
        with pytest.raises(ValueError):
            PassivityParams(rho=0.0)
        with pytest.raises(ValueError):
            PassivityParams(epsilon=-0.1)
        with pytest.raises(ValueError):
            PassivityParams(shaping=np.diag([1.0, 1.0, 0.0]))
