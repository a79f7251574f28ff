import numpy as np
import pytest

from slungmpc import qp
from slungmpc.energy import PassivityParams, storage
from slungmpc.model import ModelParams, SystemState
from slungmpc.obstacles import Obstacle
from slungmpc.ocp import (
    NmpcController,
    OcpConfig,
    OcpSolution,
    RolloutError,
    WarmStart,
    barrier_batch,
    cold_start,
    condense,
    linearize,
    linearize_reference,
    rollout,
    rollout_reference,
    rti_step,
    shift_warm_start,
    sqp_solve,
    transcribe,
)
from slungmpc.safety import Body, SafetyParams, hocbf_row
from slungmpc.sim import STATUS_OPTIMAL, SimConfig, run_closed_loop

P = ModelParams()
SP = SafetyParams()
PP = PassivityParams()

SMALL = OcpConfig(horizon=0.5, n_nodes=10)


def _swung_state():
    return SystemState([0.3, -0.2, 1.1], [0.25, -0.15],
                       [0.2, 0.1, -0.1], [0.4, -0.3])


def _random_inputs(rng, n):
    return 0.4 * rng.standard_normal((n, 3))


class TestKernelAgainstReference:
    """The compiled rollout must reproduce the plain-numpy path exactly."""

    def test_rollout_matches(self):
        rng = np.random.default_rng(3)
        U = _random_inputs(rng, SMALL.n_nodes)
        xi_d = np.array([1.0, 0.5, 1.2])
        a = rollout(_swung_state(), U, xi_d, SMALL, P, PP)
        b = rollout_reference(_swung_state(), U, xi_d, SMALL, P, PP)
        assert np.max(np.abs(a - b)) < 1e-12

    def test_linearize_matches(self):
        rng = np.random.default_rng(4)
        U = _random_inputs(rng, SMALL.n_nodes)
        xi_d = np.array([1.0, 0.5, 1.2])
        Xa, Aa, Ba = linearize(_swung_state(), U, xi_d, SMALL, P, PP)
        Xb, Ab, Bb = linearize_reference(_swung_state(), U, xi_d, SMALL, P, PP)
        assert np.max(np.abs(Xa - Xb)) < 1e-12
        assert np.max(np.abs(Aa - Ab)) < 1e-12
        assert np.max(np.abs(Ba - Bb)) < 1e-12

    def test_domain_exit_raises(self):
        U = np.tile([25.0, 0.0, -18.0], (SMALL.n_nodes, 1))
        with pytest.raises(RolloutError):
            rollout(_swung_state(), U, np.zeros(3), SMALL, P, PP)


class TestLinearize:
    def test_sensitivities_match_finite_differences(self):
        rng = np.random.default_rng(5)
        cfg = OcpConfig(horizon=0.2, n_nodes=4)
        U = _random_inputs(rng, cfg.n_nodes)
        xi_d = np.array([0.5, 0.0, 1.0])
        st = _swung_state()
        X, A, B = linearize(st, U, xi_d, cfg, P, PP)

        eps = 1e-6
        x0 = st.as_vector()
        for col in range(10):
            dx = np.zeros(10)
            dx[col] = eps
            Xp = rollout(SystemState.from_vector(x0 + dx), U, xi_d, cfg, P, PP)
            Xm = rollout(SystemState.from_vector(x0 - dx), U, xi_d, cfg, P, PP)
            fd = (Xp[1] - Xm[1]) / (2 * eps)
            assert np.max(np.abs(fd - A[0][:, col])) < 1e-6
        for col in range(3):
            du = np.zeros((cfg.n_nodes, 3))
            du[0, col] = eps
            Xp = rollout(st, U + du, xi_d, cfg, P, PP)
            Xm = rollout(st, U - du, xi_d, cfg, P, PP)
            fd = (Xp[1] - Xm[1]) / (2 * eps)
            assert np.max(np.abs(fd - B[0][:, col])) < 1e-6

    def test_condense_chains_sensitivities(self):
        rng = np.random.default_rng(6)
        cfg = OcpConfig(horizon=0.3, n_nodes=6)
        U = _random_inputs(rng, cfg.n_nodes)
        X, A, B = linearize(_swung_state(), U, np.zeros(3), cfg, P, PP)
        E = condense(A, B)
        # propagating a random du through the recursion reproduces E @ du
        du = 0.01 * rng.standard_normal((cfg.n_nodes, 3))
        dx = np.zeros(10)
        for k in range(cfg.n_nodes):
            dx = A[k] @ dx + B[k] @ du[k]
            assert np.allclose(E[k] @ du.ravel(), dx, atol=1e-12)


class TestBarrierBatch:
    OBS = [
        Obstacle(id="a", center0=np.array([1.0, 0.2, 1.0]), radius=0.5),
        Obstacle(id="b", center0=np.array([-0.5, 0.1, 1.2]), radius=0.3,
                 velocity=np.array([0.4, 0.0, 0.0])),
    ]

    def test_matches_single_pair_rows(self):
        rng = np.random.default_rng(7)
        cfg = OcpConfig(horizon=0.3, n_nodes=6)
        U = _random_inputs(rng, cfg.n_nodes)
        X = rollout(_swung_state(), U, np.zeros(3), cfg, P, PP)
        times = 0.7 + cfg.dt_node * np.arange(cfg.n_nodes)
        offsets = np.tile(P.hover_thrust(), (cfg.n_nodes, 1))
        entries = barrier_batch(X[:cfg.n_nodes], times, self.OBS, SP, P,
                                input_offsets=offsets)
        assert len(entries) == 4
        idx = 0
        for obs in self.OBS:
            for body in (Body.QUADROTOR, Body.PAYLOAD):
                entry = entries[idx]
                idx += 1
                assert entry["obstacle_id"] == obs.id and entry["body"] is body
                for k in range(cfg.n_nodes):
                    st = SystemState.from_vector(X[k])
                    row = hocbf_row(st, body, obs, float(times[k]), SP, P)
                    assert entry["h"][k] == pytest.approx(row.h, abs=1e-10)
                    psi1 = entry["h_dot"][k] + SP.kappa1 * entry["h"][k]
                    assert psi1 == pytest.approx(row.psi1, abs=1e-10)
                    rhs = -(entry["h_ddot_drift"][k] + SP.kappa1 * entry["h_dot"][k]
                            + SP.kappa2 * psi1)
                    assert rhs == pytest.approx(row.b, abs=1e-8)
                    assert np.allclose(entry["input_row"][k], row.a, atol=1e-10)

    def test_state_gradients_match_finite_differences(self):
        times = np.array([0.4])
        x = _swung_state().as_vector()[None, :]
        entries = barrier_batch(x, times, self.OBS, SP, P)
        eps = 1e-6
        for entry in entries:
            for col in range(10):
                dx = np.zeros(10)
                dx[col] = eps
                plus = barrier_batch(x + dx, times, self.OBS, SP, P)
                minus = barrier_batch(x - dx, times, self.OBS, SP, P)
                i = entries.index(entry)
                fd_h = (plus[i]["h"][0] - minus[i]["h"][0]) / (2 * eps)
                fd_hd = (plus[i]["h_dot"][0] - minus[i]["h_dot"][0]) / (2 * eps)
                assert fd_h == pytest.approx(entry["grad_h"][0, col], abs=1e-6)
                assert fd_hd == pytest.approx(entry["grad_hdot"][0, col], abs=1e-6)


class TestTranscription:
    def test_row_counts_two_obstacles(self):
        obstacles = TestBarrierBatch.OBS
        tr = transcribe(_swung_state(), np.zeros(3), obstacles, 0.0,
                        cold_start(SMALL), SMALL, P, SP, PP)
        N = SMALL.n_nodes
        assert tr.n_passivity == N
        assert tr.n_safety == 4 * N
        assert tr.n_swing == 4 * N
        assert tr.problem.A_in.shape[0] == tr.n_passivity + tr.n_safety + tr.n_swing
        assert tr.problem.A_eq.shape == (10 * N, tr.problem.n)

    def test_condensed_matches_structured(self):
        # keep every row and slack so both programs are algebraically identical
        cfg = OcpConfig(horizon=0.4, n_nodes=8, swing_screen=0.0,
                        safety_screen=1e9)
        obstacles = [Obstacle(id="a", center0=np.array([1.2, 0.0, 1.1]), radius=0.5)]
        warm = cold_start(cfg)
        st = _swung_state()
        tr = transcribe(st, np.array([1.0, 0.0, 1.0]), obstacles, 0.0, warm,
                        cfg, P, SP, PP)
        structured = qp.solve(tr.problem)
        assert structured.status == qp.STATUS_OPTIMAL

        sol = rti_step(st, np.array([1.0, 0.0, 1.0]), obstacles, 0.0, warm,
                       cfg, P, SP, PP)
        assert sol.status == STATUS_OPTIMAL
        N = cfg.n_nodes
        du_structured = structured.x[10 * N:13 * N].reshape(N, 3)
        assert np.max(np.abs((warm.u_a + du_structured) - sol.u_a)) < 1e-6


class TestRiccatiOracle:
    def _riccati_du(self, X, A, B, U, xi_d, cfg):
        """Backward sweep of the unconstrained tracking problem."""
        N = cfg.n_nodes
        Qk = np.tile(cfg.q_weights, (N, 1))
        Qk[-1] *= cfg.terminal_factor
        goal = np.zeros(10)
        goal[:3] = xi_d
        R = cfg.r_weight * np.eye(3)
        P_mat = np.diag(Qk[-1])
        p_vec = Qk[-1] * (X[-1] - goal)
        K_gains, k_ff = [None] * N, [None] * N
        for k in reversed(range(N)):
            Quu = R + B[k].T @ P_mat @ B[k]
            Qux = B[k].T @ P_mat @ A[k]
            qu = cfg.r_weight * U[k] + B[k].T @ p_vec
            K_gains[k] = np.linalg.solve(Quu, Qux)
            k_ff[k] = np.linalg.solve(Quu, qu)
            P_mat = A[k].T @ P_mat @ A[k] - Qux.T @ K_gains[k]
            p_vec = A[k].T @ p_vec - Qux.T @ k_ff[k]
            if k > 0:
                P_mat = P_mat + np.diag(Qk[k - 1])
                p_vec = p_vec + Qk[k - 1] * (X[k] - goal)
        du = np.zeros((N, 3))
        dx = np.zeros(10)
        for k in range(N):
            du[k] = -K_gains[k] @ dx - k_ff[k]
            dx = A[k] @ dx + B[k] @ du[k]
        return du

    def test_unconstrained_step_matches_riccati(self):
        cfg = OcpConfig(horizon=0.5, n_nodes=10, passivity=False,
                        safety_mode="none")
        st = SystemState([0.1, -0.05, 1.02], [0.02, -0.01],
                        [0.05, 0.0, 0.0], [0.03, 0.0])
        xi_d = np.array([0.3, 0.0, 1.0])
        warm = cold_start(cfg)
        X, A, B = linearize(st, warm.u_a, xi_d, cfg, P, PP)
        du_ref = self._riccati_du(X, A, B, warm.u_a, xi_d, cfg)
        sol = rti_step(st, xi_d, [], 0.0, warm, cfg, P, SP, PP)
        assert sol.status == STATUS_OPTIMAL
        assert sol.active_counts == {"passivity": 0, "safety": 0, "other": 0}
        assert np.max(np.abs(sol.u_a - (warm.u_a + du_ref))) < 1e-6


class TestRtiStep:
    def test_hover_is_a_fixed_point(self):
        st = SystemState.hover([0.0, 0.0, 1.0])
        warm = cold_start(SMALL)
        for _ in range(3):
            sol = rti_step(st, [0.0, 0.0, 1.0], [], 0.0, warm, SMALL, P, SP, PP)
            assert sol.status == STATUS_OPTIMAL
            assert sol.kkt_residual < qp.KKT_TOL
            assert np.max(np.abs(sol.u_a)) < 1e-8
            warm = WarmStart(u_a=sol.u_a, active_set=list(sol.active_set))

    def test_warm_start_cheaper_than_cold(self):
        obstacles = [Obstacle(id="a", center0=np.array([0.6, 0.0, 1.0]), radius=0.4)]
        st = SystemState.hover([-0.6, 0.0, 1.0])
        xi_d = np.array([1.2, 0.0, 1.0])
        cold = rti_step(st, xi_d, obstacles, 0.0, cold_start(SMALL), SMALL, P, SP, PP)
        assert cold.status == STATUS_OPTIMAL
        warm = rti_step(st, xi_d, obstacles, 0.0, shift_warm_start(cold),
                        SMALL, P, SP, PP)
        assert warm.status == STATUS_OPTIMAL
        assert warm.qp_iterations <= cold.qp_iterations

    def test_respects_input_bounds(self):
        st = SystemState.hover([-3.0, 0.0, 1.0])
        sol = rti_step(st, [3.0, 0.0, 1.0], [], 0.0, cold_start(SMALL),
                       SMALL, P, SP, PP)
        assert sol.status == STATUS_OPTIMAL
        offsets = P.hover_thrust() - (sol.states[:-1, 0:3] - [3.0, 0.0, 1.0]) @ PP.shaping
        force = sol.u_a + offsets
        assert np.max(np.abs(force)) <= np.max(P.u_max) + 1e-7

    def test_sqp_refines_rti(self):
        # pure tracking: with no linearization-dependent constraint rows the
        # converged iterates cannot cost more than a single pass
        cfg = OcpConfig(horizon=0.5, n_nodes=10, passivity=False,
                        safety_mode="none")
        st = SystemState([0.4, 0.1, 1.2], [0.1, -0.05], np.zeros(3), np.zeros(2))
        xi_d = np.array([0.0, 0.0, 1.0])
        rti = rti_step(st, xi_d, [], 0.0, cold_start(cfg), cfg, P, SP, PP)
        sqp = sqp_solve(st, xi_d, [], 0.0, cfg, P, SP, PP)
        assert rti.status == STATUS_OPTIMAL and sqp.status == STATUS_OPTIMAL

        def nonlinear_cost(sol):
            goal = np.zeros(10)
            goal[:3] = xi_d
            w = np.tile(cfg.q_weights, (cfg.n_nodes, 1))
            w[-1] *= cfg.terminal_factor
            dx = sol.states[1:] - goal
            return (0.5 * np.sum(w * dx**2)
                    + 0.5 * cfg.r_weight * np.sum(sol.u_a**2))

        assert nonlinear_cost(sqp) <= nonlinear_cost(rti) + 1e-6


class TestWarmStartShift:
    def test_shift_duplicates_tail(self):
        sol = rti_step(SystemState.hover([0.2, 0.0, 1.0]), [0.0, 0.0, 1.0], [],
                       0.0, cold_start(SMALL), SMALL, P, SP, PP)
        shifted = shift_warm_start(sol)
        assert np.allclose(shifted.u_a[:-1], sol.u_a[1:])
        assert np.allclose(shifted.u_a[-1], sol.u_a[-1])

    def test_shift_moves_labels_one_node(self):
        sol = OcpSolution(
            u_a=np.zeros((4, 3)), states=np.zeros((5, 10)),
            status=STATUS_OPTIMAL, kkt_residual=0.0, solve_time=0.0,
            active_counts={},
            active_set=[("pass", 0), ("pass", 2), ("cbf", 1, 3), ("sc", 0, 0),
                        ("sw", 1, 0, 1), ("slb", 0, 1), ("ulb", 2), ("ulb", 7),
                        ("uub", 3), ("cut", 0)])
        shifted = shift_warm_start(sol)
        assert shifted.active_set == [("pass", 1), ("cbf", 1, 2), ("sw", 0, 0, 1),
                                      ("ulb", 4), ("uub", 0)]


class TestClosedLoop:
    def test_regulation_dissipates_storage(self):
        cfg = OcpConfig(horizon=1.0, n_nodes=20)
        ctrl = NmpcController([[0.5, 0.2, 1.0]], cfg, P, SP, PP)
        st = SystemState.hover([0.0, 0.0, 1.0])
        log = run_closed_loop(ctrl, st, [], SimConfig(duration=4.0), P, SP, PP)
        assert log.valid
        assert all(s == STATUS_OPTIMAL for s in log.status[1:])
        # the cold-start tick can add a small amount before the warm-started
        # dissipation rows take hold; after that the storage never climbs
        assert np.max(np.diff(log.storage_value[20:])) <= 1e-4
        assert log.storage_value[-1] < 1e-3 * log.storage_value[0]
        assert np.linalg.norm(log.state[-1, :3] - [0.5, 0.2, 1.0]) < 0.01

    def test_waypoint_advance_with_hold(self):
        cfg = OcpConfig(horizon=1.0, n_nodes=20)
        ctrl = NmpcController([[0.3, 0.0, 1.0], [0.6, 0.0, 1.0]], cfg, P, SP, PP,
                              hold_times=[0.5, 0.0])
        st = SystemState.hover([0.0, 0.0, 1.0])
        log = run_closed_loop(ctrl, st, [], SimConfig(duration=6.0), P, SP, PP)
        assert ctrl.wp_index == 1
        assert np.linalg.norm(log.state[-1, :3] - [0.6, 0.0, 1.0]) < 0.01


class TestConfigValidation:
    def test_rejects_bad_horizon(self):
        with pytest.raises(ValueError):
            OcpConfig(horizon=0.0)

    def test_rejects_bad_mode(self):
        with pytest.raises(ValueError):
            OcpConfig(safety_mode="magic")

    def test_rejects_bad_weights(self):
        with pytest.raises(ValueError):
            OcpConfig(r_weight=0.0)
        with pytest.raises(ValueError):
            OcpConfig(q_weights=np.ones(9))
