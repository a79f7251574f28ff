import itertools

import numpy as np
import pytest

from slungmpc.qp import (
    KKT_TOL,
    QpProblem,
    STATUS_INFEASIBLE,
    STATUS_OPTIMAL,
    check_kkt,
    solve,
)


def random_spd(rng, n, cond_lo=0.1, cond_hi=10.0):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = rng.uniform(cond_lo, cond_hi, n)
    return Q @ np.diag(lam) @ Q.T


def brute_force(problem: QpProblem, tol=1e-9):
    """Global optimum by enumerating candidate active sets.

    Every KKT point of a strictly convex QP is the unique global minimum, so
    the first working set whose equality-constrained solution is primal
    feasible with non-negative multipliers settles the problem.  Returns
    ``(x, objective)`` or ``None`` when no subset produces a KKT point.
    """
    H = np.asarray(problem.H, float)
    g = np.asarray(problem.g, float)
    A = np.atleast_2d(problem.A_in) if problem.A_in is not None else np.zeros((0, H.shape[0]))
    b = np.atleast_1d(problem.b_in) if problem.A_in is not None else np.zeros(0)
    m, n = A.shape

    for size in range(0, min(m, n) + 1):
        for subset in itertools.combinations(range(m), size):
            N = A[list(subset)]
            kkt = np.block([[H, -N.T], [N, np.zeros((size, size))]])
            rhs = np.concatenate([-g, b[list(subset)]])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                continue
            if not np.all(np.isfinite(sol)):
                continue
            x, lam = sol[:n], sol[n:]
            if np.max(np.abs(kkt @ sol - rhs)) > 1e-7:
                continue
            if size and np.min(lam) < -tol:
                continue
            if m and np.min(A @ x - b) < -1e-7:
                continue
            return x, float(0.5 * x @ H @ x + g @ x)
    return None


class TestBasics:
    def test_unconstrained_matches_linear_solve(self):
        rng = np.random.default_rng(0)
        H = random_spd(rng, 4)
        g = rng.standard_normal(4)
        sol = solve(QpProblem(H=H, g=g))
        assert sol.status == STATUS_OPTIMAL
        assert np.allclose(sol.x, -np.linalg.solve(H, g), atol=1e-9)

    def test_single_active_constraint(self):
        # min 0.5|x|^2 with x0 >= 1 clips exactly onto the boundary
        sol = solve(QpProblem(H=np.eye(2), g=np.zeros(2),
                              A_in=np.array([[1.0, 0.0]]), b_in=np.array([1.0])))
        assert sol.status == STATUS_OPTIMAL
        assert np.allclose(sol.x, [1.0, 0.0], atol=1e-9)
        assert sol.lam_in[0] == pytest.approx(1.0)

    def test_inactive_constraint_ignored(self):
        sol = solve(QpProblem(H=np.eye(2), g=np.array([-1.0, 0.0]),
                              A_in=np.array([[1.0, 0.0]]), b_in=np.array([0.5])))
        assert np.allclose(sol.x, [1.0, 0.0], atol=1e-9)
        assert sol.lam_in[0] == pytest.approx(0.0, abs=1e-12)

    def test_equality_constraint(self):
        # min 0.5|x|^2 with x0 + x1 = 2 -> (1, 1)
        sol = solve(QpProblem(H=np.eye(2), g=np.zeros(2),
                              A_eq=np.array([[1.0, 1.0]]), b_eq=np.array([2.0])))
        assert sol.status == STATUS_OPTIMAL
        assert np.allclose(sol.x, [1.0, 1.0], atol=1e-9)

    def test_equality_with_active_inequality(self):
        sol = solve(QpProblem(H=np.eye(2), g=np.zeros(2),
                              A_eq=np.array([[1.0, 1.0]]), b_eq=np.array([2.0]),
                              A_in=np.array([[1.0, -1.0]]), b_in=np.array([1.0])))
        assert np.allclose(sol.x, [1.5, 0.5], atol=1e-9)
        assert check_kkt(
            QpProblem(H=np.eye(2), g=np.zeros(2),
                      A_eq=np.array([[1.0, 1.0]]), b_eq=np.array([2.0]),
                      A_in=np.array([[1.0, -1.0]]), b_in=np.array([1.0])),
            sol).max_residual < KKT_TOL

    def test_box_bounds(self):
        sol = solve(QpProblem(H=np.eye(3), g=np.array([-5.0, 5.0, 0.1]),
                              lb=np.array([-1.0, -1.0, -1.0]),
                              ub=np.array([1.0, 1.0, 1.0])))
        assert np.allclose(sol.x, [1.0, -1.0, -0.1], atol=1e-9)

    def test_one_sided_box(self):
        sol = solve(QpProblem(H=np.eye(2), g=np.array([3.0, 3.0]),
                              lb=np.array([-1.0, -np.inf])))
        assert np.allclose(sol.x, [-1.0, -3.0], atol=1e-9)


class TestInfeasibility:
    def test_contradictory_rows(self):
        A = np.array([[1.0, 0.0], [-1.0, 0.0]])
        b = np.array([1.0, 0.0])
        prob = QpProblem(H=np.eye(2), g=np.zeros(2), A_in=A, b_in=b)
        sol = solve(prob)
        assert sol.status == STATUS_INFEASIBLE
        # Farkas ray: nonnegative combination cancelling the normals with b . y > 0
        y = sol.farkas_in
        assert y is not None and np.min(y) >= 0.0 and np.max(y) > 0.0
        assert np.allclose(A.T @ y, 0.0, atol=1e-9)
        assert b @ y > 1e-9

    def test_empty_box(self):
        prob = QpProblem(H=np.eye(1), g=np.zeros(1),
                         lb=np.array([2.0]), ub=np.array([1.0]))
        assert solve(prob).status == STATUS_INFEASIBLE

    def test_inconsistent_equalities(self):
        prob = QpProblem(H=np.eye(2), g=np.zeros(2),
                         A_eq=np.array([[1.0, 0.0], [1.0, 0.0]]),
                         b_eq=np.array([0.0, 1.0]))
        assert solve(prob).status == STATUS_INFEASIBLE


class TestDegenerateHessian:
    def test_semidefinite_direction_is_regularized(self):
        # zero curvature along x1 with zero gradient keeps x1 at the origin
        sol = solve(QpProblem(H=np.diag([1.0, 0.0]), g=np.array([1.0, 0.0]),
                              lb=np.array([-2.0, -2.0]), ub=np.array([2.0, 2.0])))
        assert sol.status == STATUS_OPTIMAL
        assert sol.x[0] == pytest.approx(-1.0, abs=1e-6)
        assert abs(sol.x[1]) <= 2.0

    def test_redundant_parallel_rows(self):
        prob = QpProblem(H=np.eye(2), g=np.array([-4.0, 0.0]),
                         A_in=np.array([[-1.0, 0.0], [-2.0, 0.0]]),
                         b_in=np.array([-1.0, -2.0]))
        sol = solve(prob)
        assert np.allclose(sol.x, [1.0, 0.0], atol=1e-8)
        assert check_kkt(prob, sol).max_residual < 1e-7


class TestWarmStart:
    def _problem(self, rng, shift=0.0):
        H = random_spd(rng, 6)
        g = rng.standard_normal(6) + shift
        A = rng.standard_normal((8, 6))
        b = A @ rng.standard_normal(6) - rng.uniform(0, 1, 8)
        return QpProblem(H=H, g=g, A_in=A, b_in=b)

    def test_warm_matches_cold(self):
        rng = np.random.default_rng(7)
        prob = self._problem(rng)
        cold = solve(prob)
        warm = solve(prob, warm_start=cold.active_set)
        assert np.allclose(warm.x, cold.x, atol=1e-9)
        assert warm.iterations <= cold.iterations

    def test_stale_warm_start_still_correct(self):
        rng = np.random.default_rng(8)
        prob = self._problem(rng)
        cold = solve(prob)
        for junk in ([0, 1, 2, 3, 4, 5], [7, 7, 7], [5]):
            warm = solve(prob, warm_start=junk)
            assert warm.status == cold.status
            assert np.allclose(warm.x, cold.x, atol=1e-8)

    def test_out_of_range_indices_ignored(self):
        rng = np.random.default_rng(9)
        prob = self._problem(rng)
        warm = solve(prob, warm_start=[123, -5])
        assert np.allclose(warm.x, solve(prob).x, atol=1e-9)


class TestEnumerationOracle:
    def test_thousand_random_qps(self):
        # feasible by construction: the rhs sits strictly below A x0
        rng = np.random.default_rng(2024)
        for trial in range(1000):
            n = int(rng.integers(1, 7))
            m = int(rng.integers(0, 9))
            H = random_spd(rng, n)
            g = rng.standard_normal(n) * 2.0
            if m:
                A = rng.standard_normal((m, n))
                x0 = rng.standard_normal(n)
                b = A @ x0 - rng.uniform(0.0, 1.0, m)
                prob = QpProblem(H=H, g=g, A_in=A, b_in=b)
            else:
                prob = QpProblem(H=H, g=g)
            sol = solve(prob)
            assert sol.status == STATUS_OPTIMAL, f"trial {trial}"
            ref = brute_force(prob)
            assert ref is not None, f"trial {trial}"
            x_ref, obj_ref = ref
            assert np.max(np.abs(sol.x - x_ref)) < 1e-7, f"trial {trial}"
            assert abs(sol.objective - obj_ref) < 1e-6, f"trial {trial}"
            assert check_kkt(prob, sol).max_residual < KKT_TOL, f"trial {trial}"

    def test_tightly_clustered_constraints(self):
        # near-parallel rows exercise drops and the regularized Schur solves
        rng = np.random.default_rng(11)
        for trial in range(50):
            n = 4
            H = random_spd(rng, n)
            g = rng.standard_normal(n) * 3.0
            base = rng.standard_normal(n)
            A = base + 1e-4 * rng.standard_normal((6, n))
            x0 = rng.standard_normal(n)
            b = A @ x0 - rng.uniform(0.0, 0.5, 6)
            prob = QpProblem(H=H, g=g, A_in=A, b_in=b)
            sol = solve(prob)
            assert sol.status == STATUS_OPTIMAL
            assert check_kkt(prob, sol).max_residual < 1e-7


class TestDuality:
    def test_duality_gap_closes(self):
        # Lagrangian value at the reported duals equals the primal objective
        rng = np.random.default_rng(21)
        for _ in range(50):
            n, m = 5, 7
            H = random_spd(rng, n)
            g = rng.standard_normal(n)
            A = rng.standard_normal((m, n))
            b = A @ rng.standard_normal(n) - rng.uniform(0, 1, m)
            prob = QpProblem(H=H, g=g, A_in=A, b_in=b)
            sol = solve(prob)
            assert sol.status == STATUS_OPTIMAL
            x_hat = np.linalg.solve(H, A.T @ sol.lam_in - g)
            dual_obj = (0.5 * x_hat @ H @ x_hat + g @ x_hat
                        - sol.lam_in @ (A @ x_hat - b))
            assert abs(sol.objective - dual_obj) < 1e-7


class TestValidation:
    def test_shape_checks(self):
        with pytest.raises(ValueError):
            QpProblem(H=np.ones((2, 3)), g=np.zeros(2))
        with pytest.raises(ValueError):
            QpProblem(H=np.eye(2), g=np.zeros(3))
