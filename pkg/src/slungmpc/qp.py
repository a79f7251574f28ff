"""Dense strictly convex quadratic programming by a dual active-set method.

Solves ``min 0.5 x'Hx + g'x`` subject to ``A_eq x = b_eq``, ``A_in x >= b_in``
and optional box bounds.  The iterate stays dual feasible throughout, so a
warm-started solve that begins at the previous active set typically finishes
in a handful of iterations.  All factorizations are dense; the sizes involved
(a few hundred variables, active sets of a few dozen rows) make that the
fastest option by a wide margin.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, get_lapack_funcs, qr

STATUS_OPTIMAL = "optimal"
STATUS_INFEASIBLE = "infeasible"
STATUS_MAX_ITER = "max_iter"

# A Hessian eigenvalue below this is lifted back up by diagonal regularization.
MIN_CURVATURE = 1e-9
FEAS_TOL = 1e-9
KKT_TOL = 1e-8


@dataclass(frozen=True)
class QpProblem:
    """Strictly convex QP in the form used throughout the controller.

    ``lb``/``ub`` are elementwise bounds folded into inequality rows by the
    solver; pass ``None`` to leave a side unbounded.
    """

    H: np.ndarray
    g: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float)
        if H.ndim != 2 or H.shape[0] != H.shape[1]:
            raise ValueError("H must be square")
        if np.asarray(self.g).shape != (H.shape[0],):
            raise ValueError("g must match the Hessian dimension")

    @property
    def n(self) -> int:
        return self.H.shape[0]


@dataclass
class QpSolution:
    x: np.ndarray
    status: str
    objective: float
    lam_eq: np.ndarray
    lam_in: np.ndarray          # multipliers for the stacked inequalities
    active_set: list[int]       # stacked-inequality indices active at the end
    iterations: int
    # Farkas ray certifying infeasibility: y_in >= 0 with
    # A_in' y_in + A_eq' y_eq = 0 and b_in . y_in + b_eq . y_eq > 0.
    farkas_in: np.ndarray | None = None
    farkas_eq: np.ndarray | None = None


@dataclass
class KktReport:
    stationarity: float
    primal: float
    dual: float
    complementarity: float

    @property
    def max_residual(self) -> float:
        return max(self.stationarity, self.primal, self.dual, self.complementarity)


def _stack_inequalities(problem: QpProblem):
    """Fold explicit rows and box bounds into one ``A x >= b`` stack."""
    n = problem.n
    rows, rhs = [], []
    if problem.A_in is not None:
        A = np.atleast_2d(np.asarray(problem.A_in, dtype=float))
        rows.append(A)
        rhs.append(np.atleast_1d(np.asarray(problem.b_in, dtype=float)))
    if problem.lb is not None:
        lb = np.asarray(problem.lb, dtype=float)
        keep = np.isfinite(lb)
        rows.append(np.eye(n)[keep])
        rhs.append(lb[keep])
    if problem.ub is not None:
        ub = np.asarray(problem.ub, dtype=float)
        keep = np.isfinite(ub)
        rows.append(-np.eye(n)[keep])
        rhs.append(-ub[keep])
    if not rows:
        return np.zeros((0, n)), np.zeros(0)
    return np.vstack(rows), np.concatenate(rhs)


def _regularized_cholesky(H: np.ndarray):
    """Lower Cholesky factor of H, lifting the spectrum if it dips below tolerance."""
    try:
        return np.linalg.cholesky(H - MIN_CURVATURE * np.eye(H.shape[0])) + 0.0, H
    except np.linalg.LinAlgError:
        pass
    lam_min = float(np.linalg.eigvalsh(H)[0])
    H_reg = H + (MIN_CURVATURE - lam_min) * np.eye(H.shape[0])
    return None, H_reg


class _Workspace:
    """Factorization state shared across active-set changes.

    ``L`` is the Cholesky factor of the (possibly regularized) Hessian and
    ``Y`` holds ``L^-1 A_W'`` column-per-active-row, so the Schur complement
    of the working set is just ``Y'Y``.
    """

    def __init__(self, H: np.ndarray, g: np.ndarray):
        _, H_reg = _regularized_cholesky(H)
        self.L = np.asfortranarray(np.linalg.cholesky(H_reg))
        self.g = g
        self.n = H.shape[0]
        self._trtrs, = get_lapack_funcs(("trtrs",), (self.L,))

    def _tri_solve(self, v: np.ndarray, trans: int) -> np.ndarray:
        x, info = self._trtrs(self.L, v, lower=1, trans=trans)
        if info != 0:
            raise np.linalg.LinAlgError("singular triangular factor")
        return x

    def h_inv(self, v: np.ndarray) -> np.ndarray:
        return self._tri_solve(self._tri_solve(v, 0), 1)

    def half_solve(self, v: np.ndarray) -> np.ndarray:
        return self._tri_solve(v, 0)

    def back_solve(self, v: np.ndarray) -> np.ndarray:
        return self._tri_solve(v, 1)


def _eqp_solve(ws: _Workspace, N: np.ndarray, c: np.ndarray):
    """Minimize the objective subject to ``N x = c``; returns ``(x, lam)``.

    Raises ``np.linalg.LinAlgError`` when the working-set rows are dependent.
    """
    x_free = -ws.h_inv(ws.g)
    if N.shape[0] == 0:
        return x_free, np.zeros(0)
    Y = ws.half_solve(N.T)
    S = Y.T @ Y
    lam = cho_solve(cho_factor(S, check_finite=False), c - N @ x_free,
                    check_finite=False)
    x = x_free + ws.h_inv(N.T @ lam)
    return x, lam


def solve(problem: QpProblem, warm_start: list[int] | None = None,
          max_iter: int = 500) -> QpSolution:
    """Solve the QP, optionally warm-started from a previous active set.

    The warm start names stacked-inequality indices (``QpSolution.active_set``
    from an earlier solve of a structurally identical problem).  If the warm
    working set turns out degenerate the solver silently restarts cold.
    """
    H = np.asarray(problem.H, dtype=float)
    g = np.asarray(problem.g, dtype=float)
    A_in, b_in = _stack_inequalities(problem)
    m = A_in.shape[0]
    # Normalize inequality rows so the curvature and feasibility tests see
    # unit-scale normals; rows with vanishing normals (possible for
    # constraint data built around near-equilibrium states) would otherwise
    # fail the curvature threshold and read as spurious infeasibility.
    row_scale = np.ones(m)
    if m:
        norms = np.linalg.norm(A_in, axis=1)
        row_scale = np.where(norms > 1e-12, norms, 1.0)
        A_in = A_in / row_scale[:, None]
        b_in = b_in / row_scale
    A_eq = (np.atleast_2d(np.asarray(problem.A_eq, dtype=float))
            if problem.A_eq is not None else np.zeros((0, problem.n)))
    b_eq = (np.atleast_1d(np.asarray(problem.b_eq, dtype=float))
            if problem.A_eq is not None else np.zeros(0))
    me = A_eq.shape[0]

    ws = _Workspace(H, g)

    def make_solution(x, lam_all, active, status, iters):
        lam_eq = lam_all[:me] if me else np.zeros(0)
        lam_in = np.zeros(m)
        for idx, row in enumerate(active):
            lam_in[row] = lam_all[me + idx] / row_scale[row]
        obj = float(0.5 * x @ H @ x + g @ x)
        return QpSolution(x=x, status=status, objective=obj, lam_eq=lam_eq,
                          lam_in=lam_in, active_set=list(active), iterations=iters)

    def prune_dependent(active: list[int]) -> list[int]:
        """Largest well-conditioned subset of the rows, by pivoted QR.

        Warm starts carried across ticks often contain the near-dependent
        working set of an infeasibility proof; factorizing it directly goes
        singular and would silently fall back to a cold solve.
        """
        if len(active) < 2:
            return active
        _, r, piv = qr(A_in[active].T, mode="economic", pivoting=True)
        diag = np.abs(np.diag(r))
        if diag.size == 0 or diag[0] < 1e-12:
            return []
        keep = np.flatnonzero(diag > 1e-8 * diag[0])
        return [active[piv[i]] for i in keep]

    def try_working_set(active: list[int]):
        """EQP solve on equalities plus the given inequality rows, then drop
        rows with negative multipliers until the point is dual feasible."""
        active = prune_dependent([i for i in dict.fromkeys(active) if 0 <= i < m])
        while True:
            N = np.vstack([A_eq, A_in[active]]) if (me or active) else np.zeros((0, problem.n))
            c = np.concatenate([b_eq, b_in[active]])
            x, lam = _eqp_solve(ws, N, c)
            ineq_lam = lam[me:]
            if active and ineq_lam.size and np.min(ineq_lam) < -FEAS_TOL:
                # Stale warm-start rows usually come in batches; dropping
                # every negative-multiplier row at once avoids paying one
                # factorization per dropped row.
                active = [row for row, l in zip(active, ineq_lam) if l >= -FEAS_TOL]
                continue
            return x, lam, active

    potrf, potrs = get_lapack_funcs(("potrf", "potrs"), (H,))

    def chol_spd(S: np.ndarray) -> np.ndarray:
        C, info = potrf(S, lower=1)
        if info != 0:
            raise np.linalg.LinAlgError("dependent working set")
        return C

    def iterate(start: list[int] | None):
        x, lam, active = try_working_set(list(start) if start else [])
        lam = np.asarray(lam, dtype=float).copy()
        # Incremental factors of the working set: Y holds L^-1 times the
        # stacked rows (equalities first) column by column, S its Gram matrix.
        if me or active:
            N0 = np.vstack([A_eq, A_in[active]]) if active else A_eq
            Y = ws.half_solve(np.asfortranarray(N0.T))
        else:
            Y = np.zeros((problem.n, 0))
        S = Y.T @ Y

        for iteration in range(1, max_iter + 1):
            residual = A_in @ x - b_in if m else np.zeros(0)
            if m == 0 or np.min(residual) >= -FEAS_TOL:
                return make_solution(x, lam, active, STATUS_OPTIMAL, iteration)
            p = int(np.argmin(residual))
            n_p = A_in[p]
            half_np = ws.half_solve(n_p)
            h_inv_np = ws.back_solve(half_np)

            # Inner loop: add row p, dropping blockers as needed.  The entering
            # multiplier accumulates over every partial step taken on the way in.
            lam_p = 0.0
            while True:
                if Y.shape[1]:
                    r, info = potrs(chol_spd(S), Y.T @ half_np, lower=1)
                    if info != 0:
                        raise np.linalg.LinAlgError("working-set back solve failed")
                    z = h_inv_np - ws.back_solve(Y @ r)
                else:
                    r = np.zeros(0)
                    z = h_inv_np
                curvature = float(n_p @ z)

                viol = b_in[p] - float(n_p @ x)
                t_full = viol / curvature if curvature > FEAS_TOL else np.inf
                t_drop = np.inf
                drop_idx = -1
                if active:
                    rk = r[me:]
                    with np.errstate(divide="ignore", invalid="ignore"):
                        steps = np.where(rk > FEAS_TOL, lam[me:] / rk, np.inf)
                    j = int(np.argmin(steps))
                    if np.isfinite(steps[j]):
                        t_drop, drop_idx = float(steps[j]), j
                t = min(t_full, t_drop)
                if not np.isfinite(t):
                    y_in = np.zeros(m)
                    y_in[p] = 1.0
                    for k, row in enumerate(active):
                        y_in[row] = max(0.0, -r[me + k])
                    y_in = y_in / row_scale
                    sol = make_solution(x, lam, active, STATUS_INFEASIBLE, iteration)
                    sol.farkas_in = y_in
                    sol.farkas_eq = -np.asarray(r[:me])
                    return sol

                if curvature > FEAS_TOL:
                    x = x + t * z
                lam = lam - t * r
                lam_p += t
                if t_full <= t_drop:
                    active.append(p)
                    lam = np.append(lam, lam_p)
                    k = Y.shape[1]
                    s_new = Y.T @ half_np
                    S_next = np.empty((k + 1, k + 1))
                    S_next[:k, :k] = S
                    S_next[:k, k] = s_new
                    S_next[k, :k] = s_new
                    S_next[k, k] = float(half_np @ half_np)
                    S = S_next
                    Y = np.column_stack([Y, half_np])
                    break
                col = me + drop_idx
                active.pop(drop_idx)
                lam = np.delete(lam, col)
                Y = np.delete(Y, col, axis=1)
                S = np.delete(np.delete(S, col, axis=0), col, axis=1)

        return make_solution(x, lam, active, STATUS_MAX_ITER, max_iter)

    # A nearly dependent working set can make a factorization go singular
    # mid-iteration; restarting cold discards the offending set.
    try:
        return iterate(warm_start)
    except np.linalg.LinAlgError:
        pass
    try:
        return iterate(None)
    except np.linalg.LinAlgError:
        # inconsistent or dependent equality rows, or hopeless conditioning
        return make_solution(np.zeros(problem.n), np.zeros(me), [],
                             STATUS_INFEASIBLE, 0)


def check_kkt(problem: QpProblem, solution: QpSolution) -> KktReport:
    """First-order optimality residuals of a candidate solution."""
    H = np.asarray(problem.H, dtype=float)
    g = np.asarray(problem.g, dtype=float)
    A_in, b_in = _stack_inequalities(problem)
    x = solution.x

    grad = H @ x + g
    if problem.A_eq is not None and solution.lam_eq.size:
        grad = grad - np.atleast_2d(problem.A_eq).T @ solution.lam_eq
    if A_in.shape[0]:
        grad = grad - A_in.T @ solution.lam_in

    primal = 0.0
    if problem.A_eq is not None:
        primal = float(np.max(np.abs(np.atleast_2d(problem.A_eq) @ x
                                     - np.atleast_1d(problem.b_eq)), initial=0.0))
    slack = A_in @ x - b_in if A_in.shape[0] else np.zeros(0)
    primal = max(primal, float(np.max(-slack, initial=0.0)))
    dual = float(np.max(-solution.lam_in, initial=0.0))
    comp = float(np.max(np.abs(solution.lam_in * slack), initial=0.0))
    return KktReport(stationarity=float(np.max(np.abs(grad), initial=0.0)),
                     primal=primal, dual=dual, complementarity=comp)
