"""Receding-horizon transcription and the real-time-iteration control loop.

Each control tick performs one linearize-then-solve pass: the warm-start input
trajectory is rolled out through the node dynamics, RK4 sensitivities are
taken by complex step in a single batched sweep, and the resulting quadratic
program is solved by the dual active-set method in :mod:`.qp`.

The decision variables are deviations from the rollout.  ``transcribe``
exposes the structured multiple-shooting program (state and input deviations
tied by defect equalities); ``rti_step`` solves an algebraically identical
condensed program in the input deviations only, which is far smaller and is
what the dense solver handles fastest.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import qp
from ._kernels import linearize_kernel, rollout_kernel
from .energy import PassivityParams, passivity_residual, passivity_row, physical_force
from .model import SWING_DOMAIN_LIMIT, ModelParams, SystemState, state_derivative
from .obstacles import obstacle_position
from .safety import Body, SafetyParams, min_distance
from .sim import (
    STATUS_INFEASIBLE,
    STATUS_MAX_ITER,
    STATUS_OPTIMAL,
    ControlOutput,
)

SAFETY_NONE = "none"
SAFETY_STATE = "state"
SAFETY_FIRST_ORDER = "first_order"
SAFETY_HOCBF = "hocbf"
SAFETY_MODES = (SAFETY_NONE, SAFETY_STATE, SAFETY_FIRST_ORDER, SAFETY_HOCBF)

# Complex-step size; exact to machine precision, no subtractive cancellation.
_CSTEP = 1e-30


class RolloutError(RuntimeError):
    """The warm-start rollout left the model's swing domain or diverged."""


def _default_q() -> np.ndarray:
    return np.array([10.0, 10.0, 10.0, 5.0, 5.0, 1.0, 1.0, 1.0, 1.0, 1.0])


@dataclass(frozen=True)
class OcpConfig:
    """Horizon, weights, and constraint-set selection for one controller."""

    horizon: float = 2.0
    n_nodes: int = 40
    q_weights: np.ndarray = field(default_factory=_default_q)
    r_weight: float = 0.1
    terminal_factor: float = 10.0
    swing_weight: float = 1e4
    slack_reg: float = 1e-6
    safety_mode: str = SAFETY_HOCBF
    passivity: bool = True
    exact_passivity: bool = False
    max_cuts: int = 8
    cut_tol: float = 1e-9
    # Exact-penalty weight on the shared dissipation slack: large enough to
    # dominate the constraint multipliers, so the slack is zero whenever the
    # hard program is feasible and minimal when barrier rows conflict.
    passivity_slack_weight: float = 1e4
    # Per-node storage-increase budget [J] that stops the node-0 cut loop.
    cut_budget: float = 2e-5
    # Row screening for the condensed solve: swing rows are generated only
    # when the predicted angle exceeds this fraction of the bound, barrier
    # rows only when the squared clearance is below this threshold [m^2].
    # Screened-out rows are slack at the optimum by a wide margin.
    swing_screen: float = 0.5
    safety_screen: float = 25.0

    def __post_init__(self):
        if self.horizon <= 0.0 or self.n_nodes < 1:
            raise ValueError("horizon must be positive with at least one node")
        q = np.asarray(self.q_weights, dtype=float)
        if q.shape != (10,) or np.min(q) < 0.0:
            raise ValueError("q_weights must be 10 non-negative entries")
        if self.r_weight <= 0.0:
            raise ValueError("r_weight must be strictly positive")
        if self.terminal_factor < 0.0 or self.swing_weight < 0.0 or self.slack_reg <= 0.0:
            raise ValueError("weights must be non-negative, slack_reg positive")
        if self.passivity_slack_weight <= 0.0 or self.cut_budget <= 0.0:
            raise ValueError("passivity_slack_weight and cut_budget must be positive")
        if self.safety_mode not in SAFETY_MODES:
            raise ValueError(f"safety_mode must be one of {SAFETY_MODES}")
        object.__setattr__(self, "q_weights", q)

    @property
    def dt_node(self) -> float:
        return self.horizon / self.n_nodes


@dataclass
class WarmStart:
    """Input trajectory and active set carried between control ticks.

    Active-set entries are structural row labels (see ``_condensed_problem``),
    not stacked indices, so they stay meaningful when row screening changes
    the layout between ticks.
    """

    u_a: np.ndarray             # (N, 3)
    active_set: list[tuple] = field(default_factory=list)
    # Terminal set of the slack-relaxed retry, kept separately because the
    # base and relaxed programs settle into different working sets.
    relax_active_set: list[tuple] = field(default_factory=list)


@dataclass
class OcpSolution:
    u_a: np.ndarray             # (N, 3) inputs after the correction step
    states: np.ndarray          # (N+1, 10) nonlinear rollout of those inputs
    status: str
    kkt_residual: float
    solve_time: float           # seconds, linearization + QP
    active_counts: dict
    objective: float = 0.0
    qp_iterations: int = 0      # summed over the base solve and every cut re-solve
    cuts: int = 0
    active_set: list[tuple] = field(default_factory=list)
    relax_active_set: list[tuple] = field(default_factory=list)


def cold_start(cfg: OcpConfig) -> WarmStart:
    return WarmStart(u_a=np.zeros((cfg.n_nodes, 3)))


def shift_warm_start(previous: OcpSolution) -> WarmStart:
    """Shift the solved trajectory and active set one node, duplicating the tail."""
    u = np.vstack([previous.u_a[1:], previous.u_a[-1:]])
    return WarmStart(u_a=u, active_set=_shift_labels(previous.active_set),
                     relax_active_set=_shift_labels(previous.relax_active_set))


# ---------------------------------------------------------------------------
# Node dynamics, rollout, and batched sensitivities


def node_force(x, u_a, xi_d, model_params: ModelParams, pass_params: PassivityParams):
    """Physical force encoded by a shaped input at a node state (batched)."""
    e = x[..., 0:3] - xi_d
    return u_a - e @ pass_params.shaping + model_params.hover_thrust()


def node_step(x, u_a, xi_d, dt, model_params: ModelParams, pass_params: PassivityParams):
    """One RK4 step of the prediction model with the force held over the node."""
    force = node_force(x, u_a, xi_d, model_params, pass_params)
    k1 = state_derivative(x, force, model_params)
    k2 = state_derivative(x + dt / 2 * k1, force, model_params)
    k3 = state_derivative(x + dt / 2 * k2, force, model_params)
    k4 = state_derivative(x + dt * k3, force, model_params)
    return x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def _kernel_args(xi_d, model_params: ModelParams, pass_params: PassivityParams):
    # The compiled kernels apply the shaping gain row-major, so pass its
    # transpose to match the batched ``e @ K`` convention used here.
    return (np.asarray(xi_d, dtype=float), np.ascontiguousarray(pass_params.shaping.T),
            model_params.total_mass * model_params.g, model_params.m_l,
            model_params.m_q, model_params.l, model_params.g)


def rollout(state: SystemState, U: np.ndarray, xi_d, cfg: OcpConfig,
            model_params: ModelParams, pass_params: PassivityParams) -> np.ndarray:
    """Nonlinear rollout of an input trajectory from the measured state."""
    xi_d, K, hover_z, m_l, m_q, l, g = _kernel_args(xi_d, model_params, pass_params)
    X, ok = rollout_kernel(state.as_vector(), np.asarray(U, dtype=float), xi_d, K,
                           hover_z, cfg.dt_node, m_l, m_q, l, g, SWING_DOMAIN_LIMIT)
    if not ok:
        raise RolloutError("prediction left the model domain")
    return X


def rollout_reference(state: SystemState, U: np.ndarray, xi_d, cfg: OcpConfig,
                      model_params: ModelParams, pass_params: PassivityParams) -> np.ndarray:
    """Pure-numpy rollout used to cross-check the compiled kernel."""
    N = cfg.n_nodes
    X = np.empty((N + 1, 10))
    X[0] = state.as_vector()
    for k in range(N):
        X[k + 1] = node_step(X[k], U[k], xi_d, cfg.dt_node, model_params, pass_params).real
        if not np.all(np.isfinite(X[k + 1])) or np.max(np.abs(X[k + 1, 3:5])) >= SWING_DOMAIN_LIMIT:
            raise RolloutError(f"prediction left the model domain at node {k + 1}")
    return X


def linearize(state: SystemState, U: np.ndarray, xi_d, cfg: OcpConfig,
              model_params: ModelParams, pass_params: PassivityParams):
    """Rollout plus exact discrete sensitivities ``(X, A, B)`` in one pass.

    Node ``k+1`` satisfies ``dx_{k+1} = A[k] dx_k + B[k] du_k`` to first
    order; derivatives come from a complex step batched over all thirteen
    perturbation directions at once.
    """
    xi_d, K, hover_z, m_l, m_q, l, g = _kernel_args(xi_d, model_params, pass_params)
    X, A, B, ok = linearize_kernel(state.as_vector(), np.asarray(U, dtype=float),
                                   xi_d, K, hover_z, cfg.dt_node, m_l, m_q, l, g,
                                   SWING_DOMAIN_LIMIT, _CSTEP)
    if not ok:
        raise RolloutError("prediction left the model domain")
    return X, A, B


def linearize_reference(state: SystemState, U: np.ndarray, xi_d, cfg: OcpConfig,
                        model_params: ModelParams, pass_params: PassivityParams):
    """Pure-numpy twin of ``linearize`` used to cross-check the kernel."""
    N, dt = cfg.n_nodes, cfg.dt_node
    h = _CSTEP
    pert = np.vstack([np.zeros((1, 13)), 1j * h * np.eye(13)])
    X = np.empty((N + 1, 10))
    A = np.empty((N, 10, 10))
    B = np.empty((N, 10, 3))
    X[0] = state.as_vector()
    for k in range(N):
        Z = np.concatenate([X[k], U[k]])[None, :] + pert
        nxt = node_step(Z[:, :10], Z[:, 10:], xi_d, dt, model_params, pass_params)
        X[k + 1] = nxt[0].real
        if not np.all(np.isfinite(X[k + 1])) or np.max(np.abs(X[k + 1, 3:5])) >= SWING_DOMAIN_LIMIT:
            raise RolloutError(f"prediction left the model domain at node {k + 1}")
        D = nxt[1:].imag / h
        A[k] = D[:10].T
        B[k] = D[10:].T
    return X, A, B


def prime_kernels() -> None:
    """Force compilation of the jitted dynamics kernels ahead of the loop.

    The first call into a cached kernel still pays a dispatch and cache-load
    cost of tens of milliseconds; running a one-node problem here keeps that
    out of the first control tick.
    """
    x0 = SystemState.hover([0.0, 0.0, 1.0]).as_vector()
    U = np.zeros((1, 3))
    args = (x0, U, np.zeros(3), np.eye(3), 1.0, 0.01, 0.2, 1.5, 0.5, 9.81,
            SWING_DOMAIN_LIMIT)
    rollout_kernel(*args)
    linearize_kernel(*args, _CSTEP)


def condense(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Sensitivities of the stacked state deviations to the stacked inputs.

    ``E[k]`` maps the flattened input deviation vector to ``dx_{k+1}``.
    """
    N = A.shape[0]
    E = np.zeros((N, 10, 3 * N))
    E[0][:, 0:3] = B[0]
    for k in range(1, N):
        E[k] = A[k] @ E[k - 1]
        E[k][:, 3 * k:3 * k + 3] = B[k]
    return E


# ---------------------------------------------------------------------------
# Batched barrier quantities over the rollout


def _payload_jacobian(gamma: np.ndarray, l: float):
    """``d p_L / d gamma`` for a batch of swing angles; shape (M, 3, 2)."""
    ca, sa = np.cos(gamma[:, 0]), np.sin(gamma[:, 0])
    cb, sb = np.cos(gamma[:, 1]), np.sin(gamma[:, 1])
    J = np.empty(gamma.shape[:1] + (3, 2))
    J[:, 0, 0] = ca * cb
    J[:, 0, 1] = -sa * sb
    J[:, 1, 0] = 0.0
    J[:, 1, 1] = cb
    J[:, 2, 0] = sa * cb
    J[:, 2, 1] = ca * sb
    return l * J


def _body_batch(X: np.ndarray, p: ModelParams):
    """Positions and velocities of both bodies along a rollout (batched)."""
    gamma = X[:, 3:5]
    ca, sa = np.cos(gamma[:, 0]), np.sin(gamma[:, 0])
    cb, sb = np.cos(gamma[:, 1]), np.sin(gamma[:, 1])
    direction = np.stack([sa * cb, sb, -ca * cb], axis=1)
    J = _payload_jacobian(gamma, p.l)
    p_q = X[:, 0:3]
    v_q = X[:, 5:8]
    p_l = p_q + p.l * direction
    v_l = v_q + np.einsum("mij,mj->mi", J, X[:, 8:10])
    return p_q, v_q, p_l, v_l, J


def _gv_batch(gamma: np.ndarray, p: ModelParams):
    """Translational input map of the force channel along a rollout."""
    cb = np.cos(gamma[:, 1])
    Mc = p.m_l * _payload_jacobian(gamma, 1.0)  # m_l * d(dir)/d(gamma), l cancels
    Mc = Mc * p.l
    s = p.m_l * p.l**2 * (p.m_q / p.total_mass)
    S_inv = np.stack([1.0 / (s * cb**2), np.full(gamma.shape[0], 1.0 / s)], axis=1)
    G = np.einsum("mik,mk,mjk->mij", Mc, S_inv, Mc) / p.total_mass**2
    G += np.eye(3) / p.total_mass
    return G


def _accelerations_batch(X: np.ndarray, forces: np.ndarray, p: ModelParams):
    """Quadrotor and payload accelerations under per-node forces (batched)."""
    deriv = state_derivative(X, forces, p)
    xi_dd = deriv[:, 5:8]
    add, bdd = deriv[:, 8], deriv[:, 9]
    gamma = X[:, 3:5]
    ad, bd = X[:, 8], X[:, 9]
    ca, sa = np.cos(gamma[:, 0]), np.sin(gamma[:, 0])
    cb, sb = np.cos(gamma[:, 1]), np.sin(gamma[:, 1])
    ddirx = (ca * cb * add - sa * sb * bdd
             + (-sa * cb * ad - ca * sb * bd) * ad + (-ca * sb * ad - sa * cb * bd) * bd)
    ddiry = cb * bdd - sb * bd * bd
    ddirz = (sa * cb * add + ca * sb * bdd
             + (ca * cb * ad - sa * sb * bd) * ad + (-sa * sb * ad + ca * cb * bd) * bd)
    pl_dd = xi_dd + p.l * np.stack([ddirx, ddiry, ddirz], axis=1)
    return xi_dd, pl_dd


def _payload_velocity_jacobian(X: np.ndarray, p: ModelParams):
    """``d v_L / d gamma`` along a rollout; shape (M, 3, 2)."""
    gamma = X[:, 3:5]
    ad, bd = X[:, 8], X[:, 9]
    ca, sa = np.cos(gamma[:, 0]), np.sin(gamma[:, 0])
    cb, sb = np.cos(gamma[:, 1]), np.sin(gamma[:, 1])
    out = np.empty((X.shape[0], 3, 2))
    out[:, 0, 0] = -sa * cb * ad - ca * sb * bd
    out[:, 1, 0] = 0.0
    out[:, 2, 0] = ca * cb * ad - sa * sb * bd
    out[:, 0, 1] = -ca * sb * ad - sa * cb * bd
    out[:, 1, 1] = -sb * bd
    out[:, 2, 1] = -sa * sb * ad + ca * cb * bd
    return p.l * out


def barrier_batch(X: np.ndarray, times: np.ndarray, obstacles,
                  safety_params: SafetyParams, model_params: ModelParams,
                  input_offsets: np.ndarray | None = None):
    """Barrier values and derivatives for every (obstacle, body) pair, batched.

    Returns a list of dicts (obstacle-major, quadrotor before payload), each
    holding ``h``, ``h_dot``, state gradients of ``h`` and ``h_dot``, and,
    when ``input_offsets`` is given, the drift term and input row of the
    second derivative.
    """
    M = X.shape[0]
    p_q, v_q, p_l, v_l, J = _body_batch(X, model_params)
    Jv = _payload_velocity_jacobian(X, model_params)
    if input_offsets is not None:
        # Both body channels share the quadrotor input map: the drift is the
        # exact unforced acceleration and the offset force enters through G_v,
        # matching the single-pair barrier rows in the safety module.
        G_v = _gv_batch(X[:, 3:5], model_params)
        acc_q, acc_l = _accelerations_batch(X, np.zeros((M, 3)), model_params)
        forced = np.einsum("mij,mj->mi", G_v, input_offsets)
        acc_q = acc_q + forced
        acc_l = acc_l + forced
    out = []
    for obs in obstacles:
        centers = np.array([obstacle_position(obs, float(tk))[0] for tk in times])
        v_o = obs.velocity + obs.acceleration * times[:, None]
        a_o = obs.acceleration
        for body, pos, vel in ((Body.QUADROTOR, p_q, v_q), (Body.PAYLOAD, p_l, v_l)):
            r = pos - centers
            rel_v = vel - v_o
            d = min_distance(obs, body, safety_params)
            h = np.einsum("mi,mi->m", r, r) - d**2
            h_dot = 2.0 * np.einsum("mi,mi->m", r, rel_v)
            grad_h = np.zeros((M, 10))
            grad_h[:, 0:3] = 2.0 * r
            grad_hdot = np.zeros((M, 10))
            grad_hdot[:, 0:3] = 2.0 * rel_v
            grad_hdot[:, 5:8] = 2.0 * r
            if body is Body.PAYLOAD:
                grad_h[:, 3:5] = 2.0 * np.einsum("mij,mi->mj", J, r)
                grad_hdot[:, 3:5] = 2.0 * (np.einsum("mij,mi->mj", J, rel_v)
                                           + np.einsum("mij,mi->mj", Jv, r))
                grad_hdot[:, 8:10] = 2.0 * np.einsum("mij,mi->mj", J, r)
            entry = {"obstacle_id": obs.id, "body": body, "h": h, "h_dot": h_dot,
                     "grad_h": grad_h, "grad_hdot": grad_hdot}
            if input_offsets is not None:
                acc = acc_q if body is Body.QUADROTOR else acc_l
                entry["h_ddot_drift"] = (2.0 * np.einsum("mi,mi->m", rel_v, rel_v)
                                         + 2.0 * np.einsum("mi,mi->m", r, acc - a_o))
                entry["input_row"] = 2.0 * np.einsum("mi,mij->mj", r, G_v)
            out.append(entry)
    return out


# ---------------------------------------------------------------------------
# Transcription


@dataclass
class Transcription:
    """Structured QP plus the bookkeeping shared with the condensed form."""

    problem: qp.QpProblem
    X: np.ndarray
    A: np.ndarray
    B: np.ndarray
    n_passivity: int
    n_safety: int
    n_swing: int


def _goal_state(xi_d) -> np.ndarray:
    goal = np.zeros(10)
    goal[0:3] = np.asarray(xi_d, dtype=float)
    return goal


def _stage_weights(cfg: OcpConfig) -> np.ndarray:
    Qk = np.tile(cfg.q_weights, (cfg.n_nodes, 1))
    Qk[-1] *= cfg.terminal_factor
    return Qk


def _input_offsets(X: np.ndarray, xi_d, model_params, pass_params) -> np.ndarray:
    """Per-node physical force applied when the shaped input is zero."""
    e = X[:, 0:3] - np.asarray(xi_d, dtype=float)
    return model_params.hover_thrust() - e @ pass_params.shaping


def _constraint_data(X, U, xi_d, obstacles, t, cfg: OcpConfig,
                     model_params, safety_params, pass_params):
    """Everything both QP forms need: row data per category.

    Safety rows come in two flavors.  Input-coupled rows (high-order mode)
    constrain ``u_a`` at nodes 0..N-1 with frozen coefficients.  State rows
    (state and first-order modes) constrain the predicted deviation at nodes
    1..N through the condensing map.
    """
    N = cfg.n_nodes
    dt = cfg.dt_node
    data = {"input_rows": [], "state_rows": []}

    if cfg.passivity:
        a = X[:N, 5:8] + 2.0 * pass_params.epsilon * U
        ub = (-pass_params.rho * np.einsum("mi,mi->m", X[:N, 5:8], X[:N, 5:8])
              + pass_params.epsilon * np.einsum("mi,mi->m", U, U))
        data["passivity_a"] = a
        data["passivity_ub"] = ub
    if obstacles and cfg.safety_mode == SAFETY_HOCBF:
        times = t + dt * np.arange(N)
        offsets = _input_offsets(X[:N], xi_d, model_params, pass_params)
        for entry in barrier_batch(X[:N], times, obstacles, safety_params,
                                   model_params, input_offsets=offsets):
            psi1 = entry["h_dot"] + safety_params.kappa1 * entry["h"]
            rhs = -(entry["h_ddot_drift"] + safety_params.kappa1 * entry["h_dot"]
                    + safety_params.kappa2 * psi1)
            data["input_rows"].append((entry["input_row"], rhs, entry["h"]))
    elif obstacles and cfg.safety_mode in (SAFETY_STATE, SAFETY_FIRST_ORDER):
        times = t + dt * np.arange(1, N + 1)
        for entry in barrier_batch(X[1:], times, obstacles, safety_params, model_params):
            if cfg.safety_mode == SAFETY_STATE:
                grad, ref = entry["grad_h"], entry["h"]
            else:
                grad = entry["grad_hdot"] + safety_params.kappa1 * entry["grad_h"]
                ref = entry["h_dot"] + safety_params.kappa1 * entry["h"]
            data["state_rows"].append((grad, ref, entry["h"]))

    offsets = _input_offsets(X[:N], xi_d, model_params, pass_params)
    data["u_lb"] = -model_params.u_max - offsets - U
    data["u_ub"] = model_params.u_max - offsets - U
    return data


def transcribe(state: SystemState, xi_d, obstacles, t: float, warm_start: WarmStart,
               cfg: OcpConfig, model_params: ModelParams,
               safety_params: SafetyParams, pass_params: PassivityParams) -> Transcription:
    """Structured multiple-shooting QP in the state and input deviations.

    Variable layout: ``z = [dx_1..dx_N, du_0..du_{N-1}, s_1..s_N]`` with two
    swing slacks per node.  Defect equalities tie the state deviations to the
    inputs; all constraint rows act on the node they belong to.
    """
    N = cfg.n_nodes
    U = np.asarray(warm_start.u_a, dtype=float)
    X, A, B = linearize(state, U, xi_d, cfg, model_params, pass_params)
    nx, nu, ns = 10 * N, 3 * N, 2 * N
    nz = nx + nu + ns

    Qk = _stage_weights(cfg)
    dx = X[1:] - _goal_state(xi_d)
    H = np.zeros((nz, nz))
    g = np.zeros(nz)
    H[:nx, :nx] = np.diag(Qk.ravel())
    g[:nx] = (Qk * dx).ravel()
    H[nx:nx + nu, nx:nx + nu] = cfg.r_weight * np.eye(nu)
    g[nx:nx + nu] = cfg.r_weight * U.ravel()
    H[nx + nu:, nx + nu:] = cfg.slack_reg * np.eye(ns)
    g[nx + nu:] = cfg.swing_weight

    A_eq = np.zeros((nx, nz))
    b_eq = np.zeros(nx)
    for k in range(N):
        rows = slice(10 * k, 10 * k + 10)
        A_eq[rows, 10 * k:10 * k + 10] = np.eye(10)
        if k > 0:
            A_eq[rows, 10 * (k - 1):10 * k] = -A[k]
        A_eq[rows, nx + 3 * k:nx + 3 * k + 3] = -B[k]

    data = _constraint_data(X, U, xi_d, obstacles, t, cfg,
                            model_params, safety_params, pass_params)
    rows, rhs = [], []
    n_passivity = 0
    if "passivity_a" in data:
        for k in range(N):
            row = np.zeros(nz)
            row[nx + 3 * k:nx + 3 * k + 3] = -data["passivity_a"][k]
            rows.append(row)
            rhs.append(data["passivity_a"][k] @ U[k] - data["passivity_ub"][k])
        n_passivity = N
    n_safety = 0
    for a_nodes, b_nodes, _ in data["input_rows"]:
        for k in range(N):
            row = np.zeros(nz)
            row[nx + 3 * k:nx + 3 * k + 3] = a_nodes[k]
            rows.append(row)
            rhs.append(b_nodes[k] - a_nodes[k] @ U[k])
            n_safety += 1
    for grad_nodes, ref_nodes, _ in data["state_rows"]:
        for k in range(N):
            row = np.zeros(nz)
            row[10 * k:10 * k + 10] = grad_nodes[k]
            rows.append(row)
            rhs.append(-ref_nodes[k])
            n_safety += 1
    n_swing = 0
    for k in range(N):
        for j in range(2):
            ref = X[k + 1, 3 + j]
            s_col = nx + nu + 2 * k + j
            row = np.zeros(nz)
            row[10 * k + 3 + j] = -1.0
            row[s_col] = 1.0
            rows.append(row)
            rhs.append(ref - model_params.swing_max)
            row = np.zeros(nz)
            row[10 * k + 3 + j] = 1.0
            row[s_col] = 1.0
            rows.append(row)
            rhs.append(-model_params.swing_max - ref)
            n_swing += 2

    lb = np.full(nz, -np.inf)
    ub = np.full(nz, np.inf)
    lb[nx:nx + nu] = data["u_lb"].ravel()
    ub[nx:nx + nu] = data["u_ub"].ravel()
    lb[nx + nu:] = 0.0

    problem = qp.QpProblem(H=H, g=g, A_eq=A_eq, b_eq=b_eq,
                           A_in=np.array(rows) if rows else None,
                           b_in=np.array(rhs) if rows else None,
                           lb=lb, ub=ub)
    return Transcription(problem=problem, X=X, A=A, B=B, n_passivity=n_passivity,
                         n_safety=n_safety, n_swing=n_swing)


def _condensed_problem(X, A, B, U, xi_d, obstacles, t, cfg: OcpConfig,
                       model_params, safety_params, pass_params,
                       relax_passivity: bool = False):
    """Equivalent QP in ``z = [du, s]`` after eliminating the defects.

    Swing and barrier rows that are slack by a wide margin at the rollout are
    screened out (see ``OcpConfig``); slack variables exist only for the
    swing rows that survive.  Returns the problem, the condensing map, and a
    bookkeeping dict with row counts, the stacked indices of the slack lower
    bounds (pre-activated in the QP warm start), and a label per stacked
    inequality row.  Labels name rows structurally, so an active set carried
    across ticks survives screening-induced layout changes.
    """
    N = cfg.n_nodes
    nu = 3 * N
    E = condense(A, B)
    Emat = E.reshape(10 * N, nu)
    Qk = _stage_weights(cfg)
    w = Qk.ravel()
    dx = (X[1:] - _goal_state(xi_d)).ravel()
    EW = Emat * w[:, None]

    data = _constraint_data(X, U, xi_d, obstacles, t, cfg,
                            model_params, safety_params, pass_params)
    swing_idx = [(k, j) for k in range(N) for j in range(2)
                 if abs(X[k + 1, 3 + j]) > cfg.swing_screen * model_params.swing_max]
    ns = len(swing_idx)
    # When requested, one shared penalized slack relaxes the dissipation
    # rows, so a conflict with barrier rows degrades dissipation minimally
    # instead of making the program infeasible.  The slack stays out of the
    # default build: small-normal dissipation rows carry large multipliers
    # that would buy the slack whenever tracking is aggressive.
    has_pass = "passivity_a" in data
    relax = relax_passivity and has_pass
    sp = nu + ns if relax else None
    nv = nu + ns + (1 if relax else 0)

    H = np.zeros((nv, nv))
    H[:nu, :nu] = EW.T @ Emat + cfg.r_weight * np.eye(nu)
    H[nu:, nu:] = cfg.slack_reg * np.eye(nv - nu)
    g = np.zeros(nv)
    g[:nu] = EW.T @ dx + cfg.r_weight * U.ravel()
    g[nu:nu + ns] = cfg.swing_weight
    if relax:
        g[sp] = cfg.passivity_slack_weight

    rows, rhs, labels = [], [], []
    n_passivity = 0
    if has_pass:
        for k in range(N):
            a_k = data["passivity_a"][k]
            rhs_k = a_k @ U[k] - data["passivity_ub"][k]
            # A vanishing normal with non-positive right-hand side constrains
            # nothing; keeping it would leave the working set nearly dependent
            # whenever the slack column dominates the normalized row.
            if float(a_k @ a_k) < 1e-8 and rhs_k <= 0.0:
                continue
            row = np.zeros(nv)
            row[3 * k:3 * k + 3] = -a_k
            if relax:
                row[sp] = 1.0
            rows.append(row)
            rhs.append(rhs_k)
            labels.append(("pass", k))
            n_passivity += 1
    n_safety = 0
    for pair, (a_nodes, b_nodes, h_nodes) in enumerate(data["input_rows"]):
        for k in range(N):
            if h_nodes[k] >= cfg.safety_screen:
                continue
            row = np.zeros(nv)
            row[3 * k:3 * k + 3] = a_nodes[k]
            rows.append(row)
            rhs.append(b_nodes[k] - a_nodes[k] @ U[k])
            labels.append(("cbf", pair, k))
            n_safety += 1
    for pair, (grad_nodes, ref_nodes, h_nodes) in enumerate(data["state_rows"]):
        for k in range(N):
            if h_nodes[k] >= cfg.safety_screen:
                continue
            row = np.zeros(nv)
            row[:nu] = grad_nodes[k] @ E[k]
            rows.append(row)
            rhs.append(-ref_nodes[k])
            labels.append(("sc", pair, k))
            n_safety += 1
    for s_idx, (k, j) in enumerate(swing_idx):
        e_row = E[k][3 + j]
        ref = X[k + 1, 3 + j]
        s_col = nu + s_idx
        row = np.zeros(nv)
        row[:nu] = -e_row
        row[s_col] = 1.0
        rows.append(row)
        rhs.append(ref - model_params.swing_max)
        labels.append(("sw", k, j, 0))
        row = np.zeros(nv)
        row[:nu] = e_row
        row[s_col] = 1.0
        rows.append(row)
        rhs.append(-model_params.swing_max - ref)
        labels.append(("sw", k, j, 1))

    lb = np.full(nv, -np.inf)
    ub = np.full(nv, np.inf)
    lb[:nu] = data["u_lb"].ravel()
    ub[:nu] = data["u_ub"].ravel()
    lb[nu:] = 0.0
    # Stacked-inequality order: explicit rows, then one lb row per finite
    # lower bound in variable order, then one ub row per finite upper bound.
    labels = (labels
              + [("ulb", v) for v in range(nu)]
              + [("slb", k, j) for (k, j) in swing_idx]
              + ([("plb",)] if relax else [])
              + [("uub", v) for v in range(nu)])
    slack_lb_rows = [len(rows) + nu + i for i in range(nv - nu)]
    meta = {"n_passivity": n_passivity, "n_safety": n_safety,
            "n_swing": 2 * ns, "slack_lb_rows": slack_lb_rows,
            "labels": labels, "pass_slack_col": sp}
    problem = qp.QpProblem(H=H, g=g, A_in=np.array(rows) if rows else None,
                           b_in=np.array(rhs) if rows else None, lb=lb, ub=ub)
    return problem, E, meta


def _count_active(solution: qp.QpSolution, labels) -> dict:
    counts = {"passivity": 0, "safety": 0, "other": 0}
    for idx in solution.active_set:
        if solution.lam_in[idx] <= 0.0:
            continue
        kind = labels[idx][0]
        if kind in ("pass", "cut"):
            counts["passivity"] += 1
        elif kind in ("cbf", "sc"):
            counts["safety"] += 1
        else:
            counts["other"] += 1
    return counts


def _shift_labels(labels) -> list:
    """Move every node-indexed row label one node earlier, dropping node 0.

    Input-bound labels index flattened variables, so they shift by one node's
    worth of entries; cutting-plane labels do not survive a shift.
    """
    out = []
    for lab in labels:
        kind = lab[0]
        if kind == "pass" and lab[1] > 0:
            out.append(("pass", lab[1] - 1))
        elif kind in ("cbf", "sc") and lab[2] > 0:
            out.append((kind, lab[1], lab[2] - 1))
        elif kind == "sw" and lab[1] > 0:
            out.append(("sw", lab[1] - 1, lab[2], lab[3]))
        elif kind == "slb" and lab[1] > 0:
            out.append(("slb", lab[1] - 1, lab[2]))
        elif kind in ("ulb", "uub") and lab[1] >= 3:
            out.append((kind, lab[1] - 3))
        elif kind == "plb":
            out.append(lab)
    return out


def rti_step(state: SystemState, xi_d, obstacles, t: float, warm_start: WarmStart,
             cfg: OcpConfig, model_params: ModelParams,
             safety_params: SafetyParams, pass_params: PassivityParams) -> OcpSolution:
    """One linearize-then-solve pass of the real-time iteration.

    Never raises on solver trouble: infeasibility and domain failures come
    back as a status for the caller's fallback logic.  When passivity is on,
    cutting planes re-linearized at the corrected first input tighten node 0
    until its estimated storage gain over one node falls under ``cut_budget``
    (the linearized row alone leaves no handle on the input when the measured
    velocity vanishes); ``exact_passivity`` instead cuts every node down to
    the full quadratic residual.  Cuts share the dissipation slack, so a cut
    that conflicts with barrier rows degrades dissipation minimally instead
    of failing; a cut solve that still comes back non-optimal is discarded
    and the last feasible solution kept.
    """
    tic = time.perf_counter()
    xi_d = np.asarray(xi_d, dtype=float)
    N = cfg.n_nodes
    U = np.asarray(warm_start.u_a, dtype=float)

    def fail(status):
        return OcpSolution(u_a=U, states=np.tile(state.as_vector(), (N + 1, 1)),
                           status=status, kkt_residual=np.inf,
                           solve_time=time.perf_counter() - tic, active_counts={})

    try:
        X, A, B = linearize(state, U, xi_d, cfg, model_params, pass_params)
    except RolloutError:
        U = np.zeros((N, 3))
        try:
            X, A, B = linearize(state, U, xi_d, cfg, model_params, pass_params)
        except RolloutError:
            return fail(STATUS_INFEASIBLE)

    exact = cfg.exact_passivity
    nodes = range(N) if exact else range(1)
    dt = cfg.dt_node
    m_t = model_params.total_mass

    def storage_gain(u_k, v):
        """Upper estimate of the storage gained over one node under a held
        force: the linearized excess plus the second-order term from the
        velocity the input itself builds up."""
        excess = float(u_k @ v) + pass_params.rho * float(v @ v)
        return dt * excess + 0.5 * dt**2 * float(u_k @ u_k) / m_t

    def needs_cut(u_k, v):
        if exact:
            return passivity_residual(u_k, v, pass_params) > cfg.cut_tol
        return storage_gain(u_k, v) > cfg.cut_budget

    def cut_row(u_k, v):
        """One supporting hyperplane of the node-gain constraint at the
        current input, as ``(a, ub)`` encoding ``a . u <= ub``.

        In exact mode this is the linearized quadratic residual.  The budget
        set ``storage_gain(u) <= budget/2`` is a ball in the input, so the
        default cut is its tangent plane at the projection of the current
        input: the deepest valid cut, which settles the re-solve in one or
        two rounds where a linearization at the iterate crawls geometrically.
        """
        if exact:
            a, ub = passivity_row(u_k, v, pass_params)
            return a, ub
        target = 0.5 * cfg.cut_budget
        center = -(m_t / dt) * v
        r2 = (float(center @ center)
              - (2.0 * m_t / dt**2) * (dt * pass_params.rho * float(v @ v) - target))
        radius = np.sqrt(max(r2, 0.0))
        d = u_k - center
        dist = float(np.linalg.norm(d))
        if dist <= 1e-12:
            d, dist = np.array([1.0, 0.0, 0.0]), 1.0
        w = center + d * (radius / dist)
        a = dt * v + (dt**2 / m_t) * w
        return a, float(a @ w)

    total_iters = [0]

    def attempt(relax: bool, warm_labels: list[tuple] | None = None):
        """Solve and run the cutting loop; flags a cut that lost feasibility."""
        problem, _, meta = _condensed_problem(X, A, B, U, xi_d, obstacles, t, cfg,
                                              model_params, safety_params,
                                              pass_params, relax_passivity=relax)
        labels = list(meta["labels"])
        index_of = {lab: i for i, lab in enumerate(labels)}
        if warm_labels is None:
            warm_labels = warm_start.active_set
        warm_idx = [index_of[lab] for lab in warm_labels if lab in index_of]
        sol = qp.solve(problem, warm_start=warm_idx + meta["slack_lb_rows"])
        total_iters[0] += sol.iterations
        cuts = 0
        cut_failed = False
        prev_gain = np.inf
        if sol.status == qp.STATUS_OPTIMAL and cfg.passivity:
            for _ in range(cfg.max_cuts):
                du = sol.x[:3 * N].reshape(N, 3)
                u_new = U + du
                round_gain = max(storage_gain(u_new[k], X[k, 5:8]) for k in nodes)
                if relax and round_gain > 0.5 * prev_gain:
                    # With the slack active the loop can only shave the
                    # genuine conflict's residual; stop once cuts stall.
                    break
                prev_gain = round_gain
                extra_rows, extra_rhs, extra_labels = [], [], []
                for k in nodes:
                    v = X[k, 5:8]
                    if needs_cut(u_new[k], v):
                        a, ub_k = cut_row(u_new[k], v)
                        row = np.zeros(problem.n)
                        row[3 * k:3 * k + 3] = -a
                        if meta["pass_slack_col"] is not None:
                            row[meta["pass_slack_col"]] = 1.0
                        extra_rows.append(row)
                        extra_rhs.append(a @ U[k] - ub_k)
                        extra_labels.append(("cut", cuts + len(extra_labels)))
                if not extra_rows:
                    break
                # Cut rows extend the explicit block, so every bound row
                # shifts; remap the active set through labels on re-solve.
                n_explicit = problem.A_in.shape[0] if problem.A_in is not None else 0
                A_in = (np.vstack([problem.A_in, np.array(extra_rows)])
                        if problem.A_in is not None else np.array(extra_rows))
                b_in = (np.concatenate([problem.b_in, np.array(extra_rhs)])
                        if problem.b_in is not None else np.array(extra_rhs))
                new_problem = qp.QpProblem(H=problem.H, g=problem.g, A_in=A_in,
                                           b_in=b_in, lb=problem.lb, ub=problem.ub)
                new_labels = labels[:n_explicit] + extra_labels + labels[n_explicit:]
                new_index = {lab: i for i, lab in enumerate(new_labels)}
                new_sol = qp.solve(new_problem,
                                   warm_start=[new_index[labels[i]] for i in sol.active_set])
                total_iters[0] += new_sol.iterations
                if new_sol.status != qp.STATUS_OPTIMAL:
                    cut_failed = True
                    break
                cuts += len(extra_rows)
                sol, problem, labels = new_sol, new_problem, new_labels
        return sol, problem, labels, cuts, cut_failed

    def passivity_blocking(solution, labs):
        """Whether the infeasibility certificate involves dissipation rows.

        The relaxation slack only enters passivity and cut rows, so when the
        Farkas ray puts no weight there the relaxed program is infeasible for
        the same reason and the retry would just repeat the proof.
        """
        if solution.farkas_in is None:
            return True
        idx = np.flatnonzero(solution.farkas_in > 1e-10)
        return any(labs[i][0] in ("pass", "cut") for i in idx)

    relax_carry = list(warm_start.relax_active_set)
    if cfg.passivity and not exact and relax_carry:
        # A non-empty retry carry means the previous tick already failed.
        # The relaxed program contains the hard one (the slack extends any
        # hard-feasible point), so proving it infeasible settles the tick in
        # one warm pass, and on recovery the exact penalty drives the slack
        # to zero and reproduces the hard optimum.
        sol, problem, labels, cuts, cut_failed = attempt(True, relax_carry)
        base_carry = [labels[i] for i in sol.active_set
                      if labels[i][0] != "cut"]
        relax_carry = base_carry
    else:
        sol, problem, labels, cuts, cut_failed = attempt(False)
        base_carry = [labels[i] for i in sol.active_set
                      if labels[i][0] != "cut"]
        if (cfg.passivity and not exact
                and (cut_failed or (sol.status == qp.STATUS_INFEASIBLE
                                    and passivity_blocking(sol, labels)))):
            # Dissipation demands can genuinely conflict with barrier rows
            # for a few ticks near an obstacle; the penalized shared slack
            # then yields the least dissipation violation the barrier rows
            # permit, instead of an all-or-nothing revert.
            sol, problem, labels, cuts, cut_failed = attempt(True, base_carry)
            relax_carry = [labels[i] for i in sol.active_set
                           if labels[i][0] != "cut"]

    if sol.status != qp.STATUS_OPTIMAL:
        out = fail(sol.status)
        out.qp_iterations = total_iters[0]
        # Terminal working sets seed the next tick's solves; re-proving an
        # unchanged infeasibility from them takes a handful of iterations
        # instead of a cold pass.  The base and retry proofs end in different
        # sets, so each carries its own.
        out.active_set = base_carry
        out.relax_active_set = relax_carry
        return out

    # Accept the largest fraction of the correction whose nonlinear rollout
    # stays inside the model domain; a full Gauss-Newton step far from the
    # solution can send the open-loop tail through the swing singularity.
    du = sol.x[:3 * N].reshape(N, 3)
    alpha = 1.0
    for _ in range(6):
        u_new = U + alpha * du
        try:
            X_new = rollout(state, u_new, xi_d, cfg, model_params, pass_params)
            break
        except RolloutError:
            alpha *= 0.5
    else:
        return fail(STATUS_INFEASIBLE)
    report = qp.check_kkt(problem, sol)
    return OcpSolution(
        u_a=u_new, states=X_new, status=STATUS_OPTIMAL,
        kkt_residual=report.max_residual,
        solve_time=time.perf_counter() - tic,
        active_counts=_count_active(sol, labels),
        objective=sol.objective, qp_iterations=total_iters[0],
        cuts=cuts, active_set=[labels[i] for i in sol.active_set],
        # A successful tick drops back to the hard-first path; the carry
        # only spans a contiguous run of failures.
        relax_active_set=[],
    )


def sqp_solve(state: SystemState, xi_d, obstacles, t: float, cfg: OcpConfig,
              model_params: ModelParams, safety_params: SafetyParams,
              pass_params: PassivityParams, max_iterations: int = 30,
              tol: float = 1e-8) -> OcpSolution:
    """Iterate RTI passes at a frozen state until the correction converges."""
    warm = cold_start(cfg)
    sol = rti_step(state, xi_d, obstacles, t, warm, cfg,
                   model_params, safety_params, pass_params)
    for _ in range(max_iterations):
        if sol.status != STATUS_OPTIMAL:
            return sol
        step = np.max(np.abs(sol.u_a - warm.u_a))
        warm = WarmStart(u_a=sol.u_a, active_set=list(sol.active_set))
        if step < tol:
            break
        sol = rti_step(state, xi_d, obstacles, t, warm, cfg,
                       model_params, safety_params, pass_params)
    return sol


# ---------------------------------------------------------------------------
# Closed-loop controller


class NmpcController:
    """Stateful waypoint-tracking controller satisfying the sim interface.

    Keeps the shifted warm start between ticks and advances the active
    waypoint once the quadrotor has stayed within the capture radius for the
    waypoint's hold time.
    """

    def __init__(self, waypoints, cfg: OcpConfig, model_params: ModelParams,
                 safety_params: SafetyParams, pass_params: PassivityParams,
                 hold_times=None, capture_radius: float = 0.15):
        self.waypoints = np.atleast_2d(np.asarray(waypoints, dtype=float))
        if self.waypoints.shape[1] != 3 or len(self.waypoints) == 0:
            raise ValueError("waypoints must be a non-empty list of 3-vectors")
        self.hold_times = (np.zeros(len(self.waypoints)) if hold_times is None
                           else np.asarray(hold_times, dtype=float))
        if self.hold_times.shape != (len(self.waypoints),):
            raise ValueError("hold_times must match the waypoint count")
        if capture_radius <= 0.0:
            raise ValueError("capture_radius must be positive")
        self.cfg = cfg
        self.model_params = model_params
        self.safety_params = safety_params
        self.pass_params = pass_params
        self.capture_radius = capture_radius
        self.wp_index = 0
        self._warm = cold_start(cfg)
        self._inside_since: float | None = None
        prime_kernels()

    @property
    def goal(self) -> np.ndarray:
        return self.waypoints[-1]

    def _advance_waypoint(self, state: SystemState, t: float):
        if self.wp_index >= len(self.waypoints) - 1:
            return
        wp = self.waypoints[self.wp_index]
        if np.linalg.norm(state.xi - wp) <= self.capture_radius:
            if self._inside_since is None:
                self._inside_since = t
            if t - self._inside_since >= self.hold_times[self.wp_index]:
                self.wp_index += 1
                self._inside_since = None
        else:
            self._inside_since = None

    def __call__(self, state: SystemState, obstacles, t: float) -> ControlOutput:
        self._advance_waypoint(state, t)
        xi_d = self.waypoints[self.wp_index]
        sol = rti_step(state, xi_d, obstacles, t, self._warm, self.cfg,
                       self.model_params, self.safety_params, self.pass_params)
        diagnostics = {
            "waypoint_index": self.wp_index,
            "qp_iterations": sol.qp_iterations,
            "kkt_residual": sol.kkt_residual,
            "cuts": sol.cuts,
            "active_counts": sol.active_counts,
            "rti_time": sol.solve_time,
        }
        if sol.status != STATUS_OPTIMAL:
            # Keep the input guess and the failure's working sets: the next
            # tick usually faces the same near-identical program.
            self._warm = WarmStart(u_a=self._warm.u_a,
                                   active_set=list(sol.active_set),
                                   relax_active_set=list(sol.relax_active_set))
            return ControlOutput(force=self.model_params.hover_thrust(),
                                 u_a=np.zeros(3), xi_d=xi_d.copy(),
                                 status=sol.status, solve_time=sol.solve_time,
                                 diagnostics=diagnostics)
        self._warm = shift_warm_start(sol)
        u_a0 = sol.u_a[0]
        force = physical_force(u_a0, state, xi_d, self.pass_params, self.model_params)
        return ControlOutput(force=force, u_a=u_a0, xi_d=xi_d.copy(),
                             status=STATUS_OPTIMAL, solve_time=sol.solve_time,
                             diagnostics=diagnostics)
