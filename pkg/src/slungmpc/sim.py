"""Fixed-step closed-loop simulation of the plant and the 100 Hz control loop."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import safety as safety_mod
from ._kernels import sim_rk4_kernel
from .energy import PassivityParams, storage
from .model import SWING_DOMAIN_LIMIT, ModelParams, SwingDomainError, SystemState, state_derivative
from .obstacles import Obstacle, obstacle_position  # noqa: F401  (re-exported surface)
from .safety import Body, SafetyParams

STATUS_NONE = "none"
STATUS_OPTIMAL = "optimal"
STATUS_INFEASIBLE = "infeasible"
STATUS_MAX_ITER = "max_iter"

# Ticks of held input tolerated before the fallback commands hover thrust.
FALLBACK_HOLD_TICKS = 3


@dataclass(frozen=True)
class SimConfig:
    """Plant step, control period, run length and the trial RNG seed."""

    duration: float
    dt_sim: float = 1e-3
    dt_ctrl: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.duration < 0.0 or self.dt_sim <= 0.0 or self.dt_ctrl <= 0.0:
            raise ValueError("durations and steps must be positive")
        ratio = self.dt_ctrl / self.dt_sim
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("dt_ctrl must be an integer multiple of dt_sim")

    @property
    def substeps(self) -> int:
        return int(round(self.dt_ctrl / self.dt_sim))

    @property
    def n_ticks(self) -> int:
        ticks = self.duration / self.dt_ctrl
        if abs(ticks - round(ticks)) > 1e-9:
            raise ValueError("duration must be an integer number of control periods")
        return int(round(ticks))


@dataclass(frozen=True)
class ControlOutput:
    """What a controller returns for one control period."""

    force: np.ndarray          # total physical force held over the tick [N]
    u_a: np.ndarray            # shaped input actually encoded by the force
    xi_d: np.ndarray           # reference position active at this tick
    status: str = STATUS_OPTIMAL
    solve_time: float = 0.0    # seconds
    diagnostics: dict = field(default_factory=dict)


Controller = Callable[[SystemState, Sequence[Obstacle], float], ControlOutput]


@dataclass
class TrajectoryLog:
    """Per-tick record of the closed loop; one row per control period plus the final state."""

    t: np.ndarray
    state: np.ndarray          # (n, 10)
    force: np.ndarray          # (n, 3)
    u_a: np.ndarray            # (n, 3)
    xi_d: np.ndarray           # (n, 3), reference active over the tick
    storage_value: np.ndarray  # (n,)
    clearances: np.ndarray     # (n, n_pairs), squared-clearance h per (obstacle, body)
    pair_labels: list[str]
    status: list[str]
    solve_time: np.ndarray     # (n,) seconds
    valid: bool = True
    abort_reason: str = ""

    def __len__(self) -> int:
        return len(self.t)

    def column_names(self) -> list[str]:
        names = ["t"]
        names += ["x", "y", "z", "alpha", "beta", "x_dot", "y_dot", "z_dot", "alpha_dot", "beta_dot"]
        names += ["u_x", "u_y", "u_z", "ua_x", "ua_y", "ua_z"]
        names += ["xd", "yd", "zd", "V"]
        names += [f"h_{label}" for label in self.pair_labels]
        names += ["status", "solve_time_ms"]
        return names

    def rows(self):
        for i in range(len(self.t)):
            row = [self.t[i], *self.state[i], *self.force[i], *self.u_a[i],
                   *self.xi_d[i], self.storage_value[i], *self.clearances[i],
                   self.status[i], self.solve_time[i] * 1e3]
            yield row


def rk4_step(state: SystemState, u: np.ndarray, dt: float, params: ModelParams) -> SystemState:
    """Classical four-stage step with the force held constant."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    if np.max(np.abs(state.gamma)) >= SWING_DOMAIN_LIMIT:
        raise SwingDomainError("state outside the swing-angle model domain")
    x = state.as_vector()
    u = np.asarray(u, dtype=float)
    k1 = state_derivative(x, u, params)
    k2 = state_derivative(x + dt / 2 * k1, u, params)
    k3 = state_derivative(x + dt / 2 * k2, u, params)
    k4 = state_derivative(x + dt * k3, u, params)
    return SystemState.from_vector(x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4))


def _pair_labels(obstacles) -> list[str]:
    return [f"{obs.id}_{body.value}" for obs in obstacles for body in (Body.QUADROTOR, Body.PAYLOAD)]


def _pair_clearances(state, obstacles, t, safety_params, model_params):
    vals = []
    for obs in obstacles:
        for body in (Body.QUADROTOR, Body.PAYLOAD):
            pos, _ = safety_mod.body_kinematics(state, body, model_params)
            vals.append(safety_mod.clearance(pos, obs, t, safety_params, body))
    return vals


def run_closed_loop(controller: Controller, initial_state: SystemState,
                    obstacles: Sequence[Obstacle], cfg: SimConfig,
                    model_params: ModelParams, safety_params: SafetyParams,
                    passivity_params: PassivityParams,
                    reference: np.ndarray | None = None) -> TrajectoryLog:
    """Simulate the control loop with zero-order-held forces.

    Controller infeasibility never raises: the previous feasible force is held
    for up to FALLBACK_HOLD_TICKS ticks, after which hover thrust is applied.
    A swing-domain violation marks the log invalid and truncates the run.
    """
    n_ticks = cfg.n_ticks
    labels = _pair_labels(obstacles)
    t_arr, states, forces, uas, refs, Vs, hs, statuses, times = ([], [], [], [],
                                                                 [], [], [], [], [])

    state = initial_state
    hover = model_params.hover_thrust()
    last_good: np.ndarray | None = None
    infeasible_streak = 0
    valid = True
    abort_reason = ""
    default_ref = reference if reference is not None else initial_state.xi

    def log_row(t, st, force, u_a, xi_d, status, solve_time):
        t_arr.append(t)
        states.append(st.as_vector())
        forces.append(np.asarray(force, dtype=float))
        uas.append(np.asarray(u_a, dtype=float))
        refs.append(np.asarray(xi_d, dtype=float))
        Vs.append(storage(st, xi_d, passivity_params, model_params))
        hs.append(_pair_clearances(st, obstacles, t, safety_params, model_params))
        statuses.append(status)
        times.append(solve_time)

    if n_ticks == 0:
        log_row(0.0, state, np.zeros(3), np.zeros(3), default_ref, STATUS_NONE, 0.0)
    else:
        last_out = None
        for k in range(n_ticks):
            t = k * cfg.dt_ctrl
            tic = time.perf_counter()
            out = controller(state, obstacles, t)
            toc = time.perf_counter() - tic
            if out.status == STATUS_OPTIMAL:
                force = np.asarray(out.force, dtype=float)
                last_good = force
                infeasible_streak = 0
            else:
                infeasible_streak += 1
                if last_good is not None and infeasible_streak <= FALLBACK_HOLD_TICKS:
                    force = last_good
                else:
                    force = hover
            log_row(t, state, force, out.u_a, out.xi_d, out.status, toc)
            last_out = out

            x = state.as_vector()
            if np.max(np.abs(x[3:5])) >= SWING_DOMAIN_LIMIT:
                valid = False
                abort_reason = "state outside the swing-angle model domain"
                break
            x, ok = sim_rk4_kernel(x, force, cfg.dt_sim, cfg.substeps,
                                   model_params.m_l, model_params.m_q,
                                   model_params.l, model_params.g,
                                   SWING_DOMAIN_LIMIT)
            if not ok:
                valid = False
                abort_reason = "state outside the swing-angle model domain"
                break
            state = SystemState.from_vector(x)
            if not np.all(np.isfinite(state.as_vector())):
                raise RuntimeError("simulation diverged to a non-finite state")
        if valid:
            log_row(n_ticks * cfg.dt_ctrl, state, forces[-1], last_out.u_a,
                    last_out.xi_d, last_out.status, 0.0)

    return TrajectoryLog(
        t=np.array(t_arr),
        state=np.array(states),
        force=np.array(forces),
        u_a=np.array(uas),
        xi_d=np.array(refs),
        storage_value=np.array(Vs),
        clearances=np.array(hs).reshape(len(t_arr), len(labels)),
        pair_labels=labels,
        status=statuses,
        solve_time=np.array(times),
        valid=valid,
        abort_reason=abort_reason,
    )


def hover_controller(xi_d, model_params: ModelParams) -> Controller:
    """Perfect hover-hold controller used by fixtures and smoke tests."""
    xi_d = np.asarray(xi_d, dtype=float)
    hover = model_params.hover_thrust()

    def control(state, obstacles, t):
        return ControlOutput(force=hover.copy(), u_a=np.zeros(3), xi_d=xi_d)

    return control
