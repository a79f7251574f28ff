"""Scenario definitions, controller arms, run metrics, and the ablation harness.

A scenario bundles everything one closed-loop run needs.  An arm names a
constraint configuration of the same NMPC (which safety rows, passivity on or
off); the ablation runs every arm over a shared set of seeded initial
perturbations so the per-arm counters are directly comparable.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .energy import PassivityParams
from .model import ModelParams, SystemState, payload_position
from .obstacles import Obstacle, obstacle_position
from .ocp import (
    SAFETY_FIRST_ORDER,
    SAFETY_HOCBF,
    SAFETY_STATE,
    NmpcController,
    OcpConfig,
)
from .safety import Body, SafetyParams, clearance
from .sim import STATUS_NONE, STATUS_OPTIMAL, SimConfig, TrajectoryLog, run_closed_loop

GOAL_TOLERANCE = 0.10       # success radius around the final waypoint [m]
OVERSHOOT_LIMIT = 0.10      # excursion past the goal that counts as an event [m]
SUCCESS_SWING_DEG = 10.0

ARM_KINDS = ("StateConstraint", "FirstOrderCbf", "HighOrderCbf", "SepNmpc")
_KIND_MODES = {
    "StateConstraint": SAFETY_STATE,
    "FirstOrderCbf": SAFETY_FIRST_ORDER,
    "HighOrderCbf": SAFETY_HOCBF,
    "SepNmpc": SAFETY_HOCBF,
}


@dataclass(frozen=True)
class Arm:
    """One ablation arm: a barrier formulation with passivity on or off."""

    kind: str
    passivity: bool

    def __post_init__(self):
        if self.kind not in ARM_KINDS:
            raise ValueError(f"arm kind must be one of {ARM_KINDS}")
        if self.kind == "SepNmpc" and not self.passivity:
            raise ValueError("SepNmpc is by definition the passivity-on arm")

    @property
    def name(self) -> str:
        if self.kind == "SepNmpc":
            return "SepNmpc"
        return self.kind + ("+passivity" if self.passivity else "")


def parse_arm(name: str) -> Arm:
    base, _, suffix = name.partition("+")
    if suffix not in ("", "passivity"):
        raise ValueError(f"unknown arm suffix in {name!r}")
    if base == "SepNmpc":
        return Arm(kind="SepNmpc", passivity=True)
    return Arm(kind=base, passivity=suffix == "passivity")


def default_arms() -> list[Arm]:
    """The six-arm matrix: three barrier formulations, passivity on and off."""
    arms = []
    for kind in ("StateConstraint", "FirstOrderCbf", "HighOrderCbf"):
        arms.append(Arm(kind=kind, passivity=False))
        arms.append(Arm(kind="SepNmpc", passivity=True) if kind == "HighOrderCbf"
                    else Arm(kind=kind, passivity=True))
    return arms


@dataclass
class ScenarioConfig:
    """Everything one closed-loop run needs, plus the trial schedule."""

    name: str
    model: ModelParams
    safety: SafetyParams
    passivity: PassivityParams
    ocp: OcpConfig
    sim: SimConfig
    initial_state: SystemState
    waypoints: np.ndarray
    hold_times: np.ndarray
    obstacles: list[Obstacle]
    capture_radius: float = 0.15
    trials: int = 20
    seed: int = 0

    def __post_init__(self):
        self.waypoints = np.atleast_2d(np.asarray(self.waypoints, dtype=float))
        self.hold_times = np.asarray(self.hold_times, dtype=float)
        errors = validate_scenario(self)
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def goal(self) -> np.ndarray:
        return self.waypoints[-1]


def validate_scenario(scenario: ScenarioConfig) -> list[str]:
    """All physics-level problems with a scenario, as one message per issue."""
    errors = []
    if scenario.waypoints.ndim != 2 or scenario.waypoints.shape[1] != 3 \
            or len(scenario.waypoints) == 0:
        errors.append("waypoints: must be a non-empty list of xyz positions")
        return errors
    if scenario.hold_times.shape != (len(scenario.waypoints),):
        errors.append("hold_times: one entry per waypoint required")
    elif np.min(scenario.hold_times) < 0.0:
        errors.append("hold_times: must be non-negative")
    if scenario.capture_radius <= 0.0:
        errors.append("capture_radius: must be strictly positive")
    if scenario.trials < 1:
        errors.append("trials: must be at least 1")
    st = scenario.initial_state
    for obs in scenario.obstacles:
        for body in (Body.QUADROTOR, Body.PAYLOAD):
            pos = st.xi if body is Body.QUADROTOR else payload_position(st, scenario.model)
            h0 = clearance(pos, obs, 0.0, scenario.safety, body)
            if h0 <= 0.0:
                errors.append(
                    f"initial_state: h_{obs.id}_{body.value}(x0) = {h0:.4f} <= 0, "
                    "start must be strictly inside the safe set")
    return errors


def controller_variant(arm: Arm, scenario: ScenarioConfig) -> NmpcController:
    """The scenario's controller with the arm's constraint configuration."""
    cfg = replace(scenario.ocp, safety_mode=_KIND_MODES[arm.kind],
                  passivity=arm.passivity)
    return NmpcController(scenario.waypoints, cfg, scenario.model,
                          scenario.safety, scenario.passivity,
                          hold_times=scenario.hold_times,
                          capture_radius=scenario.capture_radius)


# ---------------------------------------------------------------------------
# Metrics


@dataclass
class RunMetrics:
    """Counters and extrema of one closed-loop run."""

    success: bool
    valid: bool
    min_clearance: dict[str, float]     # Euclidean distance minus radii [m]
    max_alpha_deg: float
    max_beta_deg: float
    final_swing_deg: float
    rmse_xyz: float
    final_goal_error: float
    violations: int                     # entries into an inflated obstacle region
    infeasible_episodes: int
    overshoots: int
    solve_median_ms: float
    solve_max_ms: float

    def as_dict(self, include_timing: bool = True) -> dict:
        out = {
            "success": self.success,
            "valid": self.valid,
            "min_clearance": dict(self.min_clearance),
            "max_alpha_deg": self.max_alpha_deg,
            "max_beta_deg": self.max_beta_deg,
            "final_swing_deg": self.final_swing_deg,
            "rmse_xyz": self.rmse_xyz,
            "final_goal_error": self.final_goal_error,
            "violations": self.violations,
            "infeasible_episodes": self.infeasible_episodes,
            "overshoots": self.overshoots,
        }
        if include_timing:
            out["solve_median_ms"] = self.solve_median_ms
            out["solve_max_ms"] = self.solve_max_ms
        return out


def _count_violations(log: TrajectoryLog) -> int:
    """Entries into any inflated obstacle region (h crossing below zero)."""
    if log.clearances.size == 0:
        return 0
    inside = log.clearances < 0.0
    entries = inside[1:] & ~inside[:-1]
    return int(np.sum(entries) + np.sum(inside[0]))


def _count_episodes(status: list[str]) -> int:
    episodes = 0
    in_episode = False
    for s in status:
        bad = s not in (STATUS_OPTIMAL, STATUS_NONE)
        if bad and not in_episode:
            episodes += 1
        in_episode = bad
    return episodes


def _count_overshoots(log: TrajectoryLog, scenario: ScenarioConfig) -> int:
    """Excursions past the goal along the approach direction, after first crossing."""
    goal = scenario.goal
    origin = (scenario.waypoints[-2] if len(scenario.waypoints) > 1
              else scenario.initial_state.xi)
    direction = goal - origin
    norm = np.linalg.norm(direction)
    if norm < 1e-12:
        return 0
    direction = direction / norm
    s = (log.state[:, :3] - goal) @ direction
    crossed = np.flatnonzero(s >= 0.0)
    if crossed.size == 0:
        return 0
    s = s[crossed[0]:]
    beyond = s > OVERSHOOT_LIMIT
    return int(np.sum(beyond[1:] & ~beyond[:-1]) + np.sum(beyond[0]))


def _euclidean_clearances(log: TrajectoryLog, scenario: ScenarioConfig) -> dict[str, float]:
    out = {}
    p = scenario.model
    gamma = log.state[:, 3:5]
    ca, sa = np.cos(gamma[:, 0]), np.sin(gamma[:, 0])
    cb, sb = np.cos(gamma[:, 1]), np.sin(gamma[:, 1])
    p_q = log.state[:, :3]
    p_l = p_q + p.l * np.stack([sa * cb, sb, -ca * cb], axis=1)
    for obs in scenario.obstacles:
        centers = np.array([obstacle_position(obs, float(tk))[0] for tk in log.t])
        for body, pos in ((Body.QUADROTOR, p_q), (Body.PAYLOAD, p_l)):
            dist = np.linalg.norm(pos - centers, axis=1)
            radius = obs.radius + scenario.safety.body_radius(body)
            out[f"{obs.id}_{body.value}"] = float(np.min(dist) - radius)
    return out


def compute_metrics(log: TrajectoryLog, scenario: ScenarioConfig) -> RunMetrics:
    """Pure recomputation of the run counters from the log and the scenario.

    Success requires reaching the goal with the swing settled at the end of
    the run; transit swing is reported but not judged, since large deflections
    while skirting an obstacle are expected and recover before arrival.
    """
    err = log.state[:, :3] - log.xi_d
    rmse = float(np.sqrt(np.mean(np.sum(err**2, axis=1))))
    final_err = float(np.linalg.norm(log.state[-1, :3] - scenario.goal))
    max_alpha = float(np.degrees(np.max(np.abs(log.state[:, 3]))))
    max_beta = float(np.degrees(np.max(np.abs(log.state[:, 4]))))
    final_swing = float(np.degrees(np.max(np.abs(log.state[-1, 3:5]))))
    violations = _count_violations(log)
    solved = np.asarray(log.solve_time[1:], dtype=float)
    success = (log.valid and final_err <= GOAL_TOLERANCE
               and final_swing < SUCCESS_SWING_DEG
               and violations == 0)
    return RunMetrics(
        success=bool(success),
        valid=log.valid,
        min_clearance=_euclidean_clearances(log, scenario),
        max_alpha_deg=max_alpha,
        max_beta_deg=max_beta,
        final_swing_deg=final_swing,
        rmse_xyz=rmse,
        final_goal_error=final_err,
        violations=violations,
        infeasible_episodes=_count_episodes(log.status),
        overshoots=_count_overshoots(log, scenario),
        solve_median_ms=float(1e3 * np.median(solved)) if solved.size else 0.0,
        solve_max_ms=float(1e3 * np.max(solved)) if solved.size else 0.0,
    )


# ---------------------------------------------------------------------------
# Trials and the ablation matrix


def trial_states(scenario: ScenarioConfig, trials: int | None = None) -> list[SystemState]:
    """Perturbed initial states shared by every arm, derived from the seed.

    Positions move uniformly inside a 0.1 m cube and swing angles inside
    +-3 degrees; velocities stay at the scenario's initial values.
    """
    n = scenario.trials if trials is None else trials
    rng = np.random.default_rng(np.random.SeedSequence(scenario.seed))
    base = scenario.initial_state
    states = []
    for _ in range(n):
        xi = base.xi + rng.uniform(-0.05, 0.05, 3)
        gamma = base.gamma + rng.uniform(-np.radians(3.0), np.radians(3.0), 2)
        states.append(SystemState(xi, gamma, base.xi_dot, base.gamma_dot))
    return states


def run_trial(arm: Arm, scenario: ScenarioConfig,
              initial_state: SystemState | None = None):
    """One closed-loop run of an arm; returns ``(metrics, log)``."""
    controller = controller_variant(arm, scenario)
    st = scenario.initial_state if initial_state is None else initial_state
    log = run_closed_loop(controller, st, scenario.obstacles, scenario.sim,
                          scenario.model, scenario.safety, scenario.passivity)
    return compute_metrics(log, scenario), log


@dataclass
class ArmResult:
    """Aggregated counters of one arm over all trials."""

    arm: Arm
    trials: list[RunMetrics] = field(default_factory=list)

    @property
    def violations(self) -> int:
        return sum(m.violations for m in self.trials)

    @property
    def infeasible(self) -> int:
        return sum(m.infeasible_episodes for m in self.trials)

    @property
    def overshoots(self) -> int:
        return sum(m.overshoots for m in self.trials)

    @property
    def successes(self) -> int:
        return sum(m.success for m in self.trials)

    @property
    def solve_median_ms(self) -> float:
        vals = [m.solve_median_ms for m in self.trials]
        return float(np.median(vals)) if vals else 0.0

    @property
    def solve_max_ms(self) -> float:
        vals = [m.solve_max_ms for m in self.trials]
        return float(np.max(vals)) if vals else 0.0


def run_ablation(scenario: ScenarioConfig, arms: list[Arm] | None = None,
                 trials: int | None = None) -> list[ArmResult]:
    """Run every arm over the shared seeded trials; deterministic fold order."""
    arms = default_arms() if arms is None else list(arms)
    states = trial_states(scenario, trials)
    results = []
    for arm in arms:
        result = ArmResult(arm=arm)
        for st in states:
            metrics, _ = run_trial(arm, scenario, st)
            result.trials.append(metrics)
        results.append(result)
    return results


def ablation_dict(results: list[ArmResult]) -> dict:
    """JSON-ready summary; timing is excluded so equal seeds give equal bytes."""
    return {
        "arms": [
            {
                "name": r.arm.name,
                "kind": r.arm.kind,
                "passivity": r.arm.passivity,
                "trials": len(r.trials),
                "successes": r.successes,
                "violations": r.violations,
                "infeasible": r.infeasible,
                "overshoots": r.overshoots,
                "runs": [m.as_dict(include_timing=False) for m in r.trials],
            }
            for r in results
        ]
    }


def format_table(results: list[ArmResult]) -> str:
    """Aligned plain-text summary, one arm per row."""
    header = f"{'Arm':<28}{'Viol./Infeas.':>14}{'Overshoot':>11}{'Success':>9}{'Solve [ms]':>12}"
    lines = [header, "-" * len(header)]
    for r in results:
        lines.append(
            f"{r.arm.name:<28}{f'{r.violations} / {r.infeasible}':>14}"
            f"{r.overshoots:>11}{f'{r.successes}/{len(r.trials)}':>9}"
            f"{r.solve_median_ms:>12.2f}")
    return "\n".join(lines)
