"""Figure rendering for closed-loop runs.

Renders the standard run report next to the delimited log: top-down path with
obstacle footprints, storage function, barrier clearances, and swing angles.
Uses the non-interactive matplotlib backend so rendering works headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .bench import ScenarioConfig
from .obstacles import obstacle_position
from .sim import TrajectoryLog


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def top_view(log: TrajectoryLog, scenario: ScenarioConfig, path: Path) -> Path:
    """Top-down flight path with waypoint markers and obstacle footprints."""
    fig, ax = plt.subplots(figsize=(6.0, 4.5))
    ax.plot(log.state[:, 0], log.state[:, 1], color="tab:blue", label="quadrotor")
    ax.plot(log.state[0, 0], log.state[0, 1], "o", color="tab:blue")
    wp = scenario.waypoints
    ax.plot(wp[:, 0], wp[:, 1], "k*", markersize=10, label="waypoints")
    for obs in scenario.obstacles:
        for frac, alpha in ((0.0, 0.55), (0.5, 0.35), (1.0, 0.2)):
            t = frac * float(log.t[-1]) if len(log.t) else 0.0
            center, vel, _ = obstacle_position(obs, t)
            ax.add_patch(plt.Circle(center[:2], obs.radius, color="tab:red",
                                    alpha=alpha, lw=0))
            if np.allclose(vel, 0.0):
                break
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="best", fontsize=8)
    ax.set_title(f"{scenario.name}: top view")
    return _save(fig, path)


def storage_plot(log: TrajectoryLog, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6.0, 3.0))
    ax.plot(log.t, log.storage_value, color="tab:green")
    ax.set_xlabel("t [s]")
    ax.set_ylabel("V [J]")
    ax.set_title("storage function")
    return _save(fig, path)


def clearance_plot(log: TrajectoryLog, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6.0, 3.0))
    for j, label in enumerate(log.pair_labels):
        ax.plot(log.t, log.clearances[:, j], label=label)
    ax.axhline(0.0, color="k", lw=0.8, ls="--")
    ax.set_xlabel("t [s]")
    ax.set_ylabel("h [m$^2$]")
    ax.set_title("barrier clearances")
    if log.pair_labels:
        ax.legend(loc="best", fontsize=8)
    return _save(fig, path)


def swing_plot(log: TrajectoryLog, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6.0, 3.0))
    ax.plot(log.t, np.degrees(log.state[:, 3]), label=r"$\alpha$")
    ax.plot(log.t, np.degrees(log.state[:, 4]), label=r"$\beta$")
    ax.set_xlabel("t [s]")
    ax.set_ylabel("swing [deg]")
    ax.set_title("payload swing angles")
    ax.legend(loc="best", fontsize=8)
    return _save(fig, path)


def render_report(log: TrajectoryLog, scenario: ScenarioConfig,
                  out_dir) -> list[Path]:
    """Render the full figure set into ``out_dir``; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [
        top_view(log, scenario, out_dir / "top_view.png"),
        storage_plot(log, out_dir / "storage.png"),
        swing_plot(log, out_dir / "swing.png"),
    ]
    if log.pair_labels:
        written.append(clearance_plot(log, out_dir / "clearances.png"))
    return written
