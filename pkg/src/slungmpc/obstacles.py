"""Spherical obstacles on deterministic polynomial trajectories."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _zero3() -> np.ndarray:
    return np.zeros(3)


@dataclass(frozen=True)
class Obstacle:
    """Obstacle centre moving as ``center0 + velocity t + 1/2 acceleration t^2``."""

    id: str
    center0: np.ndarray
    radius: float
    velocity: np.ndarray = field(default_factory=_zero3)
    acceleration: np.ndarray = field(default_factory=_zero3)

    def __post_init__(self):
        if self.radius <= 0.0:
            raise ValueError("obstacle radius must be positive")
        for name in ("center0", "velocity", "acceleration"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (3,) or not np.all(np.isfinite(arr)):
                raise ValueError(f"obstacle {name} must be a finite 3-vector")
            object.__setattr__(self, name, arr)


def obstacle_position(obstacle: Obstacle, t: float):
    """Centre position, velocity and acceleration at time ``t``."""
    if t < 0.0:
        raise ValueError("t must be non-negative")
    p = obstacle.center0 + obstacle.velocity * t + 0.5 * obstacle.acceleration * t * t
    v = obstacle.velocity + obstacle.acceleration * t
    return p, v, obstacle.acceleration.copy()
