"""Squared-clearance barrier functions and the second-order barrier rows.

Clearance is measured for both the quadrotor and the payload against every
obstacle.  Because the barriers depend only on position while the input acts
through acceleration, each pair carries a second-order recursion
``psi1 = h_dot + kappa1 h``, ``psi2 = h_ddot + kappa2 psi1 >= 0`` that is
affine in the shaped input and stacks into ``A u_a >= b``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .model import (
    ModelParams,
    SystemState,
    control_affine_split,
    payload_acceleration_affine,
    payload_position,
    payload_velocity,
)
from .obstacles import Obstacle, obstacle_position


class Body(enum.Enum):
    QUADROTOR = "quadrotor"
    PAYLOAD = "payload"


@dataclass(frozen=True)
class SafetyParams:
    """Barrier gains, inflated body radii, and the extra safety margin [m]."""

    kappa1: float = 2.0
    kappa2: float = 2.0
    r_q: float = 0.0
    r_l: float = 0.0
    delta: float = 0.05

    def __post_init__(self):
        if self.kappa1 <= 0.0 or self.kappa2 <= 0.0:
            raise ValueError("barrier gains must be strictly positive")
        if self.r_q < 0.0 or self.r_l < 0.0:
            raise ValueError("body radii must be non-negative")
        if self.delta <= 0.0:
            raise ValueError("safety margin must be positive")

    def body_radius(self, body: Body) -> float:
        return self.r_q if body is Body.QUADROTOR else self.r_l


@dataclass(frozen=True)
class HocbfRow:
    """One affine safety inequality ``a . u_a >= b`` for an (obstacle, body) pair."""

    a: np.ndarray
    b: float
    obstacle_id: str
    body: Body
    h: float
    psi1: float


def min_distance(obstacle: Obstacle, body: Body, params: SafetyParams) -> float:
    return obstacle.radius + params.body_radius(body) + params.delta


def clearance(body_pos: np.ndarray, obstacle: Obstacle, t: float,
              params: SafetyParams, body: Body = Body.QUADROTOR) -> float:
    """Squared clearance ``|p - p_o(t)|^2 - d_min^2``."""
    p_o, _, _ = obstacle_position(obstacle, t)
    r = np.asarray(body_pos, dtype=float) - p_o
    return float(r @ r - min_distance(obstacle, body, params) ** 2)


def body_kinematics(state: SystemState, body: Body, model_params: ModelParams):
    """Position and velocity of the selected body."""
    if body is Body.QUADROTOR:
        return state.xi.copy(), state.xi_dot.copy()
    return payload_position(state, model_params), payload_velocity(state, model_params)


def clearance_derivatives(state: SystemState, body: Body, obstacle: Obstacle, t: float,
                          safety_params: SafetyParams, model_params: ModelParams,
                          input_offset: np.ndarray | None = None):
    """Barrier value and derivatives, split into drift and input row.

    Returns ``(h, h_dot, h_ddot_drift, input_row)`` with
    ``h_ddot = h_ddot_drift + input_row . u_a``.  ``input_offset`` is the
    total physical force applied when the shaped input is zero (defaults to
    hover thrust); the drift accounts for it.
    """
    if input_offset is None:
        input_offset = model_params.hover_thrust()
    p_o, v_o, a_o = obstacle_position(obstacle, t)
    pos, vel = body_kinematics(state, body, model_params)
    r = pos - p_o
    rel_v = vel - v_o

    h = float(r @ r - min_distance(obstacle, body, safety_params) ** 2)
    h_dot = 2.0 * float(r @ rel_v)

    if body is Body.QUADROTOR:
        drift_acc, G_v = control_affine_split(state, model_params)
    else:
        drift_acc, G_v = payload_acceleration_affine(state, model_params)
    drift_acc = drift_acc + G_v @ np.asarray(input_offset, dtype=float)

    h_ddot_drift = 2.0 * float(rel_v @ rel_v) + 2.0 * float(r @ (drift_acc - a_o))
    input_row = 2.0 * r @ G_v
    return h, h_dot, h_ddot_drift, input_row


def hocbf_row(state: SystemState, body: Body, obstacle: Obstacle, t: float,
              safety_params: SafetyParams, model_params: ModelParams,
              input_offset: np.ndarray | None = None) -> HocbfRow:
    """Second-order barrier row ``a . u_a >= b`` for one (obstacle, body) pair."""
    h, h_dot, h_ddot_drift, a = clearance_derivatives(
        state, body, obstacle, t, safety_params, model_params, input_offset)
    psi1 = h_dot + safety_params.kappa1 * h
    b = -(h_ddot_drift + safety_params.kappa1 * h_dot + safety_params.kappa2 * psi1)
    return HocbfRow(a=a, b=float(b), obstacle_id=obstacle.id, body=body, h=h, psi1=psi1)


def stack_rows(state: SystemState, obstacles, t: float, horizon_node_time: float,
               safety_params: SafetyParams, model_params: ModelParams,
               input_offset: np.ndarray | None = None):
    """Stacked ``(A, b)`` over all (obstacle, body) pairs, obstacle-major.

    Obstacle motion over the horizon is extrapolated by the motion model at
    ``t + horizon_node_time``; rows are ordered quadrotor before payload.
    """
    rows = [
        hocbf_row(state, body, obs, t + horizon_node_time, safety_params, model_params, input_offset)
        for obs in obstacles
        for body in (Body.QUADROTOR, Body.PAYLOAD)
    ]
    if not rows:
        return np.zeros((0, 3)), np.zeros(0)
    A = np.array([row.a for row in rows])
    b = np.array([row.b for row in rows])
    return A, b
