"""Storage function, shaped input, and the strict passivity constraint.

The shaped input ``u_a`` lives in gravity-compensated coordinates: the total
physical force is ``u_a - K e_zeta + (m_q + m_l) g e3`` with position error
``e_zeta = xi - xi_d``.  In these coordinates the storage function satisfies
the port relation ``V_dot = v^T u_a`` with the collocated output
``v = xi_dot``, and hover sits exactly on the constraint boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams, SystemState, inertia_matrix

_E3 = np.array([0.0, 0.0, 1.0])


def _default_shaping() -> np.ndarray:
    return np.diag([2.0, 2.0, 2.0])


@dataclass(frozen=True)
class PassivityParams:
    """Damping gains and the positive-definite position-shaping matrix."""

    rho: float = 0.5
    epsilon: float = 0.01
    shaping: np.ndarray = field(default_factory=_default_shaping)

    def __post_init__(self):
        if self.rho <= 0.0 or self.epsilon <= 0.0:
            raise ValueError("passivity gains must be strictly positive")
        K = np.asarray(self.shaping, dtype=float)
        if K.shape != (3, 3) or not np.allclose(K, K.T):
            raise ValueError("shaping matrix must be symmetric 3x3")
        if np.linalg.eigvalsh(K)[0] <= 0.0:
            raise ValueError("shaping matrix must be positive definite")
        object.__setattr__(self, "shaping", K)


def storage(state: SystemState, xi_d: np.ndarray, params: PassivityParams,
            model_params: ModelParams) -> float:
    """Energy-like storage: kinetic + swing potential + shaped position error."""
    q_dot = state.q_dot
    alpha, beta = state.gamma
    e = state.xi - np.asarray(xi_d, dtype=float)
    V = 0.5 * q_dot @ inertia_matrix(state.q, model_params) @ q_dot
    V += model_params.m_l * model_params.g * model_params.l * (1.0 - np.cos(alpha) * np.cos(beta))
    V += 0.5 * e @ params.shaping @ e
    return float(V)


def shaped_input(u_net: np.ndarray, state: SystemState, xi_d: np.ndarray,
                 params: PassivityParams) -> np.ndarray:
    """Shaped input ``u_a = u_net + K (xi - xi_d)`` from the net (above-hover) force."""
    return np.asarray(u_net, dtype=float) + params.shaping @ (state.xi - np.asarray(xi_d, dtype=float))


def unshaped_input(u_a: np.ndarray, state: SystemState, xi_d: np.ndarray,
                   params: PassivityParams) -> np.ndarray:
    """Inverse of :func:`shaped_input`."""
    return np.asarray(u_a, dtype=float) - params.shaping @ (state.xi - np.asarray(xi_d, dtype=float))


def physical_force(u_a: np.ndarray, state: SystemState, xi_d: np.ndarray,
                   params: PassivityParams, model_params: ModelParams) -> np.ndarray:
    """Total force applied to the plant for a given shaped input."""
    return unshaped_input(u_a, state, xi_d, params) + model_params.hover_thrust()


def shaped_from_physical(force: np.ndarray, state: SystemState, xi_d: np.ndarray,
                         params: PassivityParams, model_params: ModelParams) -> np.ndarray:
    """Shaped input corresponding to a total physical force."""
    return shaped_input(np.asarray(force, dtype=float) - model_params.hover_thrust(),
                        state, xi_d, params)


def passivity_residual(u_a: np.ndarray, v: np.ndarray, params: PassivityParams) -> float:
    """``u_a . v + rho |v|^2 + eps |u_a|^2``; the constraint holds iff this is <= 0."""
    u_a = np.asarray(u_a, dtype=float)
    v = np.asarray(v, dtype=float)
    return float(u_a @ v + params.rho * v @ v + params.epsilon * u_a @ u_a)


def passivity_row(u_a_ref: np.ndarray, v_pred: np.ndarray, params: PassivityParams):
    """First-order expansion of the residual in ``u_a`` about ``u_a_ref``.

    Returns ``(a, ub)`` encoding the affine row ``a . u_a <= ub``.  The
    predicted output ``v_pred`` is frozen; the expansion under-approximates
    the quadratic epsilon term, so row-feasible points near the reference
    satisfy the true constraint up to ``eps |u_a - u_a_ref|^2``.
    """
    u_a_ref = np.asarray(u_a_ref, dtype=float)
    v_pred = np.asarray(v_pred, dtype=float)
    a = v_pred + 2.0 * params.epsilon * u_a_ref
    ub = -params.rho * float(v_pred @ v_pred) + params.epsilon * float(u_a_ref @ u_a_ref)
    return a, ub
