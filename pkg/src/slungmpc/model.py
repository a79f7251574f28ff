"""Equations of motion for a quadrotor carrying a cable-suspended point mass.

The generalized position is ``q = [x, y, z, alpha, beta]`` where ``(x, y, z)``
is the quadrotor position in the inertial frame (z up) and ``(alpha, beta)``
are the cable swing angles projected onto the xz and yz planes.  The payload
hangs a fixed cable length below the quadrotor; the translational subsystem
has five degrees of freedom driven by a three-axis force, so the swing
coordinates are unactuated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Beyond this swing angle the mass matrix approaches singularity (cos(beta) -> 0);
# states outside it are treated as a modelling domain error, not extrapolated.
SWING_DOMAIN_LIMIT = np.radians(85.0)

_E3 = np.array([0.0, 0.0, 1.0])


class SwingDomainError(ValueError):
    """Swing angles left the admissible domain where the model is valid."""


def _default_inertia() -> np.ndarray:
    return np.diag([0.03, 0.03, 0.05])


@dataclass(frozen=True)
class ModelParams:
    """Physical parameters of the quadrotor-payload system.

    Attributes
    ----------
    m_q, m_l : quadrotor and payload masses [kg].
    l : cable length [m].
    g : gravitational acceleration [m/s^2].
    inertia : 3x3 body inertia matrix [kg m^2].
    u_max : per-axis bound on the applied force [N].
    swing_max : swing-angle bound used by the controller constraint set [rad].
    """

    m_q: float = 1.5
    m_l: float = 0.2
    l: float = 0.5
    g: float = 9.81
    inertia: np.ndarray = field(default_factory=_default_inertia)
    u_max: float = 2.0 * (1.5 + 0.2) * 9.81
    swing_max: float = np.radians(60.0)

    def __post_init__(self):
        for name in ("m_q", "m_l", "l", "g"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        J = np.asarray(self.inertia, dtype=float)
        if J.shape != (3, 3) or not np.allclose(J, J.T):
            raise ValueError("inertia must be a symmetric 3x3 matrix")
        if np.linalg.eigvalsh(J)[0] <= 0.0:
            raise ValueError("inertia must be positive definite")
        if not 0.0 < self.swing_max < np.pi / 2:
            raise ValueError("swing_max must lie in (0, pi/2)")
        object.__setattr__(self, "inertia", J)

    @property
    def total_mass(self) -> float:
        return self.m_q + self.m_l

    def hover_thrust(self) -> np.ndarray:
        """Force that balances gravity at zero swing."""
        return self.total_mass * self.g * _E3


@dataclass(frozen=True)
class SystemState:
    """Full state ``x = [xi, gamma, xi_dot, gamma_dot]`` of the translational system."""

    xi: np.ndarray
    gamma: np.ndarray
    xi_dot: np.ndarray
    gamma_dot: np.ndarray

    def __post_init__(self):
        for name, size in (("xi", 3), ("gamma", 2), ("xi_dot", 3), ("gamma_dot", 2)):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (size,):
                raise ValueError(f"{name} must have shape ({size},)")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, arr)

    @property
    def q(self) -> np.ndarray:
        return np.concatenate([self.xi, self.gamma])

    @property
    def q_dot(self) -> np.ndarray:
        return np.concatenate([self.xi_dot, self.gamma_dot])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.xi, self.gamma, self.xi_dot, self.gamma_dot])

    @staticmethod
    def from_vector(x: np.ndarray) -> "SystemState":
        x = np.asarray(x, dtype=float)
        if x.shape != (10,):
            raise ValueError("state vector must have shape (10,)")
        return SystemState(x[0:3], x[3:5], x[5:8], x[8:10])

    @staticmethod
    def hover(xi) -> "SystemState":
        return SystemState(np.asarray(xi, dtype=float), np.zeros(2), np.zeros(3), np.zeros(2))


@dataclass(frozen=True)
class AttitudeState:
    """Rotation matrix and body angular velocity of the airframe."""

    rotation: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        w = np.asarray(self.omega, dtype=float)
        if R.shape != (3, 3) or w.shape != (3,):
            raise ValueError("rotation must be 3x3 and omega length 3")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9:
            raise ValueError("rotation must be orthonormal within 1e-9")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must have determinant 1 within 1e-9")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "omega", w)


def _check_swing_domain(alpha, beta):
    if max(abs(float(alpha)), abs(float(beta))) >= SWING_DOMAIN_LIMIT:
        raise SwingDomainError(
            f"swing angles ({float(alpha):.3f}, {float(beta):.3f}) rad exceed the "
            f"+/-{np.degrees(SWING_DOMAIN_LIMIT):.0f} deg model domain"
        )


def _coupling_block(alpha, beta, p: ModelParams):
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    return p.m_l * p.l * np.array([
        [ca * cb, -sa * sb],
        [0.0, cb],
        [sa * cb, ca * sb],
    ])


def inertia_matrix(q: np.ndarray, p: ModelParams) -> np.ndarray:
    """Symmetric positive-definite 5x5 mass matrix at generalized position q."""
    alpha, beta = q[3], q[4]
    _check_swing_domain(alpha, beta)
    M = np.zeros((5, 5))
    M[0:3, 0:3] = p.total_mass * np.eye(3)
    Mc = _coupling_block(alpha, beta, p)
    M[0:3, 3:5] = Mc
    M[3:5, 0:3] = Mc.T
    M[3:5, 3:5] = p.m_l * p.l**2 * np.diag([np.cos(beta) ** 2, 1.0])
    return M


def coriolis_matrix(q: np.ndarray, q_dot: np.ndarray, p: ModelParams) -> np.ndarray:
    """Coriolis/centrifugal matrix in the Christoffel convention.

    The upper-right block is the time derivative of the coupling block; the
    lower-left block is zero, and the swing block carries the centrifugal
    terms with ``c54 = -c45``.
    """
    alpha, beta = q[3], q[4]
    ad, bd = q_dot[3], q_dot[4]
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    ml = p.m_l * p.l
    ml2 = p.m_l * p.l**2
    C = np.zeros((5, 5))
    C[0, 3] = -ml * (ad * sa * cb + bd * ca * sb)
    C[0, 4] = -ml * (ad * ca * sb + bd * sa * cb)
    C[1, 4] = -ml * bd * sb
    C[2, 3] = ml * (ad * ca * cb - bd * sa * sb)
    C[2, 4] = ml * (-ad * sa * sb + bd * ca * cb)
    C[3, 3] = -ml2 * bd * cb * sb
    C[3, 4] = -ml2 * ad * cb * sb
    C[4, 3] = ml2 * ad * cb * sb
    return C


def gravity_vector(q: np.ndarray, p: ModelParams) -> np.ndarray:
    """Generalized gravity force (z up)."""
    alpha, beta = q[3], q[4]
    return np.array([
        0.0,
        0.0,
        p.total_mass * p.g,
        p.m_l * p.g * p.l * np.sin(alpha) * np.cos(beta),
        p.m_l * p.g * p.l * np.cos(alpha) * np.sin(beta),
    ])


def cable_direction(gamma) -> np.ndarray:
    """Unit vector from the quadrotor to the payload."""
    alpha, beta = gamma[0], gamma[1]
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    return np.array([sa * cb, sb, -ca * cb])


def payload_position(state: SystemState, p: ModelParams) -> np.ndarray:
    return state.xi + p.l * cable_direction(state.gamma)


def payload_velocity(state: SystemState, p: ModelParams) -> np.ndarray:
    alpha, beta = state.gamma
    ad, bd = state.gamma_dot
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    d_dir = np.array([
        ca * cb * ad - sa * sb * bd,
        cb * bd,
        sa * cb * ad + ca * sb * bd,
    ])
    return state.xi_dot + p.l * d_dir


def _accel(x, fx, fy, fz, p: ModelParams):
    """Generalized accelerations via the block structure of the mass matrix.

    ``x`` has shape (..., 10); the force components broadcast against the
    leading dimensions.  Works with complex inputs, which is what the
    controller's complex-step linearization relies on.
    """
    alpha, beta = x[..., 3], x[..., 4]
    ad, bd = x[..., 8], x[..., 9]
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    m, mt, l, g = p.m_l, p.total_mass, p.l, p.g
    ml = m * l

    # Coriolis force: [Mc_dot @ gamma_dot; centrifugal swing terms]
    f1x = -ml * ((ad * sa * cb + bd * ca * sb) * ad + (ad * ca * sb + bd * sa * cb) * bd)
    f1y = -ml * bd * sb * bd
    f1z = ml * ((ad * ca * cb - bd * sa * sb) * ad + (-ad * sa * sb + bd * ca * cb) * bd)
    f4 = -2.0 * m * l**2 * cb * sb * ad * bd
    f5 = m * l**2 * cb * sb * ad * ad

    b1x = fx - f1x
    b1y = fy - f1y
    b1z = fz - f1z - mt * g
    b4 = -f4 - m * g * l * sa * cb
    b5 = -f5 - m * g * l * ca * sb

    # Schur complement of the translational block: S = diag(s1, s2)
    s1 = m * l**2 * (p.m_q / mt) * cb**2
    s2 = m * l**2 * (p.m_q / mt)
    add = (b4 - ml * (ca * cb * b1x + sa * cb * b1z) / mt) / s1
    bdd = (b5 - ml * (-sa * sb * b1x + cb * b1y + ca * sb * b1z) / mt) / s2

    xidd_x = (b1x - ml * (ca * cb * add - sa * sb * bdd)) / mt
    xidd_y = (b1y - ml * cb * bdd) / mt
    xidd_z = (b1z - ml * (sa * cb * add + ca * sb * bdd)) / mt
    return xidd_x, xidd_y, xidd_z, add, bdd


def state_derivative(x: np.ndarray, force: np.ndarray, p: ModelParams) -> np.ndarray:
    """Time derivative of the 10-vector state under an applied force.

    Batched: ``x`` may have shape (..., 10) and ``force`` (..., 3).
    """
    x = np.asarray(x)
    force = np.asarray(force)
    out = np.empty(np.broadcast_shapes(x.shape, force.shape[:-1] + (10,)), dtype=np.result_type(x, force))
    out[..., 0:5] = x[..., 5:10]
    acc = _accel(x, force[..., 0], force[..., 1], force[..., 2], p)
    for i, a in enumerate(acc):
        out[..., 5 + i] = a
    return out


def forward_dynamics(state: SystemState, u: np.ndarray, p: ModelParams) -> np.ndarray:
    """Generalized acceleration ``q_dd = M^{-1}(u_ext - C q_dot - G)``.

    ``u`` is the total applied force (the gravity load is part of ``G``), so a
    hovering state with ``u = (m_q + m_l) g e3`` is a fixed point.  The mass
    matrix is factorized by Cholesky; a pivot below 1e-10 (swing approaching
    90 degrees) is refused as a domain error.
    """
    u = np.asarray(u, dtype=float)
    if u.shape != (3,) or not np.all(np.isfinite(u)):
        raise ValueError("u must be a finite 3-vector")
    q, q_dot = state.q, state.q_dot
    M = inertia_matrix(q, p)
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise SwingDomainError("mass matrix is not positive definite") from exc
    if np.min(np.diag(L)) ** 2 < 1e-10:
        raise SwingDomainError("mass matrix is nearly singular (cos(beta) ~ 0)")
    rhs = np.concatenate([u, np.zeros(2)]) - coriolis_matrix(q, q_dot, p) @ q_dot - gravity_vector(q, p)
    y = np.linalg.solve(L, rhs)
    return np.linalg.solve(L.T, y)


def control_affine_split(state: SystemState, p: ModelParams):
    """Quadrotor-channel split ``xi_dd = f_v + G_v @ u`` in the applied force.

    ``G_v`` is the translational block of the inverse mass matrix; ``f_v`` is
    the acceleration of the unforced system (gravity, coupling and swing).
    """
    _check_swing_domain(*state.gamma)
    x = state.as_vector()
    drift = np.array(_accel(x, 0.0, 0.0, 0.0, p)[:3])
    G_v = np.empty((3, 3))
    for j in range(3):
        f = np.zeros(3)
        f[j] = 1.0
        col = _accel(x, f[0], f[1], f[2], p)[:3]
        G_v[:, j] = np.array(col) - drift
    return drift, G_v


def payload_acceleration(state: SystemState, u: np.ndarray, p: ModelParams) -> np.ndarray:
    """Exact payload acceleration under an applied total force ``u``."""
    x = state.as_vector()
    u = np.asarray(u, dtype=float)
    xidd_x, xidd_y, xidd_z, add, bdd = _accel(x, u[0], u[1], u[2], p)
    alpha, beta = x[3], x[4]
    ad, bd = x[8], x[9]
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    # Second time derivative of l * cable_direction(gamma)
    ddirx = (ca * cb * add - sa * sb * bdd
             + (-sa * cb * ad - ca * sb * bd) * ad + (-ca * sb * ad - sa * cb * bd) * bd)
    ddiry = cb * bdd - sb * bd * bd
    ddirz = (sa * cb * add + ca * sb * bdd
             + (ca * cb * ad - sa * sb * bd) * ad + (-sa * sb * ad + ca * cb * bd) * bd)
    return np.array([xidd_x + p.l * ddirx, xidd_y + p.l * ddiry, xidd_z + p.l * ddirz])


def payload_acceleration_affine(state: SystemState, p: ModelParams):
    """Payload-channel split ``pL_dd ~= f_vL + G_v @ u`` with the quadrotor input map.

    The drift is the exact unforced payload acceleration.  The input map is
    deliberately shared with the quadrotor channel: the true force response of
    the payload is the rank-one map ``dir dir^T / (m_q + m_l)`` along the
    cable, but the barrier constraints are constructed with the full
    quadrotor map so both body channels stay affine in the same input with a
    non-degenerate coefficient row.
    """
    _check_swing_domain(*state.gamma)
    drift = payload_acceleration(state, np.zeros(3), p)
    _, G_v = control_affine_split(state, p)
    return drift, G_v


def mechanical_energy(state: SystemState, p: ModelParams) -> float:
    """Kinetic plus potential energy (zero reference at xi = 0 with the cable down)."""
    q, q_dot = state.q, state.q_dot
    T = 0.5 * q_dot @ inertia_matrix(q, p) @ q_dot
    alpha, beta = state.gamma
    U = p.total_mass * p.g * state.xi[2] + p.m_l * p.g * p.l * (1.0 - np.cos(alpha) * np.cos(beta))
    return float(T + U)


def attitude_command(u: np.ndarray, psi_d: float):
    """Map a desired force vector to (roll, pitch, thrust magnitude).

    Requires an upward thrust component; the arcsin argument is guarded to
    [-1, 1] within 1e-9.
    """
    u = np.asarray(u, dtype=float)
    F = float(np.linalg.norm(u))
    if F == 0.0:
        raise ValueError("thrust magnitude is zero")
    if u[2] <= 0.0:
        raise ValueError("thrust must point upward (u_z > 0)")
    s = (u[0] * np.sin(psi_d) - u[1] * np.cos(psi_d)) / F
    if abs(s) > 1.0 + 1e-9:
        raise ValueError("arcsin argument outside [-1, 1]")
    phi_d = float(np.arcsin(np.clip(s, -1.0, 1.0)))
    theta_d = float(np.arctan((u[0] * np.cos(psi_d) + u[1] * np.sin(psi_d)) / u[2]))
    return phi_d, theta_d, F


def skew(w: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


def attitude_rates(att: AttitudeState, tau: np.ndarray, p: ModelParams):
    """Rigid-body attitude dynamics: R_dot = R w^x, J w_dot = tau - w^x J w."""
    R_dot = att.rotation @ skew(att.omega)
    J = p.inertia
    omega_dot = np.linalg.solve(J, np.asarray(tau, dtype=float) - np.cross(att.omega, J @ att.omega))
    return R_dot, omega_dot
