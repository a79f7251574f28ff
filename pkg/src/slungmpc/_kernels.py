"""Compiled hot loops for the controller's rollout and sensitivity pass.

These duplicate the closed-form dynamics of :mod:`.model` in scalar form so
numba can compile them; the module-level tests assert agreement with the
numpy reference path to machine precision.  Everything here is internal to
:mod:`.ocp`.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _derivative(x, F, m_l, m_q, l, g, out):
    """State derivative for a complex batch; ``x`` (B, 10), ``F`` (B, 3)."""
    mt = m_q + m_l
    ml = m_l * l
    for i in range(x.shape[0]):
        alpha = x[i, 3]
        beta = x[i, 4]
        ad = x[i, 8]
        bd = x[i, 9]
        ca = np.cos(alpha)
        sa = np.sin(alpha)
        cb = np.cos(beta)
        sb = np.sin(beta)

        f1x = -ml * ((ad * sa * cb + bd * ca * sb) * ad + (ad * ca * sb + bd * sa * cb) * bd)
        f1y = -ml * bd * sb * bd
        f1z = ml * ((ad * ca * cb - bd * sa * sb) * ad + (-ad * sa * sb + bd * ca * cb) * bd)
        f4 = -2.0 * m_l * l * l * cb * sb * ad * bd
        f5 = m_l * l * l * cb * sb * ad * ad

        b1x = F[i, 0] - f1x
        b1y = F[i, 1] - f1y
        b1z = F[i, 2] - f1z - mt * g
        b4 = -f4 - m_l * g * l * sa * cb
        b5 = -f5 - m_l * g * l * ca * sb

        s1 = m_l * l * l * (m_q / mt) * cb * cb
        s2 = m_l * l * l * (m_q / mt)
        add = (b4 - ml * (ca * cb * b1x + sa * cb * b1z) / mt) / s1
        bdd = (b5 - ml * (-sa * sb * b1x + cb * b1y + ca * sb * b1z) / mt) / s2

        out[i, 0] = x[i, 5]
        out[i, 1] = x[i, 6]
        out[i, 2] = x[i, 7]
        out[i, 3] = ad
        out[i, 4] = bd
        out[i, 5] = (b1x - ml * (ca * cb * add - sa * sb * bdd)) / mt
        out[i, 6] = (b1y - ml * cb * bdd) / mt
        out[i, 7] = (b1z - ml * (sa * cb * add + ca * sb * bdd)) / mt
        out[i, 8] = add
        out[i, 9] = bdd


@njit(cache=True)
def _rk4_batch(x, u, xi_d, K, hover_z, dt, m_l, m_q, l, g):
    """One node step for a complex batch; the force is frozen at the start."""
    B = x.shape[0]
    F = np.empty((B, 3), dtype=np.complex128)
    for i in range(B):
        for j in range(3):
            e_j = 0.0 + 0.0j
            for c in range(3):
                e_j += K[j, c] * (x[i, c] - xi_d[c])
            F[i, j] = u[i, j] - e_j
        F[i, 2] += hover_z
    k1 = np.empty_like(x)
    k2 = np.empty_like(x)
    k3 = np.empty_like(x)
    k4 = np.empty_like(x)
    _derivative(x, F, m_l, m_q, l, g, k1)
    _derivative(x + (dt / 2) * k1, F, m_l, m_q, l, g, k2)
    _derivative(x + (dt / 2) * k2, F, m_l, m_q, l, g, k3)
    _derivative(x + dt * k3, F, m_l, m_q, l, g, k4)
    return x + (dt / 6) * (k1 + 2 * k2 + 2 * k3 + k4)


@njit(cache=True)
def sim_rk4_kernel(x0, u, dt, n_steps, m_l, m_q, l, g, gamma_limit):
    """``n_steps`` classical RK4 steps under a constant force.

    Returns ``(x, ok)`` with ``ok`` false as soon as a step leaves the
    swing-angle domain; the state returned is the last one computed.
    """
    x = np.empty((1, 10))
    F = np.empty((1, 3))
    for j in range(10):
        x[0, j] = x0[j]
    for j in range(3):
        F[0, j] = u[j]
    k1 = np.empty_like(x)
    k2 = np.empty_like(x)
    k3 = np.empty_like(x)
    k4 = np.empty_like(x)
    for _ in range(n_steps):
        _derivative(x, F, m_l, m_q, l, g, k1)
        _derivative(x + (dt / 2) * k1, F, m_l, m_q, l, g, k2)
        _derivative(x + (dt / 2) * k2, F, m_l, m_q, l, g, k3)
        _derivative(x + dt * k3, F, m_l, m_q, l, g, k4)
        x = x + (dt / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        if abs(x[0, 3]) >= gamma_limit or abs(x[0, 4]) >= gamma_limit:
            return x[0], False
    return x[0], True


@njit(cache=True)
def rollout_kernel(x0, U, xi_d, K, hover_z, dt, m_l, m_q, l, g, gamma_limit):
    """Real rollout; returns ``(X, ok)`` with ``ok`` false on domain exit."""
    N = U.shape[0]
    X = np.zeros((N + 1, 10))
    Z = np.empty((1, 10), dtype=np.complex128)
    Uc = np.empty((1, 3), dtype=np.complex128)
    X[0] = x0
    for k in range(N):
        for j in range(10):
            Z[0, j] = X[k, j]
        for j in range(3):
            Uc[0, j] = U[k, j]
        nxt = _rk4_batch(Z, Uc, xi_d.astype(np.complex128), K, hover_z, dt, m_l, m_q, l, g)
        for j in range(10):
            X[k + 1, j] = nxt[0, j].real
            if not np.isfinite(X[k + 1, j]):
                return X, False
        if abs(X[k + 1, 3]) >= gamma_limit or abs(X[k + 1, 4]) >= gamma_limit:
            return X, False
    return X, True


@njit(cache=True)
def linearize_kernel(x0, U, xi_d, K, hover_z, dt, m_l, m_q, l, g, gamma_limit, h):
    """Rollout with complex-step sensitivities; returns ``(X, A, B, ok)``."""
    N = U.shape[0]
    X = np.zeros((N + 1, 10))
    A = np.zeros((N, 10, 10))
    Bm = np.zeros((N, 10, 3))
    X[0] = x0
    Z = np.empty((14, 10), dtype=np.complex128)
    Uc = np.empty((14, 3), dtype=np.complex128)
    xi_dc = xi_d.astype(np.complex128)
    for k in range(N):
        for i in range(14):
            for j in range(10):
                Z[i, j] = X[k, j]
            for j in range(3):
                Uc[i, j] = U[k, j]
        for d in range(10):
            Z[1 + d, d] += 1j * h
        for d in range(3):
            Uc[11 + d, d] += 1j * h
        nxt = _rk4_batch(Z, Uc, xi_dc, K, hover_z, dt, m_l, m_q, l, g)
        for j in range(10):
            X[k + 1, j] = nxt[0, j].real
            if not np.isfinite(X[k + 1, j]):
                return X, A, Bm, False
        if abs(X[k + 1, 3]) >= gamma_limit or abs(X[k + 1, 4]) >= gamma_limit:
            return X, A, Bm, False
        for d in range(10):
            for j in range(10):
                A[k, j, d] = nxt[1 + d, j].imag / h
        for d in range(3):
            for j in range(10):
                Bm[k, j, d] = nxt[11 + d, j].imag / h
    return X, A, Bm, True
