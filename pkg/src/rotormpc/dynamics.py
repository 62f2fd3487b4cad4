"""Continuous multi-rotor dynamics, output map, and RK4 discretization.

State vector (length ``12 + n`` or ``13 + n`` for tiltable vehicles):

    x = [p(3), v(3), eta(3), omega(3), gamma(n), (alpha)]

with world-frame position/velocity, 3-2-1 Euler angles, body rates,
per-rotor thrust intensities and, where applicable, the servo tilt angle.
The control input is the vector of thrust-intensity rates (plus the tilt
rate), so actuator limitations enter the optimal control problem as plain
input bounds.

Equations of motion (Newton-Euler with the thrust wrench G(alpha) gamma):

    p_dot     = v
    v_dot     = -g e3 + R(eta) G1 gamma / m
    eta_dot   = T(eta)^-1 omega
    omega_dot = J^-1 (G2 gamma - omega x J omega)
    gamma_dot = u
    alpha_dot = u_alpha

The module exposes a batched evaluation path with analytic Jacobians; the
predictive controller propagates them through the RK4 stages to obtain
exact discrete-time sensitivities (no finite differencing).
"""

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import (
    PITCH_MARGIN,
    PitchSingularityError,
    euler_rate_matrix_inv,
    euler_to_rotation,
    skew,
)

# Compiled integrator kernels (numba).  Set ROTORMPC_NO_NUMBA=1 to force the
# pure-numpy reference path; the two are asserted equivalent in the tests.
if os.environ.get("ROTORMPC_NO_NUMBA") == "1":
    _kernels = None
else:
    try:
        from . import _kernels
    except ImportError:  # pragma: no cover - numba not installed
        _kernels = None

# State layout offsets.
POS = slice(0, 3)
VEL = slice(3, 6)
EULER = slice(6, 9)
OMEGA = slice(9, 12)
FORCE_START = 12


def state_dimension(model):
    return FORCE_START + model.n_rotors + (1 if model.tiltable else 0)


def input_dimension(model):
    return model.n_rotors + (1 if model.tiltable else 0)


def force_slice(model):
    return slice(FORCE_START, FORCE_START + model.n_rotors)


@dataclass
class FullState:
    """Stacked state of one multi-rotor."""

    position: np.ndarray
    velocity: np.ndarray
    euler: np.ndarray
    body_rates: np.ndarray
    forces: np.ndarray
    tilt: Optional[float] = None
    pitch_margin: float = PITCH_MARGIN

    def __post_init__(self):
        for name in ("position", "velocity", "euler", "body_rates", "forces"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if not np.isfinite(self.forces).all():
            raise ValueError("rotor forces must be finite")
        limit = np.pi / 2.0 - self.pitch_margin
        if abs(self.euler[1]) >= limit:
            raise PitchSingularityError(
                f"pitch {self.euler[1]:.4f} rad violates the singularity guard"
            )

    def as_vector(self):
        parts = [self.position, self.velocity, self.euler, self.body_rates, self.forces]
        if self.tilt is not None:
            parts.append([self.tilt])
        return np.concatenate(parts)

    @classmethod
    def from_vector(cls, vec, n_rotors, tiltable=False, pitch_margin=PITCH_MARGIN):
        vec = np.asarray(vec, dtype=float)
        tilt = float(vec[FORCE_START + n_rotors]) if tiltable else None
        return cls(
            position=vec[POS].copy(),
            velocity=vec[VEL].copy(),
            euler=vec[EULER].copy(),
            body_rates=vec[OMEGA].copy(),
            forces=vec[FORCE_START:FORCE_START + n_rotors].copy(),
            tilt=tilt,
            pitch_margin=pitch_margin,
        )


@dataclass
class ControlInput:
    """Thrust-intensity rates, and the tilt rate for tiltable vehicles."""

    force_rates: np.ndarray
    tilt_rate: Optional[float] = None

    def __post_init__(self):
        self.force_rates = np.asarray(self.force_rates, dtype=float)
        if not np.isfinite(self.force_rates).all():
            raise ValueError("force rates must be finite")
        if self.tilt_rate is not None and not np.isfinite(self.tilt_rate):
            raise ValueError("tilt rate must be finite")

    def as_vector(self):
        if self.tilt_rate is None:
            return self.force_rates.copy()
        return np.concatenate([self.force_rates, [self.tilt_rate]])

    @classmethod
    def from_vector(cls, vec, n_rotors, tiltable=False):
        vec = np.asarray(vec, dtype=float)
        tilt_rate = float(vec[n_rotors]) if tiltable else None
        return cls(force_rates=vec[:n_rotors].copy(), tilt_rate=tilt_rate)


@dataclass
class OutputVector:
    """Tracked outputs: pose, twist, and the accelerations they imply."""

    position: np.ndarray
    velocity: np.ndarray
    linear_acceleration: np.ndarray
    euler: np.ndarray
    body_rates: np.ndarray
    angular_acceleration: np.ndarray
    energy_cost: Optional[float] = None

    def as_vector(self):
        parts = [
            self.position,
            self.velocity,
            self.linear_acceleration,
            self.euler,
            self.body_rates,
            self.angular_acceleration,
        ]
        if self.energy_cost is not None:
            parts.append([self.energy_cost])
        return np.concatenate([np.asarray(p, dtype=float) for p in parts])


def output_dimension(include_energy=False):
    return 19 if include_energy else 18


def _check_pitch_batch(theta, margin):
    if np.any(np.abs(theta) >= np.pi / 2.0 - margin):
        raise PitchSingularityError(
            "pitch singularity guard violated during integration"
        )


def _wrench_terms(model, X):
    """Rotor geometry products shared by the dynamics and its Jacobian."""
    n = model.n_rotors
    gamma = X[:, FORCE_START:FORCE_START + n]
    if model.tiltable:
        alpha = X[:, FORCE_START + n]
        G = model.allocation_batch(alpha)
        dG = model.allocation_batch_dalpha(alpha)
        wrench = np.einsum("bij,bj->bi", G, gamma)
        dwrench = np.einsum("bij,bj->bi", dG, gamma)
    else:
        G = model._fixed_allocation
        wrench = gamma @ G.T
        dG = None
        dwrench = None
    return gamma, G, wrench, dG, dwrench


def eval_dynamics(model, X, U, pitch_margin=PITCH_MARGIN, f_dist=None, tau_dist=None):
    """Batched state derivative; X is (B, nx), U is (B, nu).

    ``f_dist`` (world frame) and ``tau_dist`` (body frame) inject an
    exogenous disturbance wrench, used by the simulation plant.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    n = model.n_rotors
    eta = X[:, EULER]
    _check_pitch_batch(eta[:, 1], pitch_margin)
    omega = X[:, OMEGA]

    _, _, wrench, _, _ = _wrench_terms(model, X)
    R = euler_to_rotation(eta)
    Tinv = euler_rate_matrix_inv(eta)

    dX = np.zeros_like(X)
    dX[:, POS] = X[:, VEL]
    dX[:, VEL] = np.einsum("bij,bj->bi", R, wrench[:, :3]) / model.mass
    dX[:, 5] -= model.gravity
    dX[:, EULER] = np.einsum("bij,bj->bi", Tinv, omega)
    Jom = omega @ model.inertia.T
    torque = wrench[:, 3:] - np.cross(omega, Jom)
    if f_dist is not None:
        dX[:, VEL] += np.asarray(f_dist, dtype=float) / model.mass
    if tau_dist is not None:
        torque = torque + np.asarray(tau_dist, dtype=float)
    dX[:, OMEGA] = torque @ model.inertia_inv.T
    dX[:, FORCE_START:FORCE_START + n] = U[:, :n]
    if model.tiltable:
        dX[:, FORCE_START + n] = U[:, n]
    return dX


def eval_dynamics_with_jacobian(model, X, U, pitch_margin=PITCH_MARGIN):
    """Batched (state derivative, d f/d x); the input Jacobian is constant.

    Returns ``(dX, Fx)`` with shapes ``(B, nx)`` and ``(B, nx, nx)``.  Use
    :func:`input_jacobian` for d f/d u.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    B = X.shape[0]
    n = model.n_rotors
    nx = X.shape[1]
    m = model.mass
    eta = X[:, EULER]
    _check_pitch_batch(eta[:, 1], pitch_margin)
    omega = X[:, OMEGA]

    gamma, G, wrench, dG, dwrench = _wrench_terms(model, X)

    phi, theta = eta[:, 0], eta[:, 1]
    cf, sf = np.cos(phi), np.sin(phi)
    ct, st = np.cos(theta), np.sin(theta)
    tt = st / ct

    R = euler_to_rotation(eta)
    Tinv = euler_rate_matrix_inv(eta)

    dX = np.zeros_like(X)
    dX[:, POS] = X[:, VEL]
    fb = wrench[:, :3] / m
    Rfb = np.einsum("bij,bj->bi", R, fb)
    dX[:, VEL] = Rfb
    dX[:, 5] -= model.gravity
    dX[:, EULER] = np.einsum("bij,bj->bi", Tinv, omega)
    Jom = omega @ model.inertia.T
    dX[:, OMEGA] = (wrench[:, 3:] - np.cross(omega, Jom)) @ model.inertia_inv.T
    dX[:, FORCE_START:FORCE_START + n] = U[:, :n]
    if model.tiltable:
        dX[:, FORCE_START + n] = U[:, n]

    Fx = np.zeros((B, nx, nx))
    Fx[:, 0, 3] = 1.0
    Fx[:, 1, 4] = 1.0
    Fx[:, 2, 5] = 1.0

    # d v_dot / d eta via dR/dphi = R [e1]x, dR/dtheta = R [Rx^T e2]x,
    # dR/dpsi = [e3]x R.
    e1_x_fb = np.stack([np.zeros(B), -fb[:, 2], fb[:, 1]], axis=-1)
    c2 = np.stack([np.zeros(B), cf, -sf], axis=-1)
    c2_x_fb = np.cross(c2, fb)
    Fx[:, VEL, 6] = np.einsum("bij,bj->bi", R, e1_x_fb)
    Fx[:, VEL, 7] = np.einsum("bij,bj->bi", R, c2_x_fb)
    Fx[:, 3, 8] = -Rfb[:, 1]
    Fx[:, 4, 8] = Rfb[:, 0]

    Fx[:, VEL, FORCE_START:FORCE_START + n] = (
        np.einsum("bij,bjn->bin", R, G[..., :3, :]) / m
        if model.tiltable
        else np.einsum("bij,jn->bin", R, G[:3, :]) / m
    )

    # d eta_dot / d (phi, theta): derivative of T^-1(eta) omega.
    w2, w3 = omega[:, 1], omega[:, 2]
    a = sf * w2 + cf * w3
    b = cf * w2 - sf * w3
    Fx[:, 6, 6] = b * tt
    Fx[:, 7, 6] = -a
    Fx[:, 8, 6] = b / ct
    Fx[:, 6, 7] = a / ct**2
    Fx[:, 8, 7] = a * tt / ct
    Fx[:, EULER, OMEGA] = Tinv

    # d omega_dot / d omega = J^-1 ([J omega]x - [omega]x J).
    M = skew(Jom) - skew(omega) @ model.inertia
    Fx[:, OMEGA, OMEGA] = np.einsum("ij,bjk->bik", model.inertia_inv, M)
    Fx[:, OMEGA, FORCE_START:FORCE_START + n] = (
        np.einsum("ij,bjn->bin", model.inertia_inv, G[..., 3:, :])
        if model.tiltable
        else np.einsum("ij,jn->in", model.inertia_inv, G[3:, :])
    )

    if model.tiltable:
        tilt_col = FORCE_START + n
        Fx[:, VEL, tilt_col] = np.einsum("bij,bj->bi", R, dwrench[:, :3]) / m
        Fx[:, OMEGA, tilt_col] = dwrench[:, 3:] @ model.inertia_inv.T

    return dX, Fx


def input_jacobian(model):
    """Constant d f/d u: force rates and the tilt rate integrate directly."""
    nx = state_dimension(model)
    nu = input_dimension(model)
    n = model.n_rotors
    Fu = np.zeros((nx, nu))
    Fu[FORCE_START:FORCE_START + n, :n] = np.eye(n)
    if model.tiltable:
        Fu[FORCE_START + n, n] = 1.0
    return Fu


_ZERO3 = np.zeros(3)


def rk4_batch(model, X, U, dt, substeps=1, pitch_margin=PITCH_MARGIN,
              f_dist=None, tau_dist=None):
    """Classical RK4 with zero-order-hold input, batched over rows.

    The optional disturbance wrench is held constant over the step.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    X = np.atleast_2d(np.ascontiguousarray(X, dtype=float)).copy()
    U = np.atleast_2d(np.ascontiguousarray(U, dtype=float))
    h = dt / substeps
    if _kernels is not None and pitch_margin == PITCH_MARGIN:
        fd = _ZERO3 if f_dist is None else np.ascontiguousarray(f_dist, dtype=float)
        td = _ZERO3 if tau_dist is None else np.ascontiguousarray(tau_dist, dtype=float)
        out, err = _kernels.rk4_kernel(X, U, h, substeps, *model.kernel_arrays, fd, td)
        if err:
            raise PitchSingularityError(
                "pitch singularity guard violated during integration"
            )
        return out
    for _ in range(substeps):
        k1 = eval_dynamics(model, X, U, pitch_margin, f_dist, tau_dist)
        k2 = eval_dynamics(model, X + 0.5 * h * k1, U, pitch_margin, f_dist, tau_dist)
        k3 = eval_dynamics(model, X + 0.5 * h * k2, U, pitch_margin, f_dist, tau_dist)
        k4 = eval_dynamics(model, X + h * k3, U, pitch_margin, f_dist, tau_dist)
        X += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return X


def rk4_sensitivities(model, X, U, dt, substeps=1, pitch_margin=PITCH_MARGIN):
    """RK4 step with exact discrete Jacobians A = d x+/d x, B = d x+/d u.

    The variational equations are propagated through every RK4 stage, so
    A and B are the derivatives of the integrator map itself.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    X = np.atleast_2d(np.ascontiguousarray(X, dtype=float)).copy()
    U = np.atleast_2d(np.ascontiguousarray(U, dtype=float))
    if _kernels is not None and pitch_margin == PITCH_MARGIN:
        out, A, Bmat, err = _kernels.rk4_sens_kernel(
            X, U, dt / substeps, substeps, *model.kernel_arrays
        )
        if err:
            raise PitchSingularityError(
                "pitch singularity guard violated during integration"
            )
        return out, A, Bmat
    Bn, nx = X.shape
    nu = U.shape[1]
    S = np.zeros((Bn, nx, nx + nu))
    S[:, :, :nx] = np.eye(nx)
    Fu_pad = np.zeros((nx, nx + nu))
    Fu_pad[:, nx:] = input_jacobian(model)

    h = dt / substeps
    for _ in range(substeps):
        k1, A1 = eval_dynamics_with_jacobian(model, X, U, pitch_margin)
        d1 = A1 @ S + Fu_pad
        X2 = X + 0.5 * h * k1
        k2, A2 = eval_dynamics_with_jacobian(model, X2, U, pitch_margin)
        d2 = A2 @ (S + 0.5 * h * d1) + Fu_pad
        X3 = X + 0.5 * h * k2
        k3, A3 = eval_dynamics_with_jacobian(model, X3, U, pitch_margin)
        d3 = A3 @ (S + 0.5 * h * d2) + Fu_pad
        X4 = X + h * k3
        k4, A4 = eval_dynamics_with_jacobian(model, X4, U, pitch_margin)
        d4 = A4 @ (S + h * d3) + Fu_pad
        X += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        S += (h / 6.0) * (d1 + 2.0 * d2 + 2.0 * d3 + d4)
    return X, S[:, :, :nx], S[:, :, nx:]


def eval_outputs(model, X, U, include_energy=False):
    """Batched output vector y = [p, v, v_dot, eta, omega, omega_dot(, ce)]."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    n = model.n_rotors
    dX = eval_dynamics(model, X, U)
    cols = [X[:, POS], X[:, VEL], dX[:, VEL], X[:, EULER], X[:, OMEGA], dX[:, OMEGA]]
    if include_energy:
        ce = np.sum(X[:, FORCE_START:FORCE_START + n] ** 2, axis=1, keepdims=True)
        cols.append(ce)
    return np.concatenate(cols, axis=1)


def eval_outputs_with_jacobian(model, X, U, include_energy=False):
    """Batched outputs plus C = d y/d x; d y/d u vanishes for this model."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    B = X.shape[0]
    n = model.n_rotors
    nx = X.shape[1]
    ny = output_dimension(include_energy)
    dX, Fx = eval_dynamics_with_jacobian(model, X, U)

    Y = np.empty((B, ny))
    Y[:, 0:3] = X[:, POS]
    Y[:, 3:6] = X[:, VEL]
    Y[:, 6:9] = dX[:, VEL]
    Y[:, 9:12] = X[:, EULER]
    Y[:, 12:15] = X[:, OMEGA]
    Y[:, 15:18] = dX[:, OMEGA]

    C = np.zeros((B, ny, nx))
    idx = np.arange(3)
    C[:, idx, idx] = 1.0
    C[:, idx + 3, idx + 3] = 1.0
    C[:, 6:9, :] = Fx[:, VEL, :]
    C[:, idx + 9, idx + 6] = 1.0
    C[:, idx + 12, idx + 9] = 1.0
    C[:, 15:18, :] = Fx[:, OMEGA, :]
    if include_energy:
        gamma = X[:, FORCE_START:FORCE_START + n]
        Y[:, 18] = np.sum(gamma**2, axis=1)
        C[:, 18, FORCE_START:FORCE_START + n] = 2.0 * gamma
    return Y, C


# Single-state convenience wrappers used by the public API and the plant.

def continuous_dynamics(model, state, control):
    """State derivative as a flat vector ordered like FullState.as_vector."""
    x = state.as_vector()
    u = control.as_vector()
    return eval_dynamics(model, x[None, :], u[None, :], state.pitch_margin)[0]


def output_map(model, state, control, include_energy=False):
    x = state.as_vector()
    u = control.as_vector()
    y = eval_outputs(model, x[None, :], u[None, :], include_energy)[0]
    energy = float(y[18]) if include_energy else None
    return OutputVector(
        position=y[0:3],
        velocity=y[3:6],
        linear_acceleration=y[6:9],
        euler=y[9:12],
        body_rates=y[12:15],
        angular_acceleration=y[15:18],
        energy_cost=energy,
    )


def rk4_step(model, state, control, dt, substeps=1):
    x = state.as_vector()
    u = control.as_vector()
    x_next = rk4_batch(model, x[None, :], u[None, :], dt, substeps, state.pitch_margin)[0]
    return FullState.from_vector(
        x_next, model.n_rotors, model.tiltable, state.pitch_margin
    )
