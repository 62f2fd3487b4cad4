"""Rotation and Euler-angle kinematics helpers.

Conventions used throughout the package:

* body orientation is parametrized by 3-2-1 (yaw-pitch-roll) Euler angles
  ``eta = [phi, theta, psi]`` with ``R = Rz(psi) @ Ry(theta) @ Rx(phi)``,
* body rates relate to Euler rates via ``omega = T(eta) @ eta_dot``.

All functions broadcast: angles of shape ``(...,)`` produce matrices of
shape ``(..., 3, 3)``, which keeps the shooting-node linearization in the
predictive controller fully vectorized.
"""

import numpy as np

# |theta| must stay below pi/2 - PITCH_MARGIN; the 3-2-1 parametrization is
# singular at theta = pi/2.
PITCH_MARGIN = 0.087


class PitchSingularityError(ValueError):
    """Pitch angle too close to the +-pi/2 singularity of the 3-2-1 angles."""


def check_pitch(theta, margin=PITCH_MARGIN):
    limit = np.pi / 2.0 - margin
    if np.any(np.abs(theta) >= limit):
        worst = float(np.max(np.abs(theta)))
        raise PitchSingularityError(
            f"|pitch| = {worst:.4f} rad exceeds the singularity guard "
            f"{limit:.4f} rad"
        )


def skew(v):
    """Skew-symmetric matrix [v]x such that skew(v) @ w == cross(v, w)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def rot_x(a):
    a = np.asarray(a, dtype=float)
    c, s = np.cos(a), np.sin(a)
    out = np.zeros(a.shape + (3, 3))
    out[..., 0, 0] = 1.0
    out[..., 1, 1] = c
    out[..., 1, 2] = -s
    out[..., 2, 1] = s
    out[..., 2, 2] = c
    return out


def rot_y(a):
    a = np.asarray(a, dtype=float)
    c, s = np.cos(a), np.sin(a)
    out = np.zeros(a.shape + (3, 3))
    out[..., 1, 1] = 1.0
    out[..., 0, 0] = c
    out[..., 0, 2] = s
    out[..., 2, 0] = -s
    out[..., 2, 2] = c
    return out


def rot_z(a):
    a = np.asarray(a, dtype=float)
    c, s = np.cos(a), np.sin(a)
    out = np.zeros(a.shape + (3, 3))
    out[..., 2, 2] = 1.0
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    return out


def euler_to_rotation(eta):
    """Body-to-world rotation R = Rz(psi) Ry(theta) Rx(phi)."""
    eta = np.asarray(eta, dtype=float)
    phi, theta, psi = eta[..., 0], eta[..., 1], eta[..., 2]
    cf, sf = np.cos(phi), np.sin(phi)
    ct, st = np.cos(theta), np.sin(theta)
    cp, sp = np.cos(psi), np.sin(psi)
    out = np.empty(eta.shape[:-1] + (3, 3))
    out[..., 0, 0] = ct * cp
    out[..., 0, 1] = sf * st * cp - cf * sp
    out[..., 0, 2] = sf * sp + cf * st * cp
    out[..., 1, 0] = ct * sp
    out[..., 1, 1] = cf * cp + sf * st * sp
    out[..., 1, 2] = cf * st * sp - sf * cp
    out[..., 2, 0] = -st
    out[..., 2, 1] = sf * ct
    out[..., 2, 2] = cf * ct
    return out


def euler_rate_matrix(eta):
    """T(eta) mapping Euler rates to body rates, omega = T @ eta_dot."""
    eta = np.asarray(eta, dtype=float)
    phi, theta = eta[..., 0], eta[..., 1]
    cf, sf = np.cos(phi), np.sin(phi)
    ct, st = np.cos(theta), np.sin(theta)
    out = np.zeros(eta.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1.0
    out[..., 0, 2] = -st
    out[..., 1, 1] = cf
    out[..., 1, 2] = sf * ct
    out[..., 2, 1] = -sf
    out[..., 2, 2] = cf * ct
    return out


def euler_rate_matrix_inv(eta):
    """Inverse of T(eta), eta_dot = T^-1 @ omega.  Requires |theta| < pi/2."""
    eta = np.asarray(eta, dtype=float)
    phi, theta = eta[..., 0], eta[..., 1]
    cf, sf = np.cos(phi), np.sin(phi)
    ct = np.cos(theta)
    tt = np.tan(theta)
    out = np.zeros(eta.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1.0
    out[..., 0, 1] = sf * tt
    out[..., 0, 2] = cf * tt
    out[..., 1, 1] = cf
    out[..., 1, 2] = -sf
    out[..., 2, 1] = sf / ct
    out[..., 2, 2] = cf / ct
    return out
