"""Reference trajectories for the tracking controller.

A reference supplies the enlarged output signal

    y_r(t) = [p_r, p_dot_r, p_ddot_r, eta_r, omega_r, omega_dot_r (, ce_r)]

sampled at the shooting nodes.  References are allowed to be dynamically
unfeasible on purpose (steps, aggressive chirps); the controller is the
one responsible for bending them into something the platform can fly.
"""

import numpy as np


class ReferenceTrajectory:
    """Base class; subclasses fill position/attitude channels over time."""

    #: step-like references are revealed to the controller only at the
    #: instant they change: the whole horizon sees the current value.
    previewless = False
    #: energy reference used when the energy output is tracked.
    energy_reference = 0.0

    def _channels(self, t):
        """Return (p, v, a, eta, omega, omega_dot) arrays of shape (nt, 3)."""
        raise NotImplementedError

    def sample(self, t, include_energy=False):
        """Sample y_r at times ``t``; returns (nt, 18) or (nt, 19)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        p, v, a, eta, omega, omega_dot = self._channels(t)
        cols = [p, v, a, eta, omega, omega_dot]
        if include_energy:
            cols.append(np.full((t.shape[0], 1), float(self.energy_reference)))
        return np.concatenate(cols, axis=1)


class ChirpReference(ReferenceTrajectory):
    """Sine with triangularly varying frequency along one position axis.

    c(t) = amplitude * sin(xi(t) t) where xi(t) ramps up at ``slope`` until
    ``t_bar`` and back down until 2 t_bar; the reference then holds the
    final position.  Attitude channels stay at zero.
    """

    def __init__(self, amplitude, slope, t_bar, axis=0, origin=None):
        if amplitude <= 0.0 or slope <= 0.0 or t_bar <= 0.0:
            raise ValueError("amplitude, slope, and t_bar must be positive")
        self.amplitude = float(amplitude)
        self.slope = float(slope)
        self.t_bar = float(t_bar)
        self.axis = int(axis)
        self.origin = np.zeros(3) if origin is None else np.asarray(origin, dtype=float)

    def frequency(self, t):
        """The triangular frequency profile xi(t) [rad/s]."""
        t = np.asarray(t, dtype=float)
        return np.where(t < self.t_bar, self.slope * t, self.slope * (self.t_bar - t))

    def _channels(self, t):
        nt = t.shape[0]
        nu, xi, tb = self.amplitude, self.slope, self.t_bar
        up = t < tb
        mid = (t >= tb) & (t < 2.0 * tb)
        # phase and its time derivatives on each branch
        theta = np.where(up, xi * t * t, xi * (tb - t) * t)
        dtheta = np.where(up, 2.0 * xi * t, xi * (tb - 2.0 * t))
        ddtheta = np.where(up, 2.0 * xi, -2.0 * xi)
        c = nu * np.sin(theta)
        dc = nu * dtheta * np.cos(theta)
        ddc = nu * (ddtheta * np.cos(theta) - dtheta**2 * np.sin(theta))
        done = ~(up | mid)
        if np.any(done):
            t_end = 2.0 * tb
            c_end = nu * np.sin(xi * (tb - t_end) * t_end)
            c = np.where(done, c_end, c)
            dc = np.where(done, 0.0, dc)
            ddc = np.where(done, 0.0, ddc)
        p = np.tile(self.origin, (nt, 1))
        v = np.zeros((nt, 3))
        a = np.zeros((nt, 3))
        p[:, self.axis] += c
        v[:, self.axis] = dc
        a[:, self.axis] = ddc
        zero = np.zeros((nt, 3))
        return p, v, a, zero, zero, zero


class StepReference(ReferenceTrajectory):
    """Alternating position set-points every ``period`` seconds.

    All derivative references are zero: each jump asks for an immediate
    hover at the new location.  The reference is previewless -- the horizon
    only learns about a jump once it has happened.
    """

    previewless = True

    def __init__(self, p1, p2, period, euler=None):
        if period <= 0.0:
            raise ValueError("period must be positive")
        self.p1 = np.asarray(p1, dtype=float)
        self.p2 = np.asarray(p2, dtype=float)
        self.period = float(period)
        self.euler_ref = np.zeros(3) if euler is None else np.asarray(euler, dtype=float)

    def _channels(self, t):
        nt = t.shape[0]
        odd = (np.floor(t / self.period).astype(int) % 2).astype(bool)
        p = np.where(odd[:, None], self.p2, self.p1)
        zero = np.zeros((nt, 3))
        eta = np.tile(self.euler_ref, (nt, 1))
        return p, zero, zero, eta, zero, zero


class HoverReference(ReferenceTrajectory):
    """Constant pose with zero derivative references."""

    def __init__(self, position, euler=None, energy_reference=0.0):
        self.position = np.asarray(position, dtype=float)
        self.euler_ref = np.zeros(3) if euler is None else np.asarray(euler, dtype=float)
        self.energy_reference = float(energy_reference)

    def _channels(self, t):
        nt = t.shape[0]
        zero = np.zeros((nt, 3))
        p = np.tile(self.position, (nt, 1))
        eta = np.tile(self.euler_ref, (nt, 1))
        return p, zero, zero, eta, zero, zero


def chirp_reference(amplitude, slope, t_bar, axis=0, origin=None):
    return ChirpReference(amplitude, slope, t_bar, axis, origin)


def step_reference(p1, p2, period, euler=None):
    return StepReference(p1, p2, period, euler)


def hover_reference(position, euler=None, energy_reference=0.0):
    return HoverReference(position, euler, energy_reference)


def hover_energy_reference(model):
    """Energy output at an idealized level hover with equal thrust split."""
    n = model.n_rotors
    return n * (model.mass * model.gravity / n) ** 2
