"""Optimal-control-problem assembly.

This module is purely declarative: it samples the reference over the
horizon, freezes the actuator bounds, and packs everything into an
:class:`OcpProblem` that the solver consumes.  No solution method lives
here.

Input-bound schedule.  The thrust-rate limits depend on the thrust level,
which is itself a decision variable; to keep the constraints linear the
bounds are evaluated once at the measured thrusts and held constant along
the horizon (the "frozen" policy).  A time-varying policy based on the
previous solution is reserved but not implemented.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import dynamics as dyn

log = logging.getLogger(__name__)

BOUND_POLICIES = ("frozen", "previous_solution")

# Servo limits of the tiltable hexarotor prototype.
TILT_LIMIT = np.deg2rad(35.0)
TILT_RATE_LIMIT = np.deg2rad(8.75)


@dataclass
class Weights:
    """Diagonal tracking weights; ordered as the physical quantities."""

    q_p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q_v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q_eta: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q_omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q_acc: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q_angacc: np.ndarray = field(default_factory=lambda: np.zeros(3))
    r_u: Optional[np.ndarray] = None
    r_tilt: float = 0.0
    q_energy: float = 0.0
    terminal: Optional["Weights"] = None
    slack_penalty: float = 1e4

    def __post_init__(self):
        for name in ("q_p", "q_v", "q_eta", "q_omega", "q_acc", "q_angacc"):
            value = np.asarray(getattr(self, name), dtype=float)
            if value.ndim == 0:
                value = np.full(3, float(value))
            setattr(self, name, value)
            if np.any(value < 0.0):
                raise ValueError(f"{name} must be non-negative")
        if self.r_u is not None:
            self.r_u = np.asarray(self.r_u, dtype=float)
            if np.any(self.r_u < 0.0):
                raise ValueError("r_u must be non-negative")
        if self.q_energy < 0.0 or self.r_tilt < 0.0:
            raise ValueError("weights must be non-negative")
        if self.slack_penalty <= 0.0:
            raise ValueError("slack_penalty must be positive")

    def output_diagonal(self, include_energy=False):
        """Weight vector in output order [p, v, acc, eta, omega, angacc(, ce)]."""
        parts = [self.q_p, self.q_v, self.q_acc, self.q_eta, self.q_omega, self.q_angacc]
        if include_energy:
            parts.append([self.q_energy])
        return np.concatenate([np.asarray(p, dtype=float) for p in parts])

    def input_diagonal(self, n_rotors, tiltable=False):
        r = np.zeros(n_rotors) if self.r_u is None else self.r_u
        if len(r) != n_rotors:
            raise ValueError("r_u length does not match the rotor count")
        if tiltable:
            return np.concatenate([r, [self.r_tilt]])
        return r.copy()


@dataclass
class OcpProblem:
    """One tracking OCP instance over an N-step horizon of length N*T."""

    horizon: int                    # N
    step: float                     # T [s]
    time: float                     # wall time of node 0
    initial_state: np.ndarray       # (nx,)
    references: np.ndarray          # (N+1, ny)
    stage_weight: np.ndarray        # (ny,)
    terminal_weight: np.ndarray     # (ny,)
    input_weight: np.ndarray        # (nu,)
    input_lo: np.ndarray            # (N, nu)
    input_hi: np.ndarray            # (N, nu)
    state_box_index: np.ndarray     # (nb,) state coordinates with box bounds
    state_box_lo: np.ndarray        # (nb,)
    state_box_hi: np.ndarray        # (nb,)
    slack_penalty: float = 1e4
    tightening: float = 0.98

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must have at least one step")
        if self.step <= 0.0:
            raise ValueError("step length must be positive")
        if self.references.shape[0] != self.horizon + 1:
            raise ValueError("need N+1 reference samples")
        if np.any(self.input_lo > self.input_hi):
            raise ValueError("input bounds must satisfy lo <= hi")
        if np.any(self.state_box_lo > self.state_box_hi):
            raise ValueError("state box must satisfy lo <= hi")

    @property
    def horizon_length(self):
        return self.horizon * self.step

    def tightened_state_box(self):
        """State box shrunk toward its center by the tightening factor."""
        center = 0.5 * (self.state_box_lo + self.state_box_hi)
        half = 0.5 * (self.state_box_hi - self.state_box_lo)
        return center - self.tightening * half, center + self.tightening * half


def assemble(model, actuator, weights, reference, state, t, horizon=10,
             step=0.1, bound_policy="frozen", tightening=0.98,
             tilt_limit=TILT_LIMIT, tilt_rate_limit=TILT_RATE_LIMIT,
             clamp_tolerance=1e-6):
    """Build the OCP solved at time ``t`` from the measured ``state``.

    The measured thrusts are clamped into the admissible force box (noise
    can push them marginally outside); the thrust-rate bounds are evaluated
    at the clamped thrusts and held constant over the horizon.
    """
    if bound_policy not in BOUND_POLICIES:
        raise ValueError(f"unknown bound policy {bound_policy!r}")
    if bound_policy == "previous_solution":
        raise NotImplementedError(
            "time-varying input bounds from the previous solution are reserved"
        )

    x = state.as_vector() if isinstance(state, dyn.FullState) else np.asarray(state, dtype=float)
    x = x.copy()
    n = model.n_rotors
    fsl = dyn.force_slice(model)

    f_lo, f_hi = actuator.force_bounds()
    forces = x[fsl]
    worst = max(np.max(f_lo - forces, initial=0.0), np.max(forces - f_hi, initial=0.0))
    if worst > clamp_tolerance:
        log.warning("measured thrust outside bounds by %.3g N; clamped", worst)
    x[fsl] = np.clip(forces, f_lo, f_hi)

    include_energy = weights.q_energy > 0.0
    if reference.previewless:
        times = np.full(horizon + 1, t)
    else:
        times = t + step * np.arange(horizon + 1)
    refs = reference.sample(times, include_energy)

    rate_lo, rate_hi = actuator.force_rate_bounds(x[fsl])
    input_lo = np.tile(rate_lo, (horizon, 1))
    input_hi = np.tile(rate_hi, (horizon, 1))

    box_index = list(range(fsl.start, fsl.stop))
    box_lo = [f_lo] * n
    box_hi = [f_hi] * n
    if model.tiltable:
        tilt_index = fsl.stop
        x[tilt_index] = np.clip(x[tilt_index], -tilt_limit, tilt_limit)
        box_index.append(tilt_index)
        box_lo.append(-tilt_limit)
        box_hi.append(tilt_limit)
        input_lo = np.hstack([input_lo, np.full((horizon, 1), -tilt_rate_limit)])
        input_hi = np.hstack([input_hi, np.full((horizon, 1), tilt_rate_limit)])

    stage_w = weights.output_diagonal(include_energy)
    terminal_w = (
        weights.terminal.output_diagonal(include_energy)
        if weights.terminal is not None
        else stage_w.copy()
    )
    return OcpProblem(
        horizon=horizon,
        step=step,
        time=t,
        initial_state=x,
        references=refs,
        stage_weight=stage_w,
        terminal_weight=terminal_w,
        input_weight=weights.input_diagonal(n, model.tiltable),
        input_lo=input_lo,
        input_hi=input_hi,
        state_box_index=np.asarray(box_index, dtype=int),
        state_box_lo=np.asarray(box_lo, dtype=float),
        state_box_hi=np.asarray(box_hi, dtype=float),
        slack_penalty=weights.slack_penalty,
        tightening=tightening,
    )
