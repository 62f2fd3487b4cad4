"""Vehicle geometry and the allocation matrix.

A multi-rotor is a rigid body driven by ``n`` thrust units.  Rotor ``j``
contributes the wrench column

    G[:, j] = [ R_j e3 ; ([p_j]x + c_j c_f_tau I) R_j e3 ]

where ``R_j`` is the rotor frame orientation in body axes, ``p_j`` its
position, ``c_j`` the spin sign and ``c_f_tau`` the drag-to-thrust ratio.
Stacking the columns gives the 6 x n allocation matrix mapping thrust
intensities to the body force/torque pair.

Synchronously tiltable platforms rotate each rotor about its arm axis by
``tilt_sign_j * alpha`` where ``alpha`` is a single servo angle shared by
all rotors; for those vehicles the allocation matrix is a function of
``alpha`` and its derivative w.r.t. ``alpha`` is needed by the controller
linearization.
"""

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import yaml

from .geometry import rot_x, rot_y, rot_z, skew

E3 = np.array([0.0, 0.0, 1.0])

_PRESET_DIR = Path(__file__).parent / "data" / "vehicles"


class ConfigurationError(ValueError):
    """Invalid vehicle description (geometry, parameters, or tilt usage)."""


@dataclass(frozen=True)
class RotorGeometry:
    """Pose and spin direction of one thrust unit in body axes."""

    position: np.ndarray        # p_j [m]
    orientation: np.ndarray     # R_j at alpha = 0
    spin_sign: int              # +1 drag torque along thrust, -1 opposed
    tiltable: bool = False
    tilt_sign: int = 1          # rotor tilts by tilt_sign * alpha
    arm_angle: float = 0.0      # [rad] rotation of the arm about body z
    beta: float = 0.0           # [rad] fixed tilt about the arm y axis

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "orientation", np.asarray(self.orientation, dtype=float))
        if self.position.shape != (3,):
            raise ConfigurationError("rotor position must be a 3-vector")
        R = self.orientation
        if R.shape != (3, 3):
            raise ConfigurationError("rotor orientation must be a 3x3 matrix")
        if np.linalg.norm(R.T @ R - np.eye(3)) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ConfigurationError("rotor orientation is not a proper rotation")
        if self.spin_sign not in (-1, 1):
            raise ConfigurationError("spin_sign must be -1 or +1")
        if self.tilt_sign not in (-1, 1):
            raise ConfigurationError("tilt_sign must be -1 or +1")

    def thrust_axis(self, alpha=None):
        """Thrust direction R_j(alpha) e3 in body axes."""
        if not self.tiltable or alpha is None:
            return self.orientation @ E3
        R = rot_z(self.arm_angle) @ rot_x(self.tilt_sign * alpha) @ rot_y(self.beta)
        return R @ E3


@dataclass(frozen=True)
class VehicleModel:
    """Rigid-body and thrust-generation parameters of one multi-rotor."""

    mass: float                 # [kg]
    inertia: np.ndarray         # [kg m^2], 3x3
    rotors: tuple
    c_f: float                  # thrust coefficient [N/Hz^2]
    c_f_tau: float              # drag-to-thrust ratio [m]
    gravity: float = 9.81       # [m/s^2]
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "inertia", np.asarray(self.inertia, dtype=float))
        object.__setattr__(self, "rotors", tuple(self.rotors))
        if self.mass <= 0.0:
            raise ConfigurationError("mass must be positive")
        if self.c_f <= 0.0 or self.c_f_tau <= 0.0:
            raise ConfigurationError("c_f and c_f_tau must be positive")
        if len(self.rotors) < 1:
            raise ConfigurationError("at least one rotor is required")
        J = self.inertia
        if J.shape != (3, 3) or np.linalg.norm(J - J.T) > 1e-12:
            raise ConfigurationError("inertia must be a symmetric 3x3 matrix")
        if np.any(np.linalg.eigvalsh(J) <= 0.0):
            raise ConfigurationError("inertia must be positive-definite")

    @property
    def n_rotors(self):
        return len(self.rotors)

    @property
    def tiltable(self):
        return any(r.tiltable for r in self.rotors)

    @cached_property
    def inertia_inv(self):
        return np.linalg.inv(self.inertia)

    @cached_property
    def _fixed_allocation(self):
        return self._allocation_at(None)

    def _allocation_at(self, alpha):
        cols = []
        for r in self.rotors:
            axis = r.thrust_axis(alpha)
            lever = skew(r.position) + r.spin_sign * self.c_f_tau * np.eye(3)
            cols.append(np.concatenate([axis, lever @ axis]))
        return np.array(cols).T

    def allocation_matrix(self, tilt=None):
        """6 x n allocation matrix; ``tilt`` is required iff the vehicle tilts."""
        if self.tiltable:
            if tilt is None:
                raise ConfigurationError("tiltable vehicle requires a tilt angle")
            return self._allocation_at(float(tilt))
        if tilt is not None:
            raise ConfigurationError("tilt angle given for a fixed-rotor vehicle")
        return self._fixed_allocation.copy()

    def allocation_matrix_dalpha(self, tilt):
        """Derivative of the allocation matrix w.r.t. the tilt angle."""
        if not self.tiltable:
            return np.zeros((6, self.n_rotors))
        a = float(tilt)
        cols = []
        for r in self.rotors:
            if not r.tiltable:
                cols.append(np.zeros(6))
                continue
            s = r.tilt_sign
            dRx = s * skew(np.array([1.0, 0.0, 0.0])) @ rot_x(s * a)
            daxis = rot_z(r.arm_angle) @ dRx @ rot_y(r.beta) @ E3
            lever = skew(r.position) + r.spin_sign * self.c_f_tau * np.eye(3)
            cols.append(np.concatenate([daxis, lever @ daxis]))
        return np.array(cols).T

    def body_wrench(self, forces, tilt=None):
        """Total body force/torque G @ gamma for thrust intensities gamma."""
        forces = np.asarray(forces, dtype=float)
        if forces.shape != (self.n_rotors,):
            raise ValueError(
                f"expected {self.n_rotors} rotor forces, got shape {forces.shape}"
            )
        return self.allocation_matrix(tilt) @ forces

    def hover_forces(self, tilt=None):
        """Least-squares thrust intensities balancing gravity at level attitude."""
        wrench = np.array([0.0, 0.0, self.mass * self.gravity, 0.0, 0.0, 0.0])
        G = self.allocation_matrix(tilt)
        return np.linalg.pinv(G) @ wrench

    # Batched allocation products used by the vectorized dynamics.  For a
    # fixed-geometry vehicle these reduce to one precomputed matrix.

    @cached_property
    def _tilt_arrays(self):
        # Tiltable rotors decompose as Rz(arm) Rx(s alpha) Ry(beta); rotors
        # with a fixed tilt keep their stored orientation (sign 0 reduces the
        # decomposition to orientation @ e3).
        rz = np.stack(
            [rot_z(r.arm_angle) if r.tiltable else r.orientation for r in self.rotors]
        )
        lever = np.stack(
            [skew(r.position) + r.spin_sign * self.c_f_tau * np.eye(3) for r in self.rotors]
        )
        signs = np.array([r.tilt_sign if r.tiltable else 0 for r in self.rotors], dtype=float)
        cb = np.array([np.cos(r.beta) if r.tiltable else 1.0 for r in self.rotors])
        sb = np.array([np.sin(r.beta) if r.tiltable else 0.0 for r in self.rotors])
        return rz, lever, signs, cb, sb

    @cached_property
    def kernel_arrays(self):
        """Contiguous parameter pack consumed by the compiled integrators."""
        rz, lever, signs, cb, sb = self._tilt_arrays
        if self.tiltable:
            gfix = np.zeros((6, self.n_rotors))
        else:
            gfix = self._fixed_allocation
        return (
            float(self.mass),
            float(self.gravity),
            np.ascontiguousarray(self.inertia),
            np.ascontiguousarray(self.inertia_inv),
            np.ascontiguousarray(gfix),
            bool(self.tiltable),
            np.ascontiguousarray(rz),
            np.ascontiguousarray(lever),
            np.ascontiguousarray(signs),
            np.ascontiguousarray(cb),
            np.ascontiguousarray(sb),
            self.n_rotors,
        )

    def allocation_batch(self, alpha):
        """Allocation matrices (B, 6, n) for a batch of tilt angles (B,)."""
        rz, lever, signs, cb, sb = self._tilt_arrays
        alpha = np.asarray(alpha, dtype=float)
        sa = np.sin(signs * alpha[:, None])
        ca = np.cos(signs * alpha[:, None])
        # Rx(s a) Ry(b) e3 = [sin b, -sin(s a) cos b, cos(s a) cos b]
        local = np.stack(
            [np.broadcast_to(sb, sa.shape), -sa * cb, ca * cb], axis=-1
        )
        axis = np.einsum("nij,bnj->bni", rz, local)
        torque = np.einsum("nij,bnj->bni", lever, axis)
        return np.concatenate([axis, torque], axis=-1).transpose(0, 2, 1)

    def allocation_batch_dalpha(self, alpha):
        """Tilt derivative of the batched allocation matrices."""
        rz, lever, signs, cb, sb = self._tilt_arrays
        alpha = np.asarray(alpha, dtype=float)
        sa = np.sin(signs * alpha[:, None])
        ca = np.cos(signs * alpha[:, None])
        zero = np.zeros_like(sa)
        dlocal = np.stack([zero, -signs * ca * cb, -signs * sa * cb], axis=-1)
        daxis = np.einsum("nij,bnj->bni", rz, dlocal)
        dtorque = np.einsum("nij,bnj->bni", lever, daxis)
        return np.concatenate([daxis, dtorque], axis=-1).transpose(0, 2, 1)


def _build_rotor(index, arm_angle, arm_length, alpha, beta, spin_sign,
                 tiltable=False, tilt_sign=1, position=None):
    arm = rot_z(arm_angle)
    if position is None:
        position = arm @ np.array([arm_length, 0.0, 0.0])
    orientation = arm @ rot_x(alpha) @ rot_y(beta)
    return RotorGeometry(
        position=position,
        orientation=orientation,
        spin_sign=spin_sign,
        tiltable=tiltable,
        tilt_sign=tilt_sign,
        arm_angle=arm_angle,
        beta=beta,
    )


def quadrotor():
    """Collinear-rotor quadrotor (under-actuated, unidirectional thrust)."""
    rotors = [
        _build_rotor(
            i,
            arm_angle=i * np.pi / 2.0,
            arm_length=0.23,
            alpha=0.0,
            beta=0.0,
            spin_sign=(-1) ** i,  # c_i = (-1)^(i-1) with 1-based numbering
        )
        for i in range(4)
    ]
    return VehicleModel(
        mass=1.042,
        inertia=np.diag([0.015, 0.015, 0.015]),
        rotors=rotors,
        c_f=5.95e-4,
        c_f_tau=1.69e-2,
        name="quadrotor",
    )


def tilt_hex():
    """Fully-actuated hexarotor with alternately tilted rotors."""
    rotors = [
        _build_rotor(
            i,
            arm_angle=i * np.pi / 3.0,
            arm_length=0.368,
            alpha=(-1) ** (i + 1) * np.deg2rad(35.0),  # alpha_i = (-1)^i 35 deg
            beta=np.deg2rad(-25.0),
            spin_sign=(-1) ** i,
        )
        for i in range(6)
    ]
    return VehicleModel(
        mass=1.86,
        inertia=np.diag([0.11, 0.11, 0.19]),
        rotors=rotors,
        c_f=9.9e-4,
        c_f_tau=1.9e-2,
        name="tilt_hex",
    )


def fast_hex():
    """Hexarotor with synchronously tiltable rotors (tilt angle is a state)."""
    rotors = [
        _build_rotor(
            i,
            arm_angle=i * np.pi / 3.0,
            arm_length=0.315,
            alpha=0.0,
            beta=0.0,
            spin_sign=(-1) ** (i + 1),  # c_i = (-1)^i with 1-based numbering
            tiltable=True,
            tilt_sign=(-1) ** i,  # alpha_i alternates sign around the ring
        )
        for i in range(6)
    ]
    return VehicleModel(
        mass=2.4,
        inertia=np.diag([0.042, 0.042, 0.083]),
        rotors=rotors,
        c_f=9.9e-4,
        c_f_tau=1.9e-2,
        name="fast_hex",
    )


def tilt_hex_failed(beta_deg=-25.0):
    """Tilt-Hex with rotor 6 removed (pentarotor after a rotor failure)."""
    base = np.deg2rad(beta_deg)
    rotors = [
        _build_rotor(
            i,
            arm_angle=i * np.pi / 3.0,
            arm_length=0.368,
            alpha=(-1) ** (i + 1) * np.deg2rad(35.0),
            beta=base,
            spin_sign=(-1) ** i,
        )
        for i in range(5)
    ]
    return VehicleModel(
        mass=1.86,
        inertia=np.diag([0.11, 0.11, 0.19]),
        rotors=rotors,
        c_f=9.9e-4,
        c_f_tau=1.9e-2,
        name=f"tilt_hex_failed_beta{beta_deg:g}",
    )


_FACTORIES = {
    "quadrotor": quadrotor,
    "tilt_hex": tilt_hex,
    "fast_hex": fast_hex,
    "tilt_hex_failed": tilt_hex_failed,
}


def vehicle_from_dict(cfg):
    """Build a VehicleModel from a parsed preset dictionary."""
    rotors = []
    for i, r in enumerate(cfg["rotors"]):
        tiltable = bool(r.get("tiltable", False))
        alpha = np.deg2rad(float(r.get("alpha_deg", 0.0)))
        if tiltable and alpha != 0.0:
            raise ConfigurationError(
                "tiltable rotors take their tilt from the state; alpha_deg must be 0"
            )
        rotors.append(
            _build_rotor(
                i,
                arm_angle=np.deg2rad(float(r.get("arm_angle_deg", 0.0))),
                arm_length=0.0,
                alpha=alpha,
                beta=np.deg2rad(float(r.get("beta_deg", 0.0))),
                spin_sign=int(r["spin_sign"]),
                tiltable=tiltable,
                tilt_sign=int(r.get("tilt_sign", 1)),
                position=np.asarray(r["position"], dtype=float),
            )
        )
    inertia = np.asarray(cfg["inertia"], dtype=float).reshape(3, 3)
    return VehicleModel(
        mass=float(cfg["mass"]),
        inertia=inertia,
        rotors=rotors,
        c_f=float(cfg["c_f"]),
        c_f_tau=float(cfg["c_f_tau"]),
        gravity=float(cfg.get("gravity", 9.81)),
        name=str(cfg.get("name", "")),
    )


def load_vehicle(source):
    """Load a vehicle preset by name, file path, or parsed dictionary."""
    if isinstance(source, dict):
        return vehicle_from_dict(source)
    name = str(source)
    if name in _FACTORIES:
        path = _PRESET_DIR / f"{name}.yaml"
    else:
        path = Path(name)
    if not path.exists():
        raise FileNotFoundError(f"no vehicle preset or file named {source!r}")
    with open(path) as fh:
        return vehicle_from_dict(yaml.safe_load(fh))


def vehicle_preset_names():
    return sorted(_FACTORIES)
