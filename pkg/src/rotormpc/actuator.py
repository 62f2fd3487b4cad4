"""Thrust generation map and data-driven actuator limits.

A rotor produces thrust ``f = c_f w^2`` from its spinning rate ``w`` [Hz].
The admissible rates live in ``[w_lo, w_hi]``; the admissible rotor
accelerations depend on the current rate and are stored as a table
identified from test-bench data (see :mod:`rotormpc.identification`).
Both get translated into force-space constraints for the controller:

    f in [c_f w_lo^2, c_f w_hi^2]
    f_dot = 2 c_f w w_dot  ->  f_dot in rho * 2 c_f w * [w_dot_lo(w), w_dot_hi(w)]

The acceleration table is interpolated linearly between grid points and
clamped flat outside them.  Deceleration and acceleration limits are kept
asymmetric exactly as identified.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

log = logging.getLogger(__name__)

_PRESET_DIR = Path(__file__).parent / "data" / "actuators"


@dataclass(frozen=True)
class AccelLimitTable:
    """Rotor acceleration limits [Hz/s] on a grid of spinning rates [Hz]."""

    speeds: np.ndarray
    accel_lo: np.ndarray
    accel_hi: np.ndarray

    def __post_init__(self):
        for name in ("speeds", "accel_lo", "accel_hi"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not (len(self.speeds) == len(self.accel_lo) == len(self.accel_hi)):
            raise ValueError("table columns must have equal length")
        if len(self.speeds) < 2:
            raise ValueError("table needs at least two grid points")
        if np.any(np.diff(self.speeds) <= 0.0):
            raise ValueError("speed grid must be strictly increasing")
        if np.any(self.accel_lo >= 0.0) or np.any(self.accel_hi <= 0.0):
            raise ValueError("acceleration limits must satisfy lo < 0 < hi")

    def interpolate(self, w):
        """(accel_lo, accel_hi) at rate(s) ``w``, clamped beyond the grid."""
        w = np.asarray(w, dtype=float)
        lo = np.interp(w, self.speeds, self.accel_lo)
        hi = np.interp(w, self.speeds, self.accel_hi)
        return lo, hi

    def as_dict(self):
        return {
            "speeds_hz": [float(v) for v in self.speeds],
            "accel_lo_hzps": [float(v) for v in self.accel_lo],
            "accel_hi_hzps": [float(v) for v in self.accel_hi],
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            speeds=data["speeds_hz"],
            accel_lo=data["accel_lo_hzps"],
            accel_hi=data["accel_hi_hzps"],
        )


@dataclass(frozen=True)
class ActuatorModel:
    """Thrust coefficient plus rate and acceleration limits of one rotor set."""

    c_f: float                  # [N/Hz^2]
    speed_lo: float             # [Hz]
    speed_hi: float             # [Hz]
    accel_table: AccelLimitTable
    rate_scale: float = 1.0     # rho, uniform scaling of the rate bounds
    # Rate below which the force-rate bounds are evaluated as if the rotor
    # were still spinning at this speed.  f_dot = 2 c_f w w_dot collapses to
    # zero at w = 0, which would freeze a fully stopped rotor; the floor
    # keeps the bounds strictly signed (only reachable when speed_lo = 0,
    # i.e. in the rotor-failure configuration).
    rate_floor: float = 1.0     # [Hz]
    name: str = ""

    def __post_init__(self):
        if self.c_f <= 0.0:
            raise ValueError("c_f must be positive")
        if not (0.0 <= self.speed_lo < self.speed_hi):
            raise ValueError("need 0 <= speed_lo < speed_hi")
        if self.rate_scale <= 0.0:
            raise ValueError("rate_scale must be positive")
        if self.rate_floor <= 0.0:
            raise ValueError("rate_floor must be positive")

    def thrust_from_speed(self, w):
        """Quadratic thrust map f = c_f w^2."""
        w = np.asarray(w, dtype=float)
        if np.any(w < 0.0):
            raise ValueError("spinning rate must be non-negative")
        return self.c_f * w**2

    def speed_from_thrust(self, f):
        """Inverse thrust map w = sqrt(f / c_f)."""
        f = np.asarray(f, dtype=float)
        if np.any(f < 0.0):
            raise ValueError("thrust must be non-negative")
        return np.sqrt(f / self.c_f)

    def force_bounds(self):
        """Admissible thrust interval implied by the speed limits."""
        return (
            float(self.c_f * self.speed_lo**2),
            float(self.c_f * self.speed_hi**2),
        )

    def force_rate_bounds(self, f):
        """State-dependent thrust-rate bounds at thrust level(s) ``f``.

        Values outside the admissible thrust box are clamped (and logged):
        in closed loop, measurement noise can push a thrust marginally past
        its bound and the controller still needs usable input limits.
        """
        f = np.asarray(f, dtype=float)
        f_lo, f_hi = self.force_bounds()
        if np.any(f < f_lo - 1e-9) or np.any(f > f_hi + 1e-9):
            log.warning(
                "thrust outside [%.3f, %.3f] N clamped for rate-bound lookup", f_lo, f_hi
            )
        f = np.clip(f, f_lo, f_hi)
        w = np.sqrt(f / self.c_f)
        acc_lo, acc_hi = self.accel_table.interpolate(w)
        w_eff = np.maximum(w, self.rate_floor)
        scale = self.rate_scale * 2.0 * self.c_f * w_eff
        return scale * acc_lo, scale * acc_hi

    def as_dict(self):
        data = {
            "c_f": float(self.c_f),
            "speed_lo_hz": float(self.speed_lo),
            "speed_hi_hz": float(self.speed_hi),
            "rate_scale": float(self.rate_scale),
            "rate_floor_hz": float(self.rate_floor),
            "accel_table": self.accel_table.as_dict(),
        }
        if self.name:
            data["name"] = self.name
        return data


# Acceleration limits identified on the hexarotor rotor test bench
# (MK3638 motor, 12x4.5" propeller).  Deceleration is consistently the
# weaker direction.
SETUP_I_TABLE = AccelLimitTable(
    speeds=[30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0],
    accel_lo=[-120.0, -160.0, -200.0, -140.0, -160.0, -160.0, -140.0],
    accel_hi=[200.0, 200.0, 200.0, 160.0, 180.0, 180.0, 180.0],
)


def setup_i():
    """Hexarotor rotor set (MK3638 + 12x4.5" propeller, closed-loop ESC)."""
    return ActuatorModel(
        c_f=9.9e-4,
        speed_lo=16.0,
        speed_hi=102.0,
        accel_table=SETUP_I_TABLE,
        name="setup_i",
    )


def setup_ii():
    """Quadrotor rotor set (MK2832/35 + 10x4.5" propeller).

    Same ESC and low-level speed controller as the hexarotor set, so the
    speed envelope and Hz/s acceleration table carry over; only the thrust
    coefficient differs.
    """
    return ActuatorModel(
        c_f=5.95e-4,
        speed_lo=16.0,
        speed_hi=102.0,
        accel_table=SETUP_I_TABLE,
        name="setup_ii",
    )


def failed_rotor(base=None):
    """Variant that lets the controller switch rotors completely off."""
    base = base or setup_i()
    return ActuatorModel(
        c_f=base.c_f,
        speed_lo=0.0,
        speed_hi=base.speed_hi,
        accel_table=base.accel_table,
        rate_scale=base.rate_scale,
        rate_floor=base.rate_floor,
        name=(base.name + "_failed") if base.name else "failed",
    )


_FACTORIES = {
    "setup_i": setup_i,
    "setup_ii": setup_ii,
    "setup_i_failed": lambda: failed_rotor(setup_i()),
}


def actuator_from_dict(cfg):
    return ActuatorModel(
        c_f=float(cfg["c_f"]),
        speed_lo=float(cfg["speed_lo_hz"]),
        speed_hi=float(cfg["speed_hi_hz"]),
        accel_table=AccelLimitTable.from_dict(cfg["accel_table"]),
        rate_scale=float(cfg.get("rate_scale", 1.0)),
        rate_floor=float(cfg.get("rate_floor_hz", 1.0)),
        name=str(cfg.get("name", "")),
    )


def load_actuator(source):
    """Load an actuator preset by name, file path, or parsed dictionary."""
    if isinstance(source, dict):
        return actuator_from_dict(source)
    name = str(source)
    if name in _FACTORIES:
        path = _PRESET_DIR / f"{name}.yaml"
        if not path.exists():
            return _FACTORIES[name]()
    else:
        path = Path(name)
    if not path.exists():
        raise FileNotFoundError(f"no actuator preset or file named {source!r}")
    with open(path) as fh:
        return actuator_from_dict(yaml.safe_load(fh))


def save_actuator(model, path):
    with open(path, "w") as fh:
        yaml.safe_dump(model.as_dict(), fh, sort_keys=False)


def actuator_preset_names():
    return sorted(_FACTORIES)
