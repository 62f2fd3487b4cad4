"""Deterministic closed-loop simulation of the predictive controller.

The loop runs at the control period ``t_ctrl`` (default 5 ms) against a
prediction grid of ``N`` intervals of length ``T`` (default 0.1 s): every
control step measures the plant (true state plus filtered sensor noise;
thrusts through the speed round-trip), assembles the OCP with frozen
input bounds, performs one RTI step, and holds the returned input while
the plant integrates at ``dt_plant`` (default 1 ms) under the disturbance
wrench.

Runs are reproducible: a fixed seed yields bitwise-identical trajectories
(solver wall times are the one genuinely non-deterministic column in the
log).  Enforcing a solve deadline makes the control path depend on wall
time and is therefore off by default.
"""

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import dynamics as dyn
from .actuator import load_actuator
from .geometry import PITCH_MARGIN
from .ocp import TILT_LIMIT, TILT_RATE_LIMIT, Weights, assemble
from .reference import (
    chirp_reference,
    hover_energy_reference,
    hover_reference,
    step_reference,
)
from .rti import MultirotorPrediction, RtiSolver
from .vehicle import load_vehicle

log = logging.getLogger(__name__)

_SCENARIO_DIR = Path(__file__).parent / "data" / "scenarios"


class DivergenceError(RuntimeError):
    pass


@dataclass
class NoiseSpec:
    """Filtered measurement noise (first-order low pass on white noise)."""

    sigma_p: np.ndarray = field(default_factory=lambda: np.zeros(3))      # [m]
    sigma_v: np.ndarray = field(default_factory=lambda: np.zeros(3))      # [m/s]
    sigma_eta: np.ndarray = field(default_factory=lambda: np.zeros(3))    # [rad]
    sigma_omega: np.ndarray = field(default_factory=lambda: np.zeros(3))  # [rad/s]
    cutoff: float = 25.0                                                  # [rad/s]
    seed: int = 0

    def __post_init__(self):
        for name in ("sigma_p", "sigma_v", "sigma_eta", "sigma_omega"):
            value = np.asarray(getattr(self, name), dtype=float)
            if np.any(value < 0.0):
                raise ValueError("noise sigmas must be non-negative")
            setattr(self, name, value)
        if self.cutoff <= 0.0:
            raise ValueError("filter cutoff must be positive")

    def sigmas(self):
        return np.concatenate([self.sigma_p, self.sigma_v, self.sigma_eta, self.sigma_omega])


def filter_white_noise(spec, white, dt):
    """Shape standard-normal draws (nt, 12) into stationary filtered noise.

    Per channel: y_k = a y_{k-1} + (1 - a) w_k with a = exp(-cutoff dt),
    scaled so the stationary standard deviation matches the spec; y_0 is
    drawn from the stationary distribution (first row of ``white``).
    """
    white = np.atleast_2d(np.asarray(white, dtype=float))
    a = np.exp(-spec.cutoff * dt)
    sig = spec.sigmas()
    w_scale = sig * np.sqrt((1.0 + a) / (1.0 - a))
    out = np.empty_like(white)
    out[0] = white[0] * sig
    for k in range(1, white.shape[0]):
        out[k] = a * out[k - 1] + (1.0 - a) * w_scale * white[k]
    return out


class NoiseGenerator:
    """Streaming version of :func:`filter_white_noise` with its own RNG."""

    def __init__(self, spec, dt):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        self.a = np.exp(-spec.cutoff * dt)
        self.sig = spec.sigmas()
        self.w_scale = self.sig * np.sqrt((1.0 + self.a) / (1.0 - self.a))
        self.state = self.rng.standard_normal(12) * self.sig

    def step(self):
        w = self.rng.standard_normal(12)
        self.state = self.a * self.state + (1.0 - self.a) * self.w_scale * w
        return self.state.copy()


@dataclass
class Disturbance:
    """Exogenous wrench acting on the plant (unknown to the controller)."""

    kind: str = "none"    # none | triangular_force | constant_body_torque
    direction: np.ndarray = field(default_factory=lambda: np.zeros(3))
    peak: float = 0.0     # [N]
    t1: float = 0.0       # force ramp start [s]
    t2: float = 0.0       # force peak instant [s]
    torque: np.ndarray = field(default_factory=lambda: np.zeros(3))  # [N m]
    activation_time: float = 0.0

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=float)
        self.torque = np.asarray(self.torque, dtype=float)
        if self.kind not in ("none", "triangular_force", "constant_body_torque"):
            raise ValueError(f"unknown disturbance kind {self.kind!r}")
        if self.peak < 0.0:
            raise ValueError("peak must be non-negative")
        if self.kind == "triangular_force" and not self.t1 < self.t2:
            raise ValueError("need t1 < t2 for the triangular force")

    def wrench(self, t):
        """(world-frame force, body-frame torque) at time ``t``."""
        force = np.zeros(3)
        torque = np.zeros(3)
        if self.kind == "triangular_force":
            rise = self.t2 - self.t1
            if self.t1 <= t < self.t2:
                force = self.direction * (self.peak * (t - self.t1) / rise)
            elif self.t2 <= t < self.t2 + rise:
                force = self.direction * (self.peak * (1.0 - (t - self.t2) / rise))
        elif self.kind == "constant_body_torque" and t >= self.activation_time:
            torque = self.torque.copy()
        return force, torque


def plant_step(model, x, u, dt, substeps=1, f_dist=None, tau_dist=None):
    """Ground-truth propagation: RK4 with the disturbance on the RHS."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    return dyn.rk4_batch(
        model, x[None, :], u[None, :], dt, substeps, f_dist=f_dist, tau_dist=tau_dist
    )[0]


def worst_case_torque(model, off_rotor_index, scale):
    """Torque direction a rotor-failed platform cannot statically reject.

    With the failed rotor removed from ``model`` and its mirrored partner
    ``off_rotor_index`` switched off, the remaining torque columns span a
    plane (tilt-around-arm angle beta = 0).  The returned torque is the
    plane normal, sign-aligned with the off rotor's own torque direction
    so that even re-engaging that rotor cannot cancel it, scaled by
    ``scale``.
    """
    G2 = model.allocation_matrix()[3:, :]
    keep = [j for j in range(model.n_rotors) if j != off_rotor_index]
    reduced = G2[:, keep]
    U, s, _ = np.linalg.svd(reduced)
    rank = int(np.sum(s > s[0] * 1e-9))
    if rank != 2:
        raise ValueError(
            f"reduced torque block has rank {rank}, not 2; the worst-case "
            "direction is undefined -- supply the disturbance torque explicitly"
        )
    v3 = np.cross(U[:, 0], U[:, 1])
    tau_off = G2[:, off_rotor_index]
    sign = np.sign(v3 @ tau_off)
    if sign != 0.0:
        v3 = sign * v3
    return scale * v3


@dataclass
class SimLog:
    """Uniformly sampled record of one closed-loop run."""

    model_name: str
    n_rotors: int
    tiltable: bool
    include_energy: bool
    horizon: int
    step: float
    t_ctrl: float
    t: np.ndarray = None              # (K,)
    reference: np.ndarray = None      # (K, ny)
    state: np.ndarray = None          # (K, nx) true plant state
    measured: np.ndarray = None       # (K, 12) noisy pose/twist measurement
    input: np.ndarray = None          # (K, nu) applied input
    force_lo: np.ndarray = None       # (K,)
    force_hi: np.ndarray = None       # (K,)
    rate_lo: np.ndarray = None        # (K, n) frozen input bounds
    rate_hi: np.ndarray = None        # (K, n)
    rho: np.ndarray = None            # (K,)
    disturbance: np.ndarray = None    # (K, 6) world force + body torque
    cost_tracking: np.ndarray = None  # (K,)
    cost_energy: np.ndarray = None    # (K,)
    solve_time: np.ndarray = None     # (K,) [s]
    qp_iterations: np.ndarray = None  # (K,)
    active_set_size: np.ndarray = None
    slack_max: np.ndarray = None
    status: list = None               # (K,) solved | backup_used
    timing_ok: np.ndarray = None      # (K,) bool, t_solv <= T_ctrl
    diverged: bool = False

    @property
    def rows(self):
        return len(self.t)

    def column_names(self):
        n = self.n_rotors
        names = ["t"]
        names += [f"ref_{c}" for c in _output_names(self.include_energy)]
        names += [f"{c}" for c in _state_names(n, self.tiltable)]
        names += [f"meas_{c}" for c in _state_names(0, False)[:12]]
        names += [f"u_{i+1}" for i in range(n)]
        if self.tiltable:
            names += ["u_tilt"]
        names += ["force_lo", "force_hi"]
        names += [f"du_lo_{i+1}" for i in range(n)]
        names += [f"du_hi_{i+1}" for i in range(n)]
        names += ["rho", "dist_fx", "dist_fy", "dist_fz", "dist_tx", "dist_ty", "dist_tz"]
        names += ["cost_tracking", "cost_energy", "solve_time_s", "qp_iters",
                  "active_set_size", "slack_max", "status", "timing_ok"]
        return names

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.column_names())
            for k in range(self.rows):
                row = [_fmt(self.t[k])]
                row += [_fmt(v) for v in self.reference[k]]
                row += [_fmt(v) for v in self.state[k]]
                row += [_fmt(v) for v in self.measured[k]]
                row += [_fmt(v) for v in self.input[k]]
                row += [_fmt(self.force_lo[k]), _fmt(self.force_hi[k])]
                row += [_fmt(v) for v in self.rate_lo[k]]
                row += [_fmt(v) for v in self.rate_hi[k]]
                row += [_fmt(self.rho[k])]
                row += [_fmt(v) for v in self.disturbance[k]]
                row += [
                    _fmt(self.cost_tracking[k]),
                    _fmt(self.cost_energy[k]),
                    _fmt(self.solve_time[k]),
                    str(int(self.qp_iterations[k])),
                    str(int(self.active_set_size[k])),
                    _fmt(self.slack_max[k]),
                    self.status[k],
                    "1" if self.timing_ok[k] else "0",
                ]
                writer.writerow(row)

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            raw = list(reader)
        if not raw:
            raise ValueError(f"{path} holds no data rows")
        col = {name: i for i, name in enumerate(header)}
        n = sum(1 for name in header if name.startswith("u_") and name != "u_tilt")
        tiltable = "u_tilt" in col
        include_energy = "ref_ce" in col
        ny = 19 if include_energy else 18
        nx = 12 + n + (1 if tiltable else 0)
        nu = n + (1 if tiltable else 0)
        K = len(raw)

        def grab(names):
            idx = [col[name] for name in names]
            return np.array([[float(row[i]) for i in idx] for row in raw])

        out = cls(
            model_name="", n_rotors=n, tiltable=tiltable,
            include_energy=include_energy, horizon=0, step=0.0, t_ctrl=0.0,
        )
        ref_names = [f"ref_{c}" for c in _output_names(include_energy)]
        state_names = _state_names(n, tiltable)
        out.t = grab(["t"])[:, 0]
        if K > 1:
            out.t_ctrl = float(out.t[1] - out.t[0])
        out.reference = grab(ref_names)
        out.state = grab(state_names)
        out.measured = grab([f"meas_{c}" for c in _state_names(0, False)[:12]])
        u_names = [f"u_{i+1}" for i in range(n)] + (["u_tilt"] if tiltable else [])
        out.input = grab(u_names)
        out.force_lo = grab(["force_lo"])[:, 0]
        out.force_hi = grab(["force_hi"])[:, 0]
        out.rate_lo = grab([f"du_lo_{i+1}" for i in range(n)])
        out.rate_hi = grab([f"du_hi_{i+1}" for i in range(n)])
        out.rho = grab(["rho"])[:, 0]
        out.disturbance = grab(["dist_fx", "dist_fy", "dist_fz", "dist_tx", "dist_ty", "dist_tz"])
        out.cost_tracking = grab(["cost_tracking"])[:, 0]
        out.cost_energy = grab(["cost_energy"])[:, 0]
        out.solve_time = grab(["solve_time_s"])[:, 0]
        out.qp_iterations = grab(["qp_iters"])[:, 0].astype(int)
        out.active_set_size = grab(["active_set_size"])[:, 0].astype(int)
        out.slack_max = grab(["slack_max"])[:, 0]
        out.status = [row[col["status"]] for row in raw]
        out.timing_ok = grab(["timing_ok"])[:, 0].astype(bool)
        return out


def _fmt(v):
    return format(float(v), ".17g")


def _output_names(include_energy):
    names = []
    for prefix in ("p_ref", "v_ref", "a_ref", "eta_ref", "om_ref", "omdot_ref"):
        names += [f"{prefix}_{ax}" for ax in "xyz"]
    names = [n.replace("_ref", "") for n in names]
    if include_energy:
        names.append("ce")
    return names


def _state_names(n, tiltable):
    names = [f"p_{ax}" for ax in "xyz"] + [f"v_{ax}" for ax in "xyz"]
    names += ["eta_roll", "eta_pitch", "eta_yaw"]
    names += [f"om_{ax}" for ax in "xyz"]
    names += [f"f_{i+1}" for i in range(n)]
    if tiltable:
        names.append("alpha")
    return names


@dataclass
class ScenarioConfig:
    """Everything needed to reproduce one closed-loop run."""

    vehicle: object
    actuator: object
    weights: Weights
    reference: object
    duration: float
    name: str = "scenario"
    horizon: int = 10
    step: float = 0.1
    t_ctrl: float = 0.005
    dt_plant: float = 0.001
    substeps: int = 5
    rho: float = 1.0
    rho_ramp: Optional[dict] = None    # {start, step, stop, period}
    noise: Optional[NoiseSpec] = None
    disturbance: Disturbance = field(default_factory=Disturbance)
    seed: int = 0
    tightening: float = 0.98
    slack_penalty: float = 1e4
    levenberg: float = 1e-8
    qp_max_iter: int = 200
    deadline: Optional[float] = None
    abort_radius: float = 5.0
    initial_position: Optional[np.ndarray] = None
    initial_euler: Optional[np.ndarray] = None
    initial_tilt: float = 0.0
    fixed_tilt: Optional[float] = None  # lock the tilt servo at this angle

    def __post_init__(self):
        if self.duration <= 0.0:
            raise ValueError("duration must be positive")
        if not self.dt_plant <= self.t_ctrl:
            raise ValueError("need dt_plant <= t_ctrl")
        if not self.t_ctrl <= self.step <= self.horizon * self.step:
            raise ValueError("timing chain requires t_ctrl <= T <= t_H")

    def rho_at(self, t):
        if self.rho_ramp is None:
            return self.rho
        ramp = self.rho_ramp
        k = int(np.floor(t / ramp["period"]))
        return min(ramp["start"] + k * ramp["step"], ramp["stop"])


def load_scenario(source):
    """Load a scenario by shipped name, file path, or parsed dictionary."""
    if isinstance(source, dict):
        return scenario_from_dict(source)
    path = Path(str(source))
    if not path.exists():
        candidate = _SCENARIO_DIR / f"{source}.yaml"
        if candidate.exists():
            path = candidate
        else:
            raise FileNotFoundError(f"no scenario preset or file named {source!r}")
    with open(path) as fh:
        return scenario_from_dict(yaml.safe_load(fh))


def scenario_names():
    return sorted(p.stem for p in _SCENARIO_DIR.glob("*.yaml"))


def scenario_from_dict(cfg):
    model = load_vehicle(cfg["vehicle"])
    actuator = load_actuator(cfg["actuator"])
    if abs(actuator.c_f - model.c_f) > 1e-12 * max(actuator.c_f, model.c_f):
        raise ValueError(
            "vehicle and actuator disagree on the thrust coefficient "
            f"({model.c_f} vs {actuator.c_f})"
        )

    wcfg = dict(cfg.get("weights", {}))
    weights = Weights(
        q_p=wcfg.get("q_p", 0.0),
        q_v=wcfg.get("q_v", 0.0),
        q_eta=wcfg.get("q_eta", 0.0),
        q_omega=wcfg.get("q_omega", 0.0),
        q_acc=wcfg.get("q_acc", 0.0),
        q_angacc=wcfg.get("q_angacc", 0.0),
        q_energy=float(wcfg.get("q_energy", 0.0)),
        slack_penalty=float(wcfg.get("slack_penalty", cfg.get("slack_penalty", 1e4))),
    )

    rcfg = dict(cfg["reference"])
    kind = rcfg.pop("type")
    if kind == "chirp":
        axis = {"x": 0, "y": 1, "z": 2}.get(rcfg.get("axis", "x"), rcfg.get("axis", 0))
        reference = chirp_reference(
            rcfg["amplitude_m"], rcfg["slope_rad_s2"], rcfg["t_bar_s"],
            axis=axis, origin=rcfg.get("origin_m"),
        )
    elif kind == "step":
        reference = step_reference(rcfg["p1_m"], rcfg["p2_m"], rcfg["period_s"])
    elif kind == "hover":
        energy_ref = rcfg.get("energy_reference", 0.0)
        if energy_ref == "level_hover":
            energy_ref = hover_energy_reference(model)
        euler = np.deg2rad(rcfg.get("euler_deg", [0.0, 0.0, 0.0]))
        reference = hover_reference(rcfg["position_m"], euler, float(energy_ref))
    else:
        raise ValueError(f"unknown reference type {kind!r}")

    noise = None
    if "noise" in cfg and cfg["noise"]:
        ncfg = cfg["noise"]
        noise = NoiseSpec(
            sigma_p=ncfg.get("sigma_p_m", 0.0),
            sigma_v=ncfg.get("sigma_v_mps", 0.0),
            sigma_eta=np.deg2rad(ncfg.get("sigma_eta_deg", np.zeros(3))),
            sigma_omega=np.deg2rad(ncfg.get("sigma_omega_dps", np.zeros(3))),
            cutoff=float(ncfg.get("cutoff_rad_s", 25.0)),
            seed=int(cfg.get("seed", 0)),
        )

    dist = Disturbance()
    if "disturbance" in cfg and cfg["disturbance"]:
        dcfg = dict(cfg["disturbance"])
        kind = dcfg.pop("type")
        if kind == "triangular_force":
            dist = Disturbance(
                kind="triangular_force",
                direction=dcfg["direction"],
                peak=float(dcfg["peak_n"]),
                t1=float(dcfg["t1_s"]),
                t2=float(dcfg["t2_s"]),
            )
        elif kind == "constant_body_torque":
            if "torque_nm" in dcfg:
                torque = np.asarray(dcfg["torque_nm"], dtype=float)
            else:
                wc = dcfg["worst_case"]
                torque = worst_case_torque(model, int(wc["off_rotor"]), float(wc["scale"]))
            dist = Disturbance(
                kind="constant_body_torque",
                torque=torque,
                activation_time=float(dcfg.get("t_on_s", 0.0)),
            )
        else:
            raise ValueError(f"unknown disturbance type {kind!r}")

    rho = cfg.get("rho", 1.0)
    rho_ramp = None
    if isinstance(rho, dict):
        rho_ramp = {
            "start": float(rho["start"]),
            "step": float(rho["step"]),
            "stop": float(rho["stop"]),
            "period": float(rho["period_s"]),
        }
        rho = rho_ramp["start"]

    horizon = cfg.get("horizon", {})
    initial = cfg.get("initial", {})
    fixed_tilt = cfg.get("fixed_tilt_deg")
    return ScenarioConfig(
        vehicle=model,
        actuator=actuator,
        weights=weights,
        reference=reference,
        duration=float(cfg["duration_s"]),
        name=str(cfg.get("name", "scenario")),
        horizon=int(horizon.get("N", 10)),
        step=float(horizon.get("T", 0.1)),
        t_ctrl=float(cfg.get("t_ctrl_s", 0.005)),
        dt_plant=float(cfg.get("dt_plant_s", 0.001)),
        substeps=int(cfg.get("substeps", 5)),
        rho=float(rho),
        rho_ramp=rho_ramp,
        noise=noise,
        disturbance=dist,
        seed=int(cfg.get("seed", 0)),
        tightening=float(cfg.get("tightening", 0.98)),
        slack_penalty=float(cfg.get("weights", {}).get("slack_penalty", 1e4)),
        deadline=cfg.get("deadline_s"),
        abort_radius=float(cfg.get("abort_radius_m", 5.0)),
        initial_position=initial.get("position_m"),
        initial_euler=np.deg2rad(initial["euler_deg"]) if "euler_deg" in initial else None,
        initial_tilt=np.deg2rad(float(initial.get("tilt_deg", 0.0))),
        fixed_tilt=np.deg2rad(float(fixed_tilt)) if fixed_tilt is not None else None,
    )


def initial_state(config):
    """Rest state at the reference pose with (clipped) hover thrusts."""
    model = config.vehicle
    ref0 = config.reference.sample(0.0)[0]
    x = np.zeros(dyn.state_dimension(model))
    x[dyn.POS] = config.initial_position if config.initial_position is not None else ref0[0:3]
    x[dyn.EULER] = config.initial_euler if config.initial_euler is not None else ref0[9:12]
    tilt = None
    if model.tiltable:
        tilt0 = config.fixed_tilt if config.fixed_tilt is not None else config.initial_tilt
        x[dyn.FORCE_START + model.n_rotors] = tilt0
        tilt = tilt0
    f_lo, f_hi = config.actuator.force_bounds()
    x[dyn.force_slice(model)] = np.clip(model.hover_forces(tilt), f_lo, f_hi)
    return x


def run_scenario(config, progress=False):
    """Simulate one scenario; returns the populated :class:`SimLog`."""
    model = config.vehicle
    n = model.n_rotors
    nx = dyn.state_dimension(model)
    nu = dyn.input_dimension(model)
    include_energy = config.weights.q_energy > 0.0
    ny = dyn.output_dimension(include_energy)
    weights = config.weights
    weights.slack_penalty = config.slack_penalty

    prediction = MultirotorPrediction(
        model, step=config.step, substeps=config.substeps, include_energy=include_energy
    )
    solver = RtiSolver(
        prediction, levenberg=config.levenberg, qp_max_iter=config.qp_max_iter
    )

    x = initial_state(config)
    noise_gen = NoiseGenerator(config.noise, config.t_ctrl) if config.noise else None
    fsl = dyn.force_slice(model)
    f_lo, f_hi = config.actuator.force_bounds()
    out_w = weights.output_diagonal(include_energy)
    tracking_w = out_w.copy()
    if include_energy:
        tracking_w[-1] = 0.0

    K = int(round(config.duration / config.t_ctrl))
    plant_substeps = max(1, int(round(config.t_ctrl / config.dt_plant)))
    dt_sub = config.t_ctrl / plant_substeps
    tilt_rate_limit = 0.0 if config.fixed_tilt is not None else TILT_RATE_LIMIT

    logrec = SimLog(
        model_name=model.name, n_rotors=n, tiltable=model.tiltable,
        include_energy=include_energy, horizon=config.horizon,
        step=config.step, t_ctrl=config.t_ctrl,
    )
    logrec.t = np.zeros(K)
    logrec.reference = np.zeros((K, ny))
    logrec.state = np.zeros((K, nx))
    logrec.measured = np.zeros((K, 12))
    logrec.input = np.zeros((K, nu))
    logrec.force_lo = np.zeros(K)
    logrec.force_hi = np.zeros(K)
    logrec.rate_lo = np.zeros((K, n))
    logrec.rate_hi = np.zeros((K, n))
    logrec.rho = np.zeros(K)
    logrec.disturbance = np.zeros((K, 6))
    logrec.cost_tracking = np.zeros(K)
    logrec.cost_energy = np.zeros(K)
    logrec.solve_time = np.zeros(K)
    logrec.qp_iterations = np.zeros(K, dtype=int)
    logrec.active_set_size = np.zeros(K, dtype=int)
    logrec.slack_max = np.zeros(K)
    logrec.status = []
    logrec.timing_ok = np.zeros(K, dtype=bool)

    pitch_clip = np.pi / 2.0 - PITCH_MARGIN - 1e-6
    rows = 0
    for k in range(K):
        t = k * config.t_ctrl
        rho_t = config.rho_at(t)
        act = replace(config.actuator, rate_scale=rho_t)

        # measurement: pose/twist plus filtered noise, thrusts through the
        # speed round-trip, tilt read exactly
        xm = x.copy()
        if noise_gen is not None:
            xm[:12] += noise_gen.step()
            xm[7] = np.clip(xm[7], -pitch_clip, pitch_clip)
        w_meas = np.sqrt(np.maximum(xm[fsl], 0.0) / act.c_f)
        xm[fsl] = act.c_f * w_meas**2

        problem = assemble(
            model, act, weights, config.reference, xm, t,
            horizon=config.horizon, step=config.step,
            tightening=config.tightening, tilt_rate_limit=tilt_rate_limit,
        )
        solution = solver.solve_step(problem, deadline=config.deadline)
        u = solution.applied_input

        over = np.max(np.abs(u - np.clip(u, problem.input_lo[0], problem.input_hi[0])))
        if over > 1e-9:
            raise AssertionError(f"applied input violates its bounds by {over:.2e}")

        y_true = dyn.eval_outputs(model, x[None, :], u[None, :], include_energy)[0]
        y_ref = problem.references[0]
        err = y_true - y_ref
        logrec.cost_tracking[k] = float(err @ (tracking_w * err))
        if include_energy:
            logrec.cost_energy[k] = float(weights.q_energy * err[-1] ** 2)

        fd, td = config.disturbance.wrench(t)
        logrec.t[k] = t
        logrec.reference[k] = y_ref
        logrec.state[k] = x
        logrec.measured[k] = xm[:12]
        logrec.input[k] = u
        logrec.force_lo[k] = f_lo
        logrec.force_hi[k] = f_hi
        logrec.rate_lo[k] = problem.input_lo[0, :n]
        logrec.rate_hi[k] = problem.input_hi[0, :n]
        logrec.rho[k] = rho_t
        logrec.disturbance[k] = np.concatenate([fd, td])
        logrec.solve_time[k] = solution.solve_time
        logrec.qp_iterations[k] = solution.qp_iterations
        logrec.active_set_size[k] = solution.active_set_size
        logrec.slack_max[k] = solution.slack_max
        logrec.status.append(solution.status)
        logrec.timing_ok[k] = solution.solve_time <= config.t_ctrl
        rows = k + 1

        for j in range(plant_substeps):
            fd, td = config.disturbance.wrench(t + j * dt_sub)
            x = plant_step(model, x, u, dt_sub, f_dist=fd, tau_dist=td)

        pos_err = np.linalg.norm(x[dyn.POS] - config.reference.sample(t + config.t_ctrl)[0][0:3])
        if pos_err > config.abort_radius:
            log.error("%s diverged at t=%.2f s (error %.2f m)", config.name, t, pos_err)
            logrec.diverged = True
            break
        if progress and k % 2000 == 0 and k:
            log.info("%s: t=%.1f s / %.1f s", config.name, t, config.duration)

    if rows < K:
        for name in ("t", "reference", "state", "measured", "input", "force_lo",
                     "force_hi", "rate_lo", "rate_hi", "rho", "disturbance",
                     "cost_tracking", "cost_energy", "solve_time", "qp_iterations",
                     "active_set_size", "slack_max", "timing_ok"):
            setattr(logrec, name, getattr(logrec, name)[:rows])
    return logrec
