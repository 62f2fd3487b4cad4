"""Tracking and solver statistics extracted from a simulation log."""

import json
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class MetricsReport:
    """Per-axis tracking errors, actuator envelope, and solver statistics."""

    position_error_max: np.ndarray       # (3,) [m]
    position_error_rms: np.ndarray       # (3,) [m]
    orientation_error_max: np.ndarray    # (3,) [deg]
    orientation_error_rms: np.ndarray    # (3,) [deg]
    force_min: float                     # [N]
    force_max: float                     # [N]
    force_rate_min: float                # [N/s]
    force_rate_max: float                # [N/s]
    solve_time_mean: float               # [s]
    solve_time_max: float                # [s]
    backup_count: int
    timing_ok_fraction: float
    accumulated_tracking_cost: float
    accumulated_energy_cost: float
    rows: int
    duration: float
    diverged: bool = False

    def __post_init__(self):
        if np.any(self.position_error_rms > self.position_error_max + 1e-12):
            raise ValueError("RMS error cannot exceed the max error")
        if np.any(self.orientation_error_rms > self.orientation_error_max + 1e-12):
            raise ValueError("RMS error cannot exceed the max error")
        if self.force_min > self.force_max or self.force_rate_min > self.force_rate_max:
            raise ValueError("min cannot exceed max")

    @property
    def accumulated_cost(self):
        return self.accumulated_tracking_cost + self.accumulated_energy_cost

    def to_dict(self):
        return {
            "position_error_max_m": [float(v) for v in self.position_error_max],
            "position_error_rms_m": [float(v) for v in self.position_error_rms],
            "orientation_error_max_deg": [float(v) for v in self.orientation_error_max],
            "orientation_error_rms_deg": [float(v) for v in self.orientation_error_rms],
            "force_min_n": float(self.force_min),
            "force_max_n": float(self.force_max),
            "force_rate_min_nps": float(self.force_rate_min),
            "force_rate_max_nps": float(self.force_rate_max),
            "solve_time_mean_s": float(self.solve_time_mean),
            "solve_time_max_s": float(self.solve_time_max),
            "backup_count": int(self.backup_count),
            "timing_ok_fraction": float(self.timing_ok_fraction),
            "accumulated_tracking_cost": float(self.accumulated_tracking_cost),
            "accumulated_energy_cost": float(self.accumulated_energy_cost),
            "accumulated_cost": float(self.accumulated_cost),
            "rows": int(self.rows),
            "duration_s": float(self.duration),
            "diverged": bool(self.diverged),
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def format_table(self):
        lines = ["metric                        x          y          z"]

        def row3(label, values):
            vals = "  ".join(f"{v:9.4f}" for v in values)
            lines.append(f"{label:<26} {vals}")

        row3("e_p max [m]", self.position_error_max)
        row3("e_p rms [m]", self.position_error_rms)
        row3("e_eta max [deg]", self.orientation_error_max)
        row3("e_eta rms [deg]", self.orientation_error_rms)
        lines.append(f"{'f range [N]':<26} {self.force_min:9.4f}  {self.force_max:9.4f}")
        lines.append(
            f"{'f_dot range [N/s]':<26} {self.force_rate_min:9.4f}  {self.force_rate_max:9.4f}"
        )
        lines.append(
            f"{'solve time mean/max [ms]':<26} {self.solve_time_mean*1e3:9.3f}  "
            f"{self.solve_time_max*1e3:9.3f}"
        )
        lines.append(f"{'backup steps':<26} {self.backup_count:9d}")
        lines.append(f"{'timing chain ok':<26} {self.timing_ok_fraction*100:8.2f}%")
        lines.append(f"{'accumulated cost':<26} {self.accumulated_cost:12.4f}")
        if self.diverged:
            lines.append("WARNING: run diverged before its configured end")
        return "\n".join(lines)


def compute_metrics(simlog, warmup=1.0):
    """Summarize a run, ignoring the first ``warmup`` seconds of transients.

    Error statistics use the true plant state against the sampled
    reference; accumulated costs integrate over the whole run.
    """
    t = simlog.t
    if len(t) == 0:
        raise ValueError("empty simulation log")
    if simlog.diverged:
        log.warning("log is truncated (divergence); metrics cover %d rows", len(t))
    mask = t >= min(warmup, max(t[-1] - 1e-9, 0.0))
    if not np.any(mask):
        mask = np.ones_like(t, dtype=bool)

    pos_err = simlog.state[mask, 0:3] - simlog.reference[mask, 0:3]
    eta_err = np.rad2deg(simlog.state[mask, 6:9] - simlog.reference[mask, 9:12])
    forces = simlog.state[mask][:, 12:12 + simlog.n_rotors]
    rates = simlog.input[mask][:, :simlog.n_rotors]

    status = np.asarray(simlog.status)[mask]
    return MetricsReport(
        position_error_max=np.max(np.abs(pos_err), axis=0),
        position_error_rms=np.sqrt(np.mean(pos_err**2, axis=0)),
        orientation_error_max=np.max(np.abs(eta_err), axis=0),
        orientation_error_rms=np.sqrt(np.mean(eta_err**2, axis=0)),
        force_min=float(np.min(forces)),
        force_max=float(np.max(forces)),
        force_rate_min=float(np.min(rates)),
        force_rate_max=float(np.max(rates)),
        solve_time_mean=float(np.mean(simlog.solve_time[mask])),
        solve_time_max=float(np.max(simlog.solve_time[mask])),
        backup_count=int(np.sum(status == "backup_used")),
        timing_ok_fraction=float(np.mean(simlog.timing_ok[mask])),
        accumulated_tracking_cost=float(np.sum(simlog.cost_tracking)),
        accumulated_energy_cost=float(np.sum(simlog.cost_energy)),
        rows=len(t),
        duration=float(t[-1] - t[0]) if len(t) > 1 else 0.0,
        diverged=simlog.diverged,
    )
