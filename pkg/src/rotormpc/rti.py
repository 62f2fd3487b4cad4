"""Real-time-iteration solver for the tracking OCP.

One call performs a single Gauss-Newton SQP iteration on the multiple
shooting transcription of the problem:

1. shift the previous solution grid to warm-start the linearization,
2. integrate and differentiate the prediction model on every shooting
   interval (exact RK4 sensitivities),
3. condense the state increments out through the linearized dynamics,
   leaving a dense QP in the stacked input increments plus one slack per
   node softening the (tightened) state box,
4. solve the QP with the warm-started active-set method and expand the
   increments back onto the grid.

The first input of the updated grid is applied.  If the QP fails or the
solve misses its deadline, the input planned for this interval by the
previous solution is applied instead (``backup_used``); consecutive
failures walk forward through that stored plan.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import dynamics as dyn
from .qp import ActiveSetSolver, DenseQp


class RtiSolverError(RuntimeError):
    """No usable input: the QP failed and no previous solution exists."""


class MultirotorPrediction:
    """RK4 discretization of the multirotor over one shooting interval."""

    def __init__(self, model, step=0.1, substeps=5, include_energy=False):
        if substeps < 1:
            raise ValueError("substeps must be >= 1")
        self.model = model
        self.step = float(step)
        self.substeps = int(substeps)
        self.include_energy = bool(include_energy)
        self.nx = dyn.state_dimension(model)
        self.nu = dyn.input_dimension(model)
        self.ny = dyn.output_dimension(include_energy)

    def step_states(self, X, U):
        return dyn.rk4_batch(self.model, X, U, self.step, self.substeps)

    def step_with_jacobians(self, X, U):
        return dyn.rk4_sensitivities(self.model, X, U, self.step, self.substeps)

    def outputs(self, X, U):
        return dyn.eval_outputs(self.model, X, U, self.include_energy)

    def outputs_with_jacobians(self, X, U):
        Y, C = dyn.eval_outputs_with_jacobian(self.model, X, U, self.include_energy)
        D = np.zeros((X.shape[0], self.ny, self.nu))
        return Y, C, D


def sensitivities(model, state, control, step, substeps=5):
    """Discrete step phi(x, u) with exact Jacobians (A, B) of the RK4 map."""
    x = state.as_vector() if isinstance(state, dyn.FullState) else np.asarray(state, dtype=float)
    u = control.as_vector() if isinstance(control, dyn.ControlInput) else np.asarray(control, dtype=float)
    X1, A, B = dyn.rk4_sensitivities(model, x[None, :], u[None, :], step, substeps)
    return X1[0], A[0], B[0]


@dataclass
class ShootingGrid:
    """Linearization data on the N+1 shooting nodes."""

    states: np.ndarray      # (N+1, nx)
    inputs: np.ndarray      # (N, nu)
    A: np.ndarray = None    # (N, nx, nx) d phi/d x
    B: np.ndarray = None    # (N, nx, nu) d phi/d u
    C: np.ndarray = None    # (N+1, ny, nx) d h/d x
    D: np.ndarray = None    # (N+1, ny, nu) d h/d u
    outputs: np.ndarray = None   # (N+1, ny)
    predicted: np.ndarray = None  # (N, nx) phi(x_h, u_h)
    defects: np.ndarray = None    # (N, nx) phi(x_h, u_h) - x_{h+1}

    def copy(self):
        return ShootingGrid(
            states=self.states.copy(),
            inputs=self.inputs.copy(),
        )


@dataclass
class OcpSolution:
    """Updated trajectories and diagnostics of one RTI step."""

    states: np.ndarray
    inputs: np.ndarray
    applied_input: np.ndarray
    status: str                 # solved | backup_used
    qp_iterations: int = 0
    active_set_size: int = 0
    solve_time: float = 0.0
    slack_max: float = 0.0
    kkt_residual: float = 0.0


@dataclass
class _Condensed:
    qp: DenseQp
    E: np.ndarray               # (N+1, nx, N*nu) state sensitivities
    e: np.ndarray               # (N+1, nx) affine state terms
    n_inputs: int               # N*nu
    start: np.ndarray           # feasible QP start point


class RtiSolver:
    """Owns the warm-start state for one receding-horizon control loop.

    A solver instance is not safe for concurrent use; run one per
    scenario.  Results are deterministic functions of the problem stream.
    """

    def __init__(self, prediction, levenberg=1e-8, qp_max_iter=200, qp_cold_iter=3000):
        # qp_max_iter caps the active-set changes of warm-started solves;
        # the very first solve of a run has no active set to reuse and gets
        # the larger cold budget.
        self.prediction = prediction
        self.levenberg = float(levenberg)
        self.qp_solver = ActiveSetSolver(max_iter=qp_max_iter)
        self.qp_cold_iter = int(qp_cold_iter)
        self.reset()

    def reset(self):
        self._grid = None
        self._grid_time = None
        self._active_set = None
        self._last_solution = None
        self._backup_node = 1

    # -- warm start -------------------------------------------------------

    def _warm_grid(self, problem):
        N = problem.horizon
        nx, nu = self.prediction.nx, self.prediction.nu
        if self._grid is None or problem.time < self._grid_time:
            states = np.tile(problem.initial_state, (N + 1, 1))
            inputs = np.zeros((N, nu))
            self._grid_time = problem.time
            return ShootingGrid(states=states, inputs=inputs)
        shift = int(np.floor((problem.time - self._grid_time) / problem.step + 1e-9))
        grid = self._grid.copy()
        if shift > 0:
            shift = min(shift, N)
            grid.states[:-shift] = grid.states[shift:]
            grid.states[-shift:] = grid.states[-shift - 1]
            grid.inputs[:-shift] = grid.inputs[shift:]
            grid.inputs[-shift:] = grid.inputs[-shift - 1] if shift < N else 0.0
            self._grid_time += shift * problem.step
        return grid

    # -- linearize + condense ----------------------------------------------

    def prepare(self, problem, grid):
        """Linearize the prediction model on the grid and condense the QP."""
        N = problem.horizon
        nx, nu, ny = self.prediction.nx, self.prediction.nu, self.prediction.ny
        pred, A, B = self.prediction.step_with_jacobians(grid.states[:N], grid.inputs)
        defects = pred - grid.states[1:]
        # Terminal outputs reuse the last input; the output map of the
        # multirotor does not feed through u.
        u_ext = np.vstack([grid.inputs, grid.inputs[-1:]])
        outputs, C, D = self.prediction.outputs_with_jacobians(grid.states, u_ext)
        grid.A, grid.B, grid.C, grid.D = A, B, C, D
        grid.outputs, grid.predicted, grid.defects = outputs, pred, defects

        n_in = N * nu
        n_box = problem.state_box_index.size
        n_slack = N if n_box else 0
        nz = n_in + n_slack

        E = np.zeros((N + 1, nx, n_in))
        e = np.zeros((N + 1, nx))
        e[0] = problem.initial_state - grid.states[0]
        for h in range(N):
            E[h + 1] = A[h] @ E[h]
            E[h + 1][:, h * nu:(h + 1) * nu] += B[h]
            e[h + 1] = A[h] @ e[h] + defects[h]

        H = np.zeros((nz, nz))
        g = np.zeros(nz)
        for h in range(N + 1):
            w = problem.terminal_weight if h == N else problem.stage_weight
            M = C[h] @ E[h]
            if h < N:
                M[:, h * nu:(h + 1) * nu] += D[h]
            resid = outputs[h] - problem.references[h] + C[h] @ e[h]
            WM = w[:, None] * M
            H[:n_in, :n_in] += 2.0 * (M.T @ WM)
            g[:n_in] += 2.0 * (M.T @ (w * resid))
        ridx = np.arange(n_in)
        H[ridx, ridx] += self.levenberg
        for h in range(N):
            blk = slice(h * nu, (h + 1) * nu)
            H[blk, blk] += 2.0 * np.diag(problem.input_weight)
            g[blk] += 2.0 * problem.input_weight * grid.inputs[h]

        lb = np.empty(nz)
        ub = np.empty(nz)
        lb[:n_in] = (problem.input_lo - grid.inputs).ravel()
        ub[:n_in] = (problem.input_hi - grid.inputs).ravel()

        Crows = None
        clb = None
        cub = None
        start = np.clip(np.zeros(nz), lb, ub)
        if n_box:
            lb[n_in:] = 0.0
            ub[n_in:] = np.inf
            zeta = problem.slack_penalty
            sidx = np.arange(n_in, nz)
            H[sidx, sidx] += 2.0 * zeta
            g[n_in:] += zeta
            lo_t, hi_t = problem.tightened_state_box()
            sel = problem.state_box_index
            Crows = np.zeros((2 * n_box * N, nz))
            clb = np.full(2 * n_box * N, -np.inf)
            cub = np.full(2 * n_box * N, np.inf)
            for h in range(1, N + 1):
                base = grid.states[h][sel] + e[h][sel]
                rows_x = E[h][sel, :]
                r0 = 2 * n_box * (h - 1)
                lo_rows = slice(r0, r0 + n_box)
                hi_rows = slice(r0 + n_box, r0 + 2 * n_box)
                Crows[lo_rows, :n_in] = rows_x
                Crows[lo_rows, n_in + h - 1] = 1.0
                clb[lo_rows] = lo_t - base
                Crows[hi_rows, :n_in] = rows_x
                Crows[hi_rows, n_in + h - 1] = -1.0
                cub[hi_rows] = hi_t - base
            # start with slacks large enough to cover current violations
            cz = Crows[:, :n_in] @ start[:n_in]
            need = np.zeros(N)
            for h in range(1, N + 1):
                r0 = 2 * n_box * (h - 1)
                lo_gap = np.max(clb[r0:r0 + n_box] - cz[r0:r0 + n_box], initial=0.0)
                hi_gap = np.max(cz[r0 + n_box:r0 + 2 * n_box] - cub[r0 + n_box:r0 + 2 * n_box], initial=0.0)
                need[h - 1] = max(lo_gap, hi_gap)
            start[n_in:] = need + 1e-12

        qp = DenseQp(H=H, g=g, lb=lb, ub=ub, C=Crows, clb=clb, cub=cub)
        return grid, _Condensed(qp=qp, E=E, e=e, n_inputs=n_in, start=start)

    # -- one RTI step -------------------------------------------------------

    def solve_step(self, problem, deadline=None):
        """One prepare + QP solve; returns the input to apply now."""
        t0 = time.perf_counter()
        N = problem.horizon
        nu = self.prediction.nu
        failure = None
        try:
            grid = self._warm_grid(problem)
            grid, cond = self.prepare(problem, grid)
            cap = self.qp_solver.max_iter
            if self._active_set is None:
                self.qp_solver.max_iter = self.qp_cold_iter
            try:
                res = self.qp_solver.solve(
                    cond.qp, warm_start=self._active_set, start_point=cond.start
                )
            finally:
                self.qp_solver.max_iter = cap
            if res.status != "optimal":
                failure = f"QP status {res.status}"
        except (dyn.PitchSingularityError, ValueError) as exc:
            failure = str(exc)
            res = None
            grid = None

        elapsed = time.perf_counter() - t0
        if failure is None and res is not None:
            du = res.z[:cond.n_inputs].reshape(N, nu)
            slack_max = float(np.max(res.z[cond.n_inputs:], initial=0.0))
            new_states = grid.states + cond.e + np.einsum(
                "hij,j->hi", cond.E, res.z[:cond.n_inputs]
            )
            new_inputs = grid.inputs + du
            self._grid = ShootingGrid(states=new_states, inputs=new_inputs)
            self._active_set = res.active_set
            if deadline is not None and elapsed > deadline:
                failure = "deadline exceeded"
            else:
                applied = np.clip(new_inputs[0], problem.input_lo[0], problem.input_hi[0])
                solution = OcpSolution(
                    states=new_states,
                    inputs=new_inputs,
                    applied_input=applied,
                    status="solved",
                    qp_iterations=res.iterations,
                    active_set_size=res.active_set_size,
                    solve_time=elapsed,
                    slack_max=slack_max,
                    kkt_residual=res.kkt_residual,
                )
                self._last_solution = solution
                self._backup_node = 1
                return solution

        # Backup path: fall back on the plan from the last good solution.
        previous = self._last_solution
        if previous is None:
            raise RtiSolverError(f"no backup input available ({failure})")
        node = min(self._backup_node, N - 1)
        self._backup_node += 1
        applied = np.clip(previous.inputs[node], problem.input_lo[0], problem.input_hi[0])
        return OcpSolution(
            states=previous.states,
            inputs=previous.inputs,
            applied_input=applied,
            status="backup_used",
            qp_iterations=0,
            active_set_size=0,
            solve_time=elapsed,
            slack_max=0.0,
            kkt_residual=np.inf,
        )
