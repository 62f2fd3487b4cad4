"""Dense strictly convex QP solver (primal active set, warm-startable).

Solves

    min_z  1/2 z' H z + g' z
    s.t.   lb  <= z   <= ub
           clb <= C z <= cub

with H symmetric positive-definite.  The method iterates on a working set
of active constraints: variables at active bounds are eliminated, active
general rows are handled through a Schur complement on the Cholesky
factor of the free-variable Hessian block.  Ties in the ratio test are
broken by lowest constraint index, which also acts as the anti-cycling
rule; working-set changes are therefore deterministic.

After an unblocked full step the working-set face optimum is attained and
every wrong-signed multiplier is released at once; receding-horizon use
re-solves a slightly perturbed QP every few milliseconds and benefits
from shedding a stale active set in one sweep.

Warm starts pass the active set (and optionally the point) of a previous
solution; with the optimal active set the solver terminates in at most
two iterations.
"""

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

# Constraint identifiers: ("b", i, side) for variable bounds,
# ("r", j, side) for general rows; side -1 lower, +1 upper, 2 fixed
# (lb == ub, never dropped).
_BOUND = "b"
_ROW = "r"
_FIXED = 2


class QpDimensionError(ValueError):
    pass


@dataclass
class DenseQp:
    H: np.ndarray
    g: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    C: Optional[np.ndarray] = None
    clb: Optional[np.ndarray] = None
    cub: Optional[np.ndarray] = None

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.g = np.asarray(self.g, dtype=float)
        self.lb = np.asarray(self.lb, dtype=float)
        self.ub = np.asarray(self.ub, dtype=float)
        nz = self.g.shape[0]
        if self.H.shape != (nz, nz):
            raise QpDimensionError("H/g dimension mismatch")
        if self.lb.shape != (nz,) or self.ub.shape != (nz,):
            raise QpDimensionError("bound dimension mismatch")
        if np.linalg.norm(self.H - self.H.T, ord=np.inf) > 1e-8 * (
            1.0 + np.linalg.norm(self.H, ord=np.inf)
        ):
            raise ValueError("H must be symmetric")
        if np.any(self.lb > self.ub):
            raise ValueError("variable bounds must satisfy lb <= ub")
        if self.C is not None:
            self.C = np.asarray(self.C, dtype=float)
            self.clb = np.asarray(self.clb, dtype=float)
            self.cub = np.asarray(self.cub, dtype=float)
            m = self.C.shape[0]
            if self.C.shape != (m, nz) or self.clb.shape != (m,) or self.cub.shape != (m,):
                raise QpDimensionError("row dimension mismatch")
            if np.any(self.clb > self.cub):
                raise ValueError("row bounds must satisfy clb <= cub")

    @property
    def n_vars(self):
        return self.g.shape[0]

    @property
    def n_rows(self):
        return 0 if self.C is None else self.C.shape[0]

    def objective(self, z):
        return 0.5 * z @ self.H @ z + self.g @ z

    def dump(self, path):
        """Write the QP to structured text for bug reports."""
        data = {
            "H": self.H.tolist(),
            "g": self.g.tolist(),
            "lb": self.lb.tolist(),
            "ub": self.ub.tolist(),
        }
        if self.C is not None:
            data["C"] = self.C.tolist()
            data["clb"] = self.clb.tolist()
            data["cub"] = self.cub.tolist()
        with open(path, "w") as fh:
            json.dump(data, fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            data = json.load(fh)
        kwargs = {k: np.asarray(v, dtype=float) for k, v in data.items()}
        return cls(**kwargs)


@dataclass
class QpResult:
    z: np.ndarray
    bound_multipliers: np.ndarray
    row_multipliers: np.ndarray
    iterations: int
    status: str                     # optimal | max_iter | infeasible
    kkt_residual: float
    active_set: tuple = field(default_factory=tuple)

    @property
    def active_set_size(self):
        return len(self.active_set)


def _kkt_residual(qp, z, mu_b, mu_r):
    grad = qp.H @ z + qp.g
    resid = grad - mu_b
    if qp.C is not None:
        resid = resid - qp.C.T @ mu_r
    scale = 1.0 + np.linalg.norm(qp.g, ord=np.inf)
    stationarity = np.linalg.norm(resid, ord=np.inf) / scale
    primal = max(
        np.max(qp.lb - z, initial=0.0),
        np.max(z - qp.ub, initial=0.0),
    )

    def _comp(mult, slack):
        mask = mult != 0.0
        if not np.any(mask):
            return 0.0
        return float(np.max(np.abs(mult[mask]) * slack[mask]))

    comp = _comp(mu_b, np.minimum(np.abs(z - qp.lb), np.abs(qp.ub - z)))
    if qp.C is not None:
        cz = qp.C @ z
        primal = max(primal, np.max(qp.clb - cz, initial=0.0), np.max(cz - qp.cub, initial=0.0))
        comp = max(comp, _comp(mu_r, np.minimum(np.abs(cz - qp.clb), np.abs(qp.cub - cz))))
    return max(stationarity, primal / scale, comp / scale)


class ActiveSetSolver:
    """Primal active-set solver with deterministic pivoting.

    A solver instance owns scratch state from the last solve (for warm
    starting) and must not be shared between concurrent solves.
    """

    def __init__(self, max_iter=200, feas_tol=1e-9, mult_tol=1e-9, accel_iters=30):
        self.max_iter = max_iter
        self.feas_tol = feas_tol
        self.mult_tol = mult_tol
        self.accel_iters = accel_iters

    # -- feasibility bootstrap -------------------------------------------

    def _initial_point(self, qp, start_point):
        if start_point is not None:
            z = np.clip(np.asarray(start_point, dtype=float), qp.lb, qp.ub)
        else:
            z = np.clip(np.zeros(qp.n_vars), qp.lb, qp.ub)
        if qp.C is None:
            return z, True
        # Alternating projections onto the row slabs and the box; enough
        # for library use -- the controller always supplies a feasible
        # start through the slack variables.
        for _ in range(200):
            cz = qp.C @ z
            worst = max(np.max(qp.clb - cz, initial=0.0), np.max(cz - qp.cub, initial=0.0))
            if worst <= self.feas_tol:
                return z, True
            for j in range(qp.n_rows):
                cj = qp.C[j]
                val = cj @ z
                target = None
                if val < qp.clb[j] - self.feas_tol:
                    target = qp.clb[j]
                elif val > qp.cub[j] + self.feas_tol:
                    target = qp.cub[j]
                if target is not None:
                    nrm = cj @ cj
                    if nrm > 0.0:
                        z = z + cj * ((target - val) / nrm)
            z = np.clip(z, qp.lb, qp.ub)
        return z, False

    # -- projected-Newton warm-up ----------------------------------------

    def _accelerate(self, qp, z, bound_state):
        """Identify the active variable bounds by projected Newton steps.

        Receding-horizon streams re-solve a slightly perturbed QP every few
        milliseconds; with zero input weights many near-flat variables flip
        between their bounds from one solve to the next, and walking those
        flips one pivot at a time dominates the runtime.  Clipped Newton
        steps on the variable box find the new bound pattern in a handful
        of sweeps; the exact active-set loop then certifies optimality.
        The phase bails out rather than violate a general row, so it never
        compromises feasibility.
        """
        nz = qp.n_vars
        prev_pattern = None
        for _ in range(self.accel_iters):
            grad = qp.H @ z + qp.g
            at_lo = z <= qp.lb + self.feas_tol
            at_hi = z >= qp.ub - self.feas_tol
            clamped = (
                (bound_state == _FIXED)
                | (at_lo & (grad > 0.0))
                | (at_hi & (grad < 0.0))
            )
            F = np.flatnonzero(~clamped)
            if F.size == 0:
                break
            cand = z.copy()
            try:
                chol = cho_factor(qp.H[np.ix_(F, F)], lower=True, check_finite=False)
            except np.linalg.LinAlgError:
                break
            cand[F] += cho_solve(chol, -grad[F], check_finite=False)
            np.clip(cand, qp.lb, qp.ub, out=cand)
            if qp.C is not None:
                cz = qp.C @ cand
                if (
                    np.max(qp.clb - cz, initial=0.0) > self.feas_tol
                    or np.max(cz - qp.cub, initial=0.0) > self.feas_tol
                ):
                    break
            z = cand
            pattern = (z <= qp.lb + self.feas_tol, z >= qp.ub - self.feas_tol)
            if prev_pattern is not None and (
                np.array_equal(pattern[0], prev_pattern[0])
                and np.array_equal(pattern[1], prev_pattern[1])
            ):
                break
            prev_pattern = pattern
        # hand the identified pattern to the exact loop
        free = bound_state != _FIXED
        bound_state[free] = 0
        bound_state[free & (z <= qp.lb + self.feas_tol)] = -1
        sel = free & (bound_state == 0) & (z >= qp.ub - self.feas_tol)
        bound_state[sel] = 1
        return z

    # -- equality-constrained subproblem ---------------------------------

    def _eqp_step(self, qp, z, bound_state, rows_idx, rows_val):
        """Step p and active-row multipliers for the current working set."""
        nz = qp.n_vars
        p = np.zeros(nz)
        fixed = bound_state != 0
        if np.any(fixed):
            target = np.where(bound_state > 0, qp.ub, qp.lb)
            target[bound_state == _FIXED] = qp.lb[bound_state == _FIXED]
            p[fixed] = target[fixed] - z[fixed]
        F = np.flatnonzero(~fixed)
        grad = qp.H @ z + qp.g
        if np.any(fixed):
            grad = grad + qp.H[:, fixed] @ p[fixed]
        nrows = rows_idx.size
        if F.size == 0:
            lam = np.zeros(nrows)
            if nrows:
                A = qp.C[rows_idx][:, fixed].T
                lam = np.linalg.lstsq(A, (qp.H @ (z + p) + qp.g)[fixed], rcond=None)[0]
            return p, lam
        gF = grad[F]
        HFF = qp.H[np.ix_(F, F)]
        try:
            chol = cho_factor(HFF, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise ValueError("Hessian is not positive-definite") from exc
        if nrows == 0:
            p[F] = cho_solve(chol, -gF, check_finite=False)
            return p, np.zeros(0)
        CF = qp.C[rows_idx][:, F]
        r = rows_val - qp.C[rows_idx] @ z
        if np.any(fixed):
            r = r - qp.C[rows_idx][:, fixed] @ p[fixed]
        Y = cho_solve(chol, CF.T, check_finite=False)
        S = CF @ Y
        rhs = CF @ cho_solve(chol, gF, check_finite=False) + r
        try:
            lam = np.linalg.solve(S, rhs)
        except np.linalg.LinAlgError:
            lam = np.linalg.lstsq(S, rhs, rcond=None)[0]
        p[F] = cho_solve(chol, CF.T @ lam - gF, check_finite=False)
        return p, lam

    # -- main loop ---------------------------------------------------------

    def solve(self, qp, warm_start=None, start_point=None):
        nz = qp.n_vars
        z, feasible = self._initial_point(qp, start_point)
        if not feasible or np.any(qp.lb > qp.ub):
            return QpResult(
                z=z,
                bound_multipliers=np.zeros(nz),
                row_multipliers=np.zeros(qp.n_rows),
                iterations=0,
                status="infeasible",
                kkt_residual=np.inf,
            )

        # bound_state: 0 free, -1/+1 at a bound, _FIXED when lb == ub.
        bound_state = np.zeros(nz, dtype=np.int8)
        row_state = np.zeros(qp.n_rows, dtype=np.int8)
        fixed_vars = np.flatnonzero(qp.ub - qp.lb <= self.feas_tol)
        bound_state[fixed_vars] = _FIXED
        z[fixed_vars] = qp.lb[fixed_vars]
        if warm_start:
            for kind, idx, side in warm_start:
                if kind == _BOUND and idx < nz and bound_state[idx] == 0:
                    bound_state[idx] = side if side else _FIXED
                elif kind == _ROW and idx < qp.n_rows:
                    row_state[idx] = side if side else 1
        else:
            # Crash start: activate the variable bounds the start point
            # already sits on, which spares one pivot per touched bound.
            free = bound_state == 0
            bound_state[free & (np.abs(z - qp.lb) <= self.feas_tol)] = -1
            free = bound_state == 0
            bound_state[free & (np.abs(qp.ub - z) <= self.feas_tol)] = 1
        # The acceleration re-derives the variable-bound pattern; warm-start
        # row entries are kept as they are.
        if self.accel_iters > 0:
            z = self._accelerate(qp, z, bound_state)

        status = "max_iter"
        iterations = 0
        for iterations in range(1, self.max_iter + 1):
            rows_idx = np.flatnonzero(row_state)
            if rows_idx.size:
                rows_val = np.where(row_state[rows_idx] > 0, qp.cub[rows_idx], qp.clb[rows_idx])
            else:
                rows_val = np.zeros(0)
            p, lam = self._eqp_step(qp, z, bound_state, rows_idx, rows_val)
            step_norm = float(np.max(np.abs(p), initial=0.0))
            at_face_optimum = step_norm <= 1e-11 * (1.0 + float(np.max(np.abs(z))))
            if not at_face_optimum:
                alpha, blocker = self._ratio_test(qp, z, p, bound_state, row_state)
                z = z + alpha * p
                if blocker is not None:
                    kind, idx, side = blocker
                    if kind == _BOUND:
                        bound_state[idx] = side
                    else:
                        row_state[idx] = side
                    continue
                # Full step: the working-set face optimum is attained, so
                # the multiplier test applies directly.
            if not self._drop_constraints(qp, z, bound_state, row_state, rows_idx, lam):
                status = "optimal"
                break

        mu_b, mu_r = self._multipliers(qp, z, bound_state, row_state)
        active = []
        for i in np.flatnonzero(bound_state):
            side = int(bound_state[i])
            active.append((_BOUND, int(i), 0 if side == _FIXED else side))
        for j in np.flatnonzero(row_state):
            active.append((_ROW, int(j), int(row_state[j])))
        return QpResult(
            z=z,
            bound_multipliers=mu_b,
            row_multipliers=mu_r,
            iterations=iterations,
            status=status,
            kkt_residual=_kkt_residual(qp, z, mu_b, mu_r),
            active_set=tuple(sorted(active)),
        )

    def _drop_constraints(self, qp, z, bound_state, row_state, rows_idx, lam):
        """Release every wrong-signed multiplier; returns True if any."""
        grad = qp.H @ z + qp.g
        if rows_idx.size:
            grad = grad - qp.C[rows_idx].T @ lam
        tol = self.mult_tol * (1.0 + float(np.max(np.abs(qp.g), initial=0.0)))
        dropped = False
        # lower-active constraints need mu >= 0, upper-active mu <= 0
        droppable = (bound_state == -1) | (bound_state == 1)
        signed = np.where(bound_state == 1, -grad, grad)
        for i in np.flatnonzero(droppable & (signed < -tol)):
            bound_state[i] = 0
            dropped = True
        for k, j in enumerate(rows_idx):
            side = row_state[j]
            mu = lam[k]
            if side != 0 and (mu if side < 0 else -mu) < -tol:
                row_state[j] = 0
                dropped = True
        return dropped

    def _ratio_test(self, qp, z, p, bound_state, row_state):
        tol = 1e-13
        alpha = 1.0
        blocker = None

        def scan(values, step, lo, hi, kind, state):
            nonlocal alpha, blocker
            with np.errstate(divide="ignore", invalid="ignore"):
                a_hi = np.where(step > tol, (hi - values) / step, np.inf)
                a_lo = np.where(step < -tol, (lo - values) / step, np.inf)
            a_hi = np.maximum(a_hi, 0.0)
            a_lo = np.maximum(a_lo, 0.0)
            candidates = np.flatnonzero((np.minimum(a_hi, a_lo) < alpha - 1e-12) & (state == 0))
            for idx in candidates:
                i = int(idx)
                if a_hi[i] <= a_lo[i]:
                    a, side = a_hi[i], 1
                else:
                    a, side = a_lo[i], -1
                if a < alpha - 1e-12:
                    alpha = a
                    blocker = (kind, i, side)

        scan(z, p, qp.lb, qp.ub, _BOUND, bound_state)
        if qp.C is not None:
            scan(qp.C @ z, qp.C @ p, qp.clb, qp.cub, _ROW, row_state)
        return alpha, blocker

    def _multipliers(self, qp, z, bound_state, row_state):
        mu_b = np.zeros(qp.n_vars)
        mu_r = np.zeros(qp.n_rows)
        grad = qp.H @ z + qp.g
        rows_idx = np.flatnonzero(row_state)
        if rows_idx.size:
            # Recover row multipliers from stationarity on the free block.
            F = np.flatnonzero(bound_state == 0)
            CF = qp.C[rows_idx][:, F]
            lam = np.linalg.lstsq(CF.T, grad[F], rcond=None)[0]
            mu_r[rows_idx] = lam
            grad = grad - qp.C[rows_idx].T @ lam
        fixed = np.flatnonzero(bound_state)
        if fixed.size:
            mu_b[fixed] = grad[fixed]
        return mu_b, mu_r


def solve(qp, warm_start=None, start_point=None, max_iter=200):
    """One-shot convenience wrapper around :class:`ActiveSetSolver`."""
    return ActiveSetSolver(max_iter=max_iter).solve(qp, warm_start, start_point)
