"""Numba-compiled hot loops for the integrator and its sensitivities.

The formulas mirror :mod:`rotormpc.dynamics` exactly; equivalence of the
two paths is asserted in the test suite.  Everything here is plain scalar
arithmetic so numba can compile it to tight machine code -- the predictive
controller evaluates these kernels a few hundred thousand times per
simulated flight.
"""

import numpy as np
from numba import njit

F0 = 12  # first force index in the state vector


@njit(cache=True)
def _dyn_jac(x, u, mass, gravity, J, Jinv, Gfix, tiltable, rz, lever, tsign,
             cb, sb, n, need_jac, dx, Fx, cols1, cols2, dcols1, dcols2):
    """Single-sample state derivative and (optionally) d f/d x.

    ``cols1``/``cols2`` receive the force/torque blocks of the allocation
    matrix at the sample's tilt angle; ``dcols*`` their tilt derivatives.
    Returns 1 when the pitch singularity guard is violated.
    """
    phi = x[6]
    th = x[7]
    psi = x[8]
    if abs(th) >= np.pi / 2.0 - 0.087:
        return 1

    cf = np.cos(phi)
    sf = np.sin(phi)
    ct = np.cos(th)
    st = np.sin(th)
    cp = np.cos(psi)
    sp = np.sin(psi)
    tt = st / ct

    # Body-to-world rotation (3-2-1 Euler).
    R00 = ct * cp
    R01 = sf * st * cp - cf * sp
    R02 = sf * sp + cf * st * cp
    R10 = ct * sp
    R11 = cf * cp + sf * st * sp
    R12 = cf * st * sp - sf * cp
    R20 = -st
    R21 = sf * ct
    R22 = cf * ct

    # Allocation columns at the current tilt angle.
    if tiltable:
        alpha = x[F0 + n]
        for i in range(n):
            sa = np.sin(tsign[i] * alpha)
            ca = np.cos(tsign[i] * alpha)
            l0 = sb[i]
            l1 = -sa * cb[i]
            l2 = ca * cb[i]
            d1 = -tsign[i] * ca * cb[i]
            d2 = -tsign[i] * sa * cb[i]
            for r in range(3):
                a = rz[i, r, 0] * l0 + rz[i, r, 1] * l1 + rz[i, r, 2] * l2
                cols1[r, i] = a
                dcols1[r, i] = rz[i, r, 1] * d1 + rz[i, r, 2] * d2
            for r in range(3):
                cols2[r, i] = (lever[i, r, 0] * cols1[0, i]
                               + lever[i, r, 1] * cols1[1, i]
                               + lever[i, r, 2] * cols1[2, i])
                dcols2[r, i] = (lever[i, r, 0] * dcols1[0, i]
                                + lever[i, r, 1] * dcols1[1, i]
                                + lever[i, r, 2] * dcols1[2, i])
    else:
        for i in range(n):
            for r in range(3):
                cols1[r, i] = Gfix[r, i]
                cols2[r, i] = Gfix[3 + r, i]

    fb0 = 0.0
    fb1 = 0.0
    fb2 = 0.0
    tb0 = 0.0
    tb1 = 0.0
    tb2 = 0.0
    for i in range(n):
        g_i = x[F0 + i]
        fb0 += cols1[0, i] * g_i
        fb1 += cols1[1, i] * g_i
        fb2 += cols1[2, i] * g_i
        tb0 += cols2[0, i] * g_i
        tb1 += cols2[1, i] * g_i
        tb2 += cols2[2, i] * g_i
    fb0 /= mass
    fb1 /= mass
    fb2 /= mass

    w0 = x[9]
    w1 = x[10]
    w2 = x[11]

    for k in range(3):
        dx[k] = x[3 + k]
    Rfb0 = R00 * fb0 + R01 * fb1 + R02 * fb2
    Rfb1 = R10 * fb0 + R11 * fb1 + R12 * fb2
    Rfb2 = R20 * fb0 + R21 * fb1 + R22 * fb2
    dx[3] = Rfb0
    dx[4] = Rfb1
    dx[5] = Rfb2 - gravity

    # eta_dot = T^-1 omega.
    dx[6] = w0 + sf * tt * w1 + cf * tt * w2
    dx[7] = cf * w1 - sf * w2
    dx[8] = (sf * w1 + cf * w2) / ct

    # omega_dot = Jinv (tau - omega x J omega).
    Jw0 = J[0, 0] * w0 + J[0, 1] * w1 + J[0, 2] * w2
    Jw1 = J[1, 0] * w0 + J[1, 1] * w1 + J[1, 2] * w2
    Jw2 = J[2, 0] * w0 + J[2, 1] * w1 + J[2, 2] * w2
    m0 = tb0 - (w1 * Jw2 - w2 * Jw1)
    m1 = tb1 - (w2 * Jw0 - w0 * Jw2)
    m2 = tb2 - (w0 * Jw1 - w1 * Jw0)
    dx[9] = Jinv[0, 0] * m0 + Jinv[0, 1] * m1 + Jinv[0, 2] * m2
    dx[10] = Jinv[1, 0] * m0 + Jinv[1, 1] * m1 + Jinv[1, 2] * m2
    dx[11] = Jinv[2, 0] * m0 + Jinv[2, 1] * m1 + Jinv[2, 2] * m2

    for i in range(n):
        dx[F0 + i] = u[i]
    if tiltable:
        dx[F0 + n] = u[n]

    if not need_jac:
        return 0

    nx = x.shape[0]
    for r in range(nx):
        for c in range(nx):
            Fx[r, c] = 0.0
    Fx[0, 3] = 1.0
    Fx[1, 4] = 1.0
    Fx[2, 5] = 1.0

    # d v_dot/d eta: columns R (e1 x fb), R ((Rx^T e2) x fb), e3 x (R fb).
    a0 = 0.0
    a1 = -fb2
    a2 = fb1
    Fx[3, 6] = R00 * a0 + R01 * a1 + R02 * a2
    Fx[4, 6] = R10 * a0 + R11 * a1 + R12 * a2
    Fx[5, 6] = R20 * a0 + R21 * a1 + R22 * a2
    # c2 = (0, cf, -sf); c2 x fb:
    b0 = cf * fb2 + sf * fb1
    b1 = -sf * fb0
    b2 = -cf * fb0
    Fx[3, 7] = R00 * b0 + R01 * b1 + R02 * b2
    Fx[4, 7] = R10 * b0 + R11 * b1 + R12 * b2
    Fx[5, 7] = R20 * b0 + R21 * b1 + R22 * b2
    Fx[3, 8] = -Rfb1
    Fx[4, 8] = Rfb0

    for i in range(n):
        Fx[3, F0 + i] = (R00 * cols1[0, i] + R01 * cols1[1, i] + R02 * cols1[2, i]) / mass
        Fx[4, F0 + i] = (R10 * cols1[0, i] + R11 * cols1[1, i] + R12 * cols1[2, i]) / mass
        Fx[5, F0 + i] = (R20 * cols1[0, i] + R21 * cols1[1, i] + R22 * cols1[2, i]) / mass

    # d eta_dot/d (phi, theta) and T^-1 block.
    aa = sf * w1 + cf * w2
    bb = cf * w1 - sf * w2
    Fx[6, 6] = bb * tt
    Fx[7, 6] = -aa
    Fx[8, 6] = bb / ct
    Fx[6, 7] = aa / (ct * ct)
    Fx[8, 7] = aa * tt / ct
    Fx[6, 9] = 1.0
    Fx[6, 10] = sf * tt
    Fx[6, 11] = cf * tt
    Fx[7, 10] = cf
    Fx[7, 11] = -sf
    Fx[8, 10] = sf / ct
    Fx[8, 11] = cf / ct

    # d omega_dot/d omega = Jinv ([J w]x - [w]x J).
    # M = skew(Jw) - skew(w) J, columns assembled explicitly.
    M00 = -(w1 * J[2, 0] - w2 * J[1, 0])
    M01 = -Jw2 - (w1 * J[2, 1] - w2 * J[1, 1])
    M02 = Jw1 - (w1 * J[2, 2] - w2 * J[1, 2])
    M10 = Jw2 - (w2 * J[0, 0] - w0 * J[2, 0])
    M11 = -(w2 * J[0, 1] - w0 * J[2, 1])
    M12 = -Jw0 - (w2 * J[0, 2] - w0 * J[2, 2])
    M20 = -Jw1 - (w0 * J[1, 0] - w1 * J[0, 0])
    M21 = Jw0 - (w0 * J[1, 1] - w1 * J[0, 1])
    M22 = -(w0 * J[1, 2] - w1 * J[0, 2])
    for r in range(3):
        Fx[9 + r, 9] = Jinv[r, 0] * M00 + Jinv[r, 1] * M10 + Jinv[r, 2] * M20
        Fx[9 + r, 10] = Jinv[r, 0] * M01 + Jinv[r, 1] * M11 + Jinv[r, 2] * M21
        Fx[9 + r, 11] = Jinv[r, 0] * M02 + Jinv[r, 1] * M12 + Jinv[r, 2] * M22
    for i in range(n):
        for r in range(3):
            Fx[9 + r, F0 + i] = (Jinv[r, 0] * cols2[0, i]
                                 + Jinv[r, 1] * cols2[1, i]
                                 + Jinv[r, 2] * cols2[2, i])

    if tiltable:
        dw0 = 0.0
        dw1 = 0.0
        dw2 = 0.0
        dt0 = 0.0
        dt1 = 0.0
        dt2 = 0.0
        for i in range(n):
            g_i = x[F0 + i]
            dw0 += dcols1[0, i] * g_i
            dw1 += dcols1[1, i] * g_i
            dw2 += dcols1[2, i] * g_i
            dt0 += dcols2[0, i] * g_i
            dt1 += dcols2[1, i] * g_i
            dt2 += dcols2[2, i] * g_i
        tc = F0 + n
        Fx[3, tc] = (R00 * dw0 + R01 * dw1 + R02 * dw2) / mass
        Fx[4, tc] = (R10 * dw0 + R11 * dw1 + R12 * dw2) / mass
        Fx[5, tc] = (R20 * dw0 + R21 * dw1 + R22 * dw2) / mass
        Fx[9, tc] = Jinv[0, 0] * dt0 + Jinv[0, 1] * dt1 + Jinv[0, 2] * dt2
        Fx[10, tc] = Jinv[1, 0] * dt0 + Jinv[1, 1] * dt1 + Jinv[1, 2] * dt2
        Fx[11, tc] = Jinv[2, 0] * dt0 + Jinv[2, 1] * dt1 + Jinv[2, 2] * dt2

    return 0


@njit(cache=True)
def rk4_kernel(X, U, h, substeps, mass, gravity, J, Jinv, Gfix, tiltable,
               rz, lever, tsign, cb, sb, n, fdist, taudist):
    """Batched RK4 step with a constant disturbance wrench; returns
    (X_next, error_flag).  ``fdist`` is a world-frame force, ``taudist``
    a body-frame torque."""
    B, nx = X.shape
    out = X.copy()
    k1 = np.empty(nx)
    k2 = np.empty(nx)
    k3 = np.empty(nx)
    k4 = np.empty(nx)
    xs = np.empty(nx)
    Fx = np.empty((1, 1))
    cols1 = np.empty((3, n))
    cols2 = np.empty((3, n))
    dcols1 = np.empty((3, n))
    dcols2 = np.empty((3, n))
    dv = np.empty(3)
    dw = np.empty(3)
    for r in range(3):
        dv[r] = fdist[r] / mass
        dw[r] = Jinv[r, 0] * taudist[0] + Jinv[r, 1] * taudist[1] + Jinv[r, 2] * taudist[2]
    for b in range(B):
        x = out[b]
        u = U[b]
        for _ in range(substeps):
            err = _dyn_jac(x, u, mass, gravity, J, Jinv, Gfix, tiltable, rz,
                           lever, tsign, cb, sb, n, False, k1, Fx,
                           cols1, cols2, dcols1, dcols2)
            if err:
                return out, 1
            for r in range(3):
                k1[3 + r] += dv[r]
                k1[9 + r] += dw[r]
            for j in range(nx):
                xs[j] = x[j] + 0.5 * h * k1[j]
            err = _dyn_jac(xs, u, mass, gravity, J, Jinv, Gfix, tiltable, rz,
                           lever, tsign, cb, sb, n, False, k2, Fx,
                           cols1, cols2, dcols1, dcols2)
            if err:
                return out, 1
            for r in range(3):
                k2[3 + r] += dv[r]
                k2[9 + r] += dw[r]
            for j in range(nx):
                xs[j] = x[j] + 0.5 * h * k2[j]
            err = _dyn_jac(xs, u, mass, gravity, J, Jinv, Gfix, tiltable, rz,
                           lever, tsign, cb, sb, n, False, k3, Fx,
                           cols1, cols2, dcols1, dcols2)
            if err:
                return out, 1
            for r in range(3):
                k3[3 + r] += dv[r]
                k3[9 + r] += dw[r]
            for j in range(nx):
                xs[j] = x[j] + h * k3[j]
            err = _dyn_jac(xs, u, mass, gravity, J, Jinv, Gfix, tiltable, rz,
                           lever, tsign, cb, sb, n, False, k4, Fx,
                           cols1, cols2, dcols1, dcols2)
            if err:
                return out, 1
            for r in range(3):
                k4[3 + r] += dv[r]
                k4[9 + r] += dw[r]
            for j in range(nx):
                x[j] += (h / 6.0) * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
    return out, 0


@njit(cache=True)
def rk4_sens_kernel(X, U, h, substeps, mass, gravity, J, Jinv, Gfix, tiltable,
                    rz, lever, tsign, cb, sb, n):
    """Batched RK4 step with sensitivities; returns (X_next, A, B, err)."""
    B, nx = X.shape
    nu = U.shape[1]
    nz = nx + nu
    out = X.copy()
    Aout = np.empty((B, nx, nx))
    Bout = np.empty((B, nx, nu))

    ks = np.empty((4, nx))
    dks = np.empty((4, nx, nz))
    xs = np.empty(nx)
    S = np.empty((nx, nz))
    Ss = np.empty((nx, nz))
    Fx = np.empty((nx, nx))
    cols1 = np.empty((3, n))
    cols2 = np.empty((3, n))
    dcols1 = np.empty((3, n))
    dcols2 = np.empty((3, n))
    stage_c = np.array([0.0, 0.5, 0.5, 1.0])

    for b in range(B):
        x = out[b]
        u = U[b]
        for r in range(nx):
            for c in range(nz):
                S[r, c] = 1.0 if r == c else 0.0
        for _ in range(substeps):
            for stage in range(4):
                csc = stage_c[stage] * h
                if stage == 0:
                    for j in range(nx):
                        xs[j] = x[j]
                        for c in range(nz):
                            Ss[j, c] = S[j, c]
                else:
                    for j in range(nx):
                        xs[j] = x[j] + csc * ks[stage - 1, j]
                        for c in range(nz):
                            Ss[j, c] = S[j, c] + csc * dks[stage - 1, j, c]
                err = _dyn_jac(xs, u, mass, gravity, J, Jinv, Gfix, tiltable,
                               rz, lever, tsign, cb, sb, n, True, ks[stage],
                               Fx, cols1, cols2, dcols1, dcols2)
                if err:
                    return out, Aout, Bout, 1
                # dk = Fx @ Ss + [0 | Fu];  only rows 0..11 of Fx are nonzero
                # and the input block is the identity on the force rates.
                dk = dks[stage]
                for r in range(12):
                    for c in range(nz):
                        acc = 0.0
                        for j in range(12 + n + (1 if tiltable else 0)):
                            acc += Fx[r, j] * Ss[j, c]
                        dk[r, c] = acc
                for i in range(n):
                    for c in range(nz):
                        dk[F0 + i, c] = 0.0
                    dk[F0 + i, nx + i] = 1.0
                if tiltable:
                    for c in range(nz):
                        dk[F0 + n, c] = 0.0
                    dk[F0 + n, nx + n] = 1.0
            for j in range(nx):
                x[j] += (h / 6.0) * (ks[0, j] + 2.0 * ks[1, j] + 2.0 * ks[2, j] + ks[3, j])
                for c in range(nz):
                    S[j, c] += (h / 6.0) * (dks[0, j, c] + 2.0 * dks[1, j, c]
                                            + 2.0 * dks[2, j, c] + dks[3, j, c])
        for r in range(nx):
            for c in range(nx):
                Aout[b, r, c] = S[r, c]
            for c in range(nu):
                Bout[b, r, c] = S[r, nx + c]
    return out, Aout, Bout, 0
