"""Hot numeric kernels: dynamics, RK4, network derivatives, closed loops, iLQR.

Everything here is compiled with numba unless ``ZDP_DISABLE_NUMBA`` is set
(see ``_jit``). Systems are identified by an integer ``kind`` plus a flat
parameter vector so that the kernels stay free of Python objects:

* ``CARTPOLE``: ``params = [m_c, m_p, l, g, damping_threshold]``, state
  ``zeta = (x, xdot, theta, p_theta)``.
* ``LINEAR``: ``params = [A.ravel(), B]`` for ``zeta_dot = A zeta + B v``.

All kernels assume a single scalar input.
"""

import numpy as np

from ._jit import njit

CARTPOLE = 0
LINEAR = 1

CTRL_ZERO = 0
CTRL_LINEAR = 1  # v = -K zeta
CTRL_ZDP = 2  # output tracking of a network/linear ZDP

ACT_RELU = 0
ACT_TANH = 1

STATUS_OK = 0
STATUS_ESCAPED = 1
STATUS_NONFINITE = 2


# --------------------------------------------------------------------------
# dynamics
# --------------------------------------------------------------------------


@njit
def cartpole_damping(xdot, threshold):
    if abs(xdot) < threshold:
        return 0.0
    return xdot


@njit
def zeta_rhs(kind, gamma, params, zeta, v):
    out = np.empty(zeta.shape[0])
    _zeta_rhs_into(kind, gamma, params, zeta, v, out)
    return out


@njit
def _zeta_rhs_into(kind, gamma, params, zeta, v, out):
    n = zeta.shape[0]
    if kind == CARTPOLE:
        mc = params[0]
        mp = params[1]
        ln = params[2]
        g = params[3]
        xd = zeta[1]
        th = zeta[2]
        pth = zeta[3]
        s = np.sin(th)
        c = np.cos(th)
        thd = (pth - mp * ln * xd * c) / (mp * ln * ln)
        den = mc + mp * s * s
        d = cartpole_damping(xd, params[4])
        out[0] = xd
        out[1] = (v - d + mp * ln * s * thd * thd - mp * g * s * c) / den
        out[2] = thd
        out[3] = mp * ln * s * (g - xd * thd)
    else:
        for i in range(n):
            acc = params[n * n + i] * v
            for j in range(n):
                acc += params[i * n + j] * zeta[j]
            out[i] = acc


@njit
def input_vector(kind, gamma, params, zeta):
    """Column multiplying the scalar input in ``zeta_rhs``."""
    out = np.empty(zeta.shape[0])
    _input_vector_into(kind, gamma, params, zeta, out)
    return out


@njit
def _input_vector_into(kind, gamma, params, zeta, out):
    n = zeta.shape[0]
    if kind == CARTPOLE:
        s = np.sin(zeta[2])
        for i in range(n):
            out[i] = 0.0
        out[1] = 1.0 / (params[0] + params[1] * s * s)
    else:
        for i in range(n):
            out[i] = params[n * n + i]


@njit
def fhat_ghat(kind, gamma, params, zeta):
    """Raw output-coordinate dynamics ``eta_dot = fhat + ghat v``."""
    f = zeta_rhs(kind, gamma, params, zeta, 0.0)
    gv = input_vector(kind, gamma, params, zeta)
    return f[:gamma].copy(), gv[:gamma].copy()


@njit
def omega(kind, gamma, params, zeta):
    f = zeta_rhs(kind, gamma, params, zeta, 0.0)
    return f[gamma:].copy()


@njit
def omega_jacobian(kind, gamma, params, zeta):
    """d omega / d zeta, shape (n_z, n)."""
    n = zeta.shape[0]
    nz = n - gamma
    jac = np.zeros((nz, n))
    if kind == CARTPOLE:
        mp = params[1]
        ln = params[2]
        g = params[3]
        xd = zeta[1]
        th = zeta[2]
        pth = zeta[3]
        s = np.sin(th)
        c = np.cos(th)
        w1 = (pth - mp * ln * xd * c) / (mp * ln * ln)
        dw_dxd = -c / ln
        dw_dth = xd * s / ln
        dw_dp = 1.0 / (mp * ln * ln)
        jac[0, 1] = dw_dxd
        jac[0, 2] = dw_dth
        jac[0, 3] = dw_dp
        jac[1, 1] = mp * ln * s * (-w1 - xd * dw_dxd)
        jac[1, 2] = mp * ln * c * (g - xd * w1) - mp * ln * s * xd * dw_dth
        jac[1, 3] = -mp * ln * s * xd * dw_dp
    else:
        for i in range(nz):
            for j in range(n):
                jac[i, j] = params[(gamma + i) * n + j]
    return jac


@njit
def rhs_jacobian_fd(kind, gamma, params, zeta, v, step):
    """d zeta_rhs / d zeta by central differences."""
    n = zeta.shape[0]
    jac = np.empty((n, n))
    xp = zeta.copy()
    for j in range(n):
        xp[j] = zeta[j] + step
        fp = zeta_rhs(kind, gamma, params, xp, v)
        xp[j] = zeta[j] - step
        fm = zeta_rhs(kind, gamma, params, xp, v)
        xp[j] = zeta[j]
        for i in range(n):
            jac[i, j] = (fp[i] - fm[i]) / (2.0 * step)
    return jac


@njit
def rhs_jacobian(kind, gamma, params, zeta, v, step):
    """d zeta_rhs / d zeta, analytic.

    The damping switch contributes its one-sided slope at the evaluation
    point (1 outside the dead zone, 0 inside). ``step`` is unused and kept
    for signature parity with :func:`rhs_jacobian_fd`.
    """
    n = zeta.shape[0]
    jac = np.empty((n, n))
    _rhs_jacobian_into(kind, gamma, params, zeta, v, jac)
    return jac


@njit
def _rhs_jacobian_into(kind, gamma, params, zeta, v, jac):
    n = zeta.shape[0]
    if kind == LINEAR:
        for i in range(n):
            for j in range(n):
                jac[i, j] = params[i * n + j]
        return
    for i in range(n):
        for j in range(n):
            jac[i, j] = 0.0
    mc = params[0]
    mp = params[1]
    ln = params[2]
    g = params[3]
    xd = zeta[1]
    th = zeta[2]
    pth = zeta[3]
    s = np.sin(th)
    c = np.cos(th)
    thd = (pth - mp * ln * xd * c) / (mp * ln * ln)
    dthd_xd = -c / ln
    dthd_th = xd * s / ln
    dthd_p = 1.0 / (mp * ln * ln)
    den = mc + mp * s * s
    d = cartpole_damping(xd, params[4])
    dd = 0.0 if abs(xd) < params[4] else 1.0
    num = v - d + mp * ln * s * thd * thd - mp * g * s * c
    dn_xd = -dd + 2.0 * mp * ln * s * thd * dthd_xd
    dn_th = mp * ln * c * thd * thd + 2.0 * mp * ln * s * thd * dthd_th - mp * g * (c * c - s * s)
    dn_p = 2.0 * mp * ln * s * thd * dthd_p
    dden_th = 2.0 * mp * s * c
    jac[0, 1] = 1.0
    jac[1, 1] = dn_xd / den
    jac[1, 2] = (dn_th * den - num * dden_th) / (den * den)
    jac[1, 3] = dn_p / den
    jac[2, 1] = dthd_xd
    jac[2, 2] = dthd_th
    jac[2, 3] = dthd_p
    jac[3, 1] = mp * ln * s * (-thd - xd * dthd_xd)
    jac[3, 2] = mp * ln * c * (g - xd * thd) - mp * ln * s * xd * dthd_th
    jac[3, 3] = -mp * ln * s * xd * dthd_p


@njit
def rk4_step(kind, gamma, params, zeta, v, dt):
    """One RK4 step with the input held constant over the step."""
    n = zeta.shape[0]
    out = np.empty(n)
    _rk4_step_into(kind, gamma, params, zeta, v, dt, np.empty((5, n)), out)
    return out


@njit
def _rk4_stage_point(zeta, h, k, out):
    for i in range(zeta.shape[0]):
        out[i] = zeta[i] + h * k[i]


@njit
def _rk4_step_into(kind, gamma, params, zeta, v, dt, vec, out):
    """Allocation-free :func:`rk4_step`; ``vec`` is a (5, n) scratch array."""
    k1 = vec[0]
    k2 = vec[1]
    k3 = vec[2]
    k4 = vec[3]
    xst = vec[4]
    _zeta_rhs_into(kind, gamma, params, zeta, v, k1)
    _rk4_stage_point(zeta, 0.5 * dt, k1, xst)
    _zeta_rhs_into(kind, gamma, params, xst, v, k2)
    _rk4_stage_point(zeta, 0.5 * dt, k2, xst)
    _zeta_rhs_into(kind, gamma, params, xst, v, k3)
    _rk4_stage_point(zeta, dt, k3, xst)
    _zeta_rhs_into(kind, gamma, params, xst, v, k4)
    h = dt / 6.0
    for i in range(zeta.shape[0]):
        out[i] = zeta[i] + h * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])


@njit
def _stage(jac, dprev, dprev_u, h, gvec, out, out_u):
    """out = jac (I + h dprev), out_u = jac (h dprev_u) + gvec, without BLAS."""
    n = jac.shape[0]
    for i in range(n):
        acc_u = gvec[i]
        for k in range(n):
            acc_u += jac[i, k] * h * dprev_u[k]
        out_u[i] = acc_u
        for j in range(n):
            acc = jac[i, j]
            for k in range(n):
                acc += jac[i, k] * h * dprev[k, j]
            out[i, j] = acc


@njit
def rk4_step_jacobian(kind, gamma, params, zeta, v, dt, step):
    """RK4 step plus its Jacobians (A_d, B_d), chained through the stages."""
    n = zeta.shape[0]
    nxt = np.empty(n)
    ad = np.empty((n, n))
    bd = np.empty(n)
    _rk4_step_jacobian_into(kind, gamma, params, zeta, v, dt, step, np.empty((10, n)), np.empty((5, n, n)),
                            nxt, ad, bd)
    return nxt, ad, bd


@njit
def _rk4_step_jacobian_into(kind, gamma, params, zeta, v, dt, step, vec, mat, nxt, ad, bd):
    """Allocation-free :func:`rk4_step_jacobian` with (10, n) and (5, n, n) scratch arrays."""
    n = zeta.shape[0]
    k1 = vec[0]
    k2 = vec[1]
    k3 = vec[2]
    k4 = vec[3]
    xst = vec[4]
    gvec = vec[5]
    dk1u = vec[6]
    dk2u = vec[7]
    dk3u = vec[8]
    dk4u = vec[9]
    jac = mat[0]
    dk1 = mat[1]
    dk2 = mat[2]
    dk3 = mat[3]
    dk4 = mat[4]

    _zeta_rhs_into(kind, gamma, params, zeta, v, k1)
    _rhs_jacobian_into(kind, gamma, params, zeta, v, jac)
    _input_vector_into(kind, gamma, params, zeta, dk1u)
    for i in range(n):
        for j in range(n):
            dk1[i, j] = jac[i, j]
    _rk4_stage_point(zeta, 0.5 * dt, k1, xst)
    _zeta_rhs_into(kind, gamma, params, xst, v, k2)
    _rhs_jacobian_into(kind, gamma, params, xst, v, jac)
    _input_vector_into(kind, gamma, params, xst, gvec)
    _stage(jac, dk1, dk1u, 0.5 * dt, gvec, dk2, dk2u)
    _rk4_stage_point(zeta, 0.5 * dt, k2, xst)
    _zeta_rhs_into(kind, gamma, params, xst, v, k3)
    _rhs_jacobian_into(kind, gamma, params, xst, v, jac)
    _input_vector_into(kind, gamma, params, xst, gvec)
    _stage(jac, dk2, dk2u, 0.5 * dt, gvec, dk3, dk3u)
    _rk4_stage_point(zeta, dt, k3, xst)
    _zeta_rhs_into(kind, gamma, params, xst, v, k4)
    _rhs_jacobian_into(kind, gamma, params, xst, v, jac)
    _input_vector_into(kind, gamma, params, xst, gvec)
    _stage(jac, dk3, dk3u, dt, gvec, dk4, dk4u)

    h = dt / 6.0
    for i in range(n):
        nxt[i] = zeta[i] + h * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        bd[i] = h * (dk1u[i] + 2.0 * dk2u[i] + 2.0 * dk3u[i] + dk4u[i])
        for j in range(n):
            ad[i, j] = h * (dk1[i, j] + 2.0 * dk2[i, j] + 2.0 * dk3[i, j] + dk4[i, j])
        ad[i, i] += 1.0


# --------------------------------------------------------------------------
# feed-forward network with input derivatives
# --------------------------------------------------------------------------


@njit
def _act(s, act):
    if act == ACT_TANH:
        t = np.tanh(s)
        return t, 1.0 - t * t, -2.0 * t * (1.0 - t * t)
    if s > 0.0:
        return s, 1.0, 0.0
    return 0.0, 0.0, 0.0


@njit
def mlp_eval(weights, biases, sizes, act, z):
    """Network value, input Jacobian, and input Hessian of output 0.

    ``weights``/``biases`` are the row-major layer arrays concatenated;
    ``sizes = [n_in, h_1, ..., n_out]``. Hidden layers apply ``act``;
    the last layer is affine.
    """
    n_in = sizes[0]
    n_layers = sizes.shape[0] - 1
    a = z.copy()
    da = np.eye(n_in)
    dda = np.zeros((n_in, n_in, n_in))
    woff = 0
    boff = 0
    for layer in range(n_layers):
        m_in = sizes[layer]
        m_out = sizes[layer + 1]
        s = np.empty(m_out)
        ds = np.zeros((m_out, n_in))
        dds = np.zeros((m_out, n_in, n_in))
        for i in range(m_out):
            acc = biases[boff + i]
            for j in range(m_in):
                w = weights[woff + i * m_in + j]
                if w == 0.0:
                    continue
                acc += w * a[j]
                for p in range(n_in):
                    ds[i, p] += w * da[j, p]
                    for q in range(n_in):
                        dds[i, p, q] += w * dda[j, p, q]
            s[i] = acc
        woff += m_in * m_out
        boff += m_out
        if layer == n_layers - 1:
            a = s
            da = ds
            dda = dds
        else:
            a = np.empty(m_out)
            da = np.empty((m_out, n_in))
            dda = np.empty((m_out, n_in, n_in))
            for i in range(m_out):
                h, h1, h2 = _act(s[i], act)
                a[i] = h
                for p in range(n_in):
                    da[i, p] = h1 * ds[i, p]
                    for q in range(n_in):
                        dda[i, p, q] = h2 * ds[i, p] * ds[i, q] + h1 * dds[i, p, q]
    return a, da, dda[0].copy()


# --------------------------------------------------------------------------
# controllers and closed-loop simulation
# --------------------------------------------------------------------------


@njit
def zdp_tracking_input(kind, gamma, params, zeta, weights, biases, sizes, act, kp, kd, p_tol):
    """Physical input tracking eta_1 -> psi_1(z) for relative degree two.

    Returns ``(v, p)``; ``v`` is NaN when ``|p| < p_tol``.
    """
    nz = zeta.shape[0] - gamma
    z = zeta[gamma:].copy()
    val, jac, hess = mlp_eval(weights, biases, sizes, act, z)
    om = omega(kind, gamma, params, zeta)
    dom = omega_jacobian(kind, gamma, params, zeta)
    grad = jac[0]
    e1 = zeta[0] - val[0]
    lie = 0.0
    p = 1.0
    for i in range(nz):
        lie += grad[i] * om[i]
        p -= grad[i] * dom[i, 1]
    e2 = zeta[1] - lie
    drift = 0.0
    for i in range(nz):
        for j in range(nz):
            drift += om[i] * hess[i, j] * om[j]
    for i in range(nz):
        acc = dom[i, 0] * zeta[1]
        for j in range(nz):
            acc += dom[i, gamma + j] * om[j]
        drift += grad[i] * acc
    if abs(p) < p_tol:
        return np.nan, p
    u_aux = (drift - kp * e1 - kd * e2) / p
    fh, gh = fhat_ghat(kind, gamma, params, zeta)
    return (u_aux - fh[gamma - 1]) / gh[gamma - 1], p


@njit
def control_input(kind, gamma, params, ctrl_kind, gain, weights, biases, sizes, act, kp, kd, p_tol, zeta):
    if ctrl_kind == CTRL_LINEAR:
        v = 0.0
        for i in range(zeta.shape[0]):
            v -= gain[i] * zeta[i]
        return v
    if ctrl_kind == CTRL_ZDP:
        v, _ = zdp_tracking_input(kind, gamma, params, zeta, weights, biases, sizes, act, kp, kd, p_tol)
        return v
    return 0.0


@njit
def closed_loop_rhs(kind, gamma, params, ctrl_kind, gain, weights, biases, sizes, act, kp, kd, p_tol, zeta):
    v = control_input(kind, gamma, params, ctrl_kind, gain, weights, biases, sizes, act, kp, kd, p_tol, zeta)
    return zeta_rhs(kind, gamma, params, zeta, v), v


@njit
def simulate_closed_loop(kind, gamma, params, ctrl_kind, gain, weights, biases, sizes, act, kp, kd, p_tol,
                         zeta0, dt, n_steps, escape):
    """RK4 with the feedback law re-evaluated at every stage.

    Returns ``(states, inputs, status, n_done)``; rows past ``n_done`` are NaN.
    """
    n = zeta0.shape[0]
    states = np.full((n_steps + 1, n), np.nan)
    inputs = np.full(n_steps + 1, np.nan)
    x = zeta0.copy()
    states[0] = x
    status = STATUS_OK
    done = 0
    for k in range(n_steps):
        k1, v = closed_loop_rhs(kind, gamma, params, ctrl_kind, gain, weights, biases, sizes, act, kp, kd, p_tol, x)
        inputs[k] = v
        k2, _ = closed_loop_rhs(kind, gamma, params, ctrl_kind, gain, weights, biases, sizes, act, kp, kd, p_tol,
                                x + 0.5 * dt * k1)
        k3, _ = closed_loop_rhs(kind, gamma, params, ctrl_kind, gain, weights, biases, sizes, act, kp, kd, p_tol,
                                x + 0.5 * dt * k2)
        k4, _ = closed_loop_rhs(kind, gamma, params, ctrl_kind, gain, weights, biases, sizes, act, kp, kd, p_tol,
                                x + dt * k3)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        norm = 0.0
        finite = True
        for i in range(n):
            if not np.isfinite(x[i]):
                finite = False
            norm += x[i] * x[i]
        if not finite:
            status = STATUS_NONFINITE
            break
        states[k + 1] = x
        done = k + 1
        if np.sqrt(norm) > escape:
            status = STATUS_ESCAPED
            break
    if status == STATUS_OK:
        _, v = closed_loop_rhs(kind, gamma, params, ctrl_kind, gain, weights, biases, sizes, act, kp, kd, p_tol, x)
        inputs[n_steps] = v
    return states, inputs, status, done


# --------------------------------------------------------------------------
# iterative LQR
# --------------------------------------------------------------------------


@njit
def _rollout(kind, gamma, params, zeta0, uff, kfb, xref, alpha, dt, escape, q, r, pterm):
    n_steps = uff.shape[0]
    n = zeta0.shape[0]
    xs = np.empty((n_steps + 1, n))
    us = np.empty(n_steps)
    xs[0] = zeta0
    cost = 0.0
    x = zeta0.copy()
    vec = np.empty((5, n))
    for k in range(n_steps):
        u = alpha * uff[k]
        for i in range(n):
            u += kfb[k, i] * (x[i] - xref[k, i])
        us[k] = u
        cost += dt * (x @ (q @ x) + r * u * u)
        _rk4_step_into(kind, gamma, params, xs[k], u, dt, vec, x)
        nrm = np.sqrt(x @ x)
        if not np.isfinite(nrm) or nrm > escape:
            return xs, us, np.inf
        xs[k + 1] = x
    cost += x @ (pterm @ x)
    return xs, us, cost


@njit
def _backward(ads, bds, wxx, wux, wuu, xs, us, q, r, pterm, dt, mu):
    """Riccati-like sweep; returns (kff, kfb, expected decrease, ok).

    ``wxx, wux, wuu`` are the costate-weighted second derivatives of the step
    map (zero for the Gauss-Newton iteration).
    """
    n_steps = us.shape[0]
    n = xs.shape[1]
    kff = np.zeros(n_steps)
    kfb = np.zeros((n_steps, n))
    vx = np.empty(n)
    vxx = np.empty((n, n))
    xn = xs[n_steps]
    for i in range(n):
        acc = 0.0
        for j in range(n):
            acc += pterm[i, j] * xn[j]
            vxx[i, j] = 2.0 * pterm[i, j]
        vx[i] = 2.0 * acc
    qx = np.empty(n)
    qux = np.empty(n)
    vxx_b = np.empty(n)
    vxx_a = np.empty((n, n))
    qxx = np.empty((n, n))
    expected = 0.0
    for k in range(n_steps - 1, -1, -1):
        a = ads[k]
        b = bds[k]
        x = xs[k]
        u = us[k]
        for i in range(n):
            acc = 0.0
            for j in range(n):
                acc += vxx[i, j] * b[j]
            vxx_b[i] = acc
            for j in range(n):
                acc = 0.0
                for m in range(n):
                    acc += vxx[i, m] * a[m, j]
                vxx_a[i, j] = acc
        qu = 2.0 * dt * r * u
        quu = 2.0 * dt * r + wuu[k]
        for i in range(n):
            qu += b[i] * vx[i]
            quu += b[i] * vxx_b[i]
        for j in range(n):
            acc_x = 0.0
            acc_ux = wux[k, j]
            for i in range(n):
                acc_x += a[i, j] * vx[i]
                acc_ux += b[i] * vxx_a[i, j]
                acc_q = q[j, i] * x[i]
                acc_x += 2.0 * dt * acc_q
            qx[j] = acc_x
            qux[j] = acc_ux
        for i in range(n):
            for j in range(n):
                acc = 2.0 * dt * q[i, j] + wxx[k, i, j]
                for m in range(n):
                    acc += a[m, i] * vxx_a[m, j]
                qxx[i, j] = acc
        quu_reg = quu + mu
        if quu_reg <= 0.0:
            return kff, kfb, expected, False
        kk = -qu / quu_reg
        kff[k] = kk
        for i in range(n):
            kfb[k, i] = -qux[i] / quu_reg
        expected += kk * qu + 0.5 * kk * kk * quu
        kvec = kfb[k]
        for i in range(n):
            vx[i] = qx[i] + kvec[i] * (quu * kk) + kvec[i] * qu + qux[i] * kk
        for i in range(n):
            for j in range(i, n):
                val = qxx[i, j] + quu * kvec[i] * kvec[j] + kvec[i] * qux[j] + qux[i] * kvec[j]
                val2 = qxx[j, i] + quu * kvec[j] * kvec[i] + kvec[j] * qux[i] + qux[j] * kvec[i]
                vxx[i, j] = 0.5 * (val + val2)
                vxx[j, i] = vxx[i, j]
    return kff, kfb, expected, True


@njit
def _linearize_traj(kind, gamma, params, xs, us, dt, step):
    n_steps = us.shape[0]
    n = xs.shape[1]
    ads = np.empty((n_steps, n, n))
    bds = np.empty((n_steps, n))
    vec = np.empty((10, n))
    mat = np.empty((5, n, n))
    nxt = np.empty(n)
    for k in range(n_steps):
        _rk4_step_jacobian_into(kind, gamma, params, xs[k], us[k], dt, step, vec, mat, nxt, ads[k], bds[k])
    return ads, bds


@njit
def _second_order_terms(kind, gamma, params, xs, us, ads, bds, q, pterm, dt, jac_step, fd_step, wxx, wux, wuu):
    """Fill ``wxx, wux, wuu`` with the costate-weighted second derivatives of the step map.

    Forward differences of the step Jacobians about the nominal ones
    ``ads, bds`` (one extra Jacobian per coordinate).
    """
    n_steps = us.shape[0]
    n = xs.shape[1]
    # costates lam_{k+1} = V_x(x_{k+1}) from the first-order sweep
    lam = np.empty((n_steps + 1, n))
    for i in range(n):
        acc = 0.0
        for j in range(n):
            acc += pterm[i, j] * xs[n_steps, j]
        lam[n_steps, i] = 2.0 * acc
    for k in range(n_steps - 1, -1, -1):
        for j in range(n):
            acc = 0.0
            for i in range(n):
                acc += ads[k, i, j] * lam[k + 1, i] + 2.0 * dt * q[j, i] * xs[k, i]
            lam[k, j] = acc
    h = fd_step
    vec = np.empty((10, n))
    mat = np.empty((5, n, n))
    nxt = np.empty(n)
    ap = np.empty((n, n))
    bp = np.empty(n)
    x = np.empty(n)
    for k in range(n_steps):
        lk = lam[k + 1]
        for j in range(n):
            x[j] = xs[k, j]
        am = ads[k]
        bm = bds[k]
        for j in range(n):
            x[j] = xs[k, j] + h
            _rk4_step_jacobian_into(kind, gamma, params, x, us[k], dt, jac_step, vec, mat, nxt, ap, bp)
            x[j] = xs[k, j]
            acc_u = 0.0
            for i in range(n):
                acc_u += lk[i] * (bp[i] - bm[i])
            wux[k, j] = acc_u / h
            for m in range(n):
                acc = 0.0
                for i in range(n):
                    acc += lk[i] * (ap[i, m] - am[i, m])
                wxx[k, m, j] = acc / h
        _rk4_step_jacobian_into(kind, gamma, params, x, us[k] + h, dt, jac_step, vec, mat, nxt, ap, bp)
        acc_u = 0.0
        for i in range(n):
            acc_u += lk[i] * (bp[i] - bm[i])
        wuu[k] = acc_u / h
        for m in range(n):
            for j in range(m + 1, n):
                sym = 0.5 * (wxx[k, m, j] + wxx[k, j, m])
                wxx[k, m, j] = sym
                wxx[k, j, m] = sym


@njit
def ilqr_core(kind, gamma, params, zeta0, q, r, pterm, dt, init_uff, init_kfb, init_xref, max_iters, cost_tol,
              mu0, betas, escape, jac_step):
    """Iterative LQR on the RK4-discretised dynamics with a quadratic terminal cost.

    The initial trajectory is rolled out with ``u_k = init_uff[k] +
    init_kfb[k] (x_k - init_xref[k])``. Returns ``(xs, us, gains, cost,
    converged, iterations, status, history)``; ``gains[k]`` is du/dzeta of
    the local policy at step ``k``.
    """
    n_steps = init_uff.shape[0]
    history = np.full(max_iters + 1, np.nan)
    xs, us, cost = _rollout(kind, gamma, params, zeta0, init_uff, init_kfb, init_xref, 1.0, dt, escape, q, r, pterm)
    gains = np.zeros((n_steps, zeta0.shape[0]))
    if not np.isfinite(cost):
        return xs, us, gains, cost, False, 0, STATUS_ESCAPED, history
    history[0] = cost
    mu = mu0
    converged = False
    iters = 0
    zero_ref = np.zeros(n_steps)
    n = zeta0.shape[0]
    wxx = np.zeros((n_steps, n, n))
    wux = np.zeros((n_steps, n))
    wuu = np.zeros(n_steps)
    while iters < max_iters:
        if cost <= 1e-300:
            converged = True
            break
        ads, bds = _linearize_traj(kind, gamma, params, xs, us, dt, jac_step)
        ok = False
        kff = zero_ref
        kfb = gains
        expected = 0.0
        while not ok:
            kff, kfb, expected, ok = _backward(ads, bds, wxx, wux, wuu, xs, us, q, r, pterm, dt, mu)
            if not ok:
                mu = max(mu * 10.0, 1e-6)
                if mu > 1e10:
                    break
        if not ok:
            break
        iters += 1
        accepted = False
        for bi in range(betas.shape[0]):
            alpha = betas[bi]
            uff = us + alpha * kff
            nxs, nus, ncost = _rollout(kind, gamma, params, zeta0, uff, kfb, xs, 1.0, dt, escape, q, r, pterm)
            if ncost < cost:
                accepted = True
                break
        if accepted:
            rel = (cost - ncost) / max(cost, 1e-300)
            xs = nxs
            us = nus
            cost = ncost
            history[iters] = cost
            mu = mu / 10.0
            if mu < 1e-12:
                mu = 0.0
            if rel < cost_tol:
                converged = True
                break
        else:
            history[iters] = cost
            if expected > -1e-14 * max(cost, 1e-300):
                converged = True
                break
            mu = max(mu * 10.0, 1e-6)
            if mu > 1e10:
                break
    # refresh the local policy about the final nominal trajectory
    ads, bds = _linearize_traj(kind, gamma, params, xs, us, dt, jac_step)
    mu_final = 0.0
    ok = False
    while not ok:
        _, gains, _, ok = _backward(ads, bds, wxx, wux, wuu, xs, us, q, r, pterm, dt, mu_final)
        if not ok:
            mu_final = max(mu_final * 10.0, 1e-6)
            if mu_final > 1e10:
                break
    return xs, us, gains, cost, converged, iters, STATUS_OK, history


@njit
def ddp_gains(kind, gamma, params, xs, us, q, r, pterm, dt, jac_step, fd_step):
    """Exact sensitivity du_k/dzeta_k of a converged trajectory (full second-order sweep).

    The Gauss-Newton Hessians are augmented by the costate-weighted second
    derivatives of the step map, taken by central differences of its
    Jacobians. Returns ``(gains, ok)``; ``ok`` is False when the second-order
    input Hessian is not positive, i.e. the trajectory is not a strict minimum.
    """
    n_steps = us.shape[0]
    n = xs.shape[1]
    ads, bds = _linearize_traj(kind, gamma, params, xs, us, dt, jac_step)
    wxx = np.empty((n_steps, n, n))
    wux = np.empty((n_steps, n))
    wuu = np.empty(n_steps)
    _second_order_terms(kind, gamma, params, xs, us, ads, bds, q, pterm, dt, jac_step, fd_step, wxx, wux, wuu)
    _, gains, _, ok = _backward(ads, bds, wxx, wux, wuu, xs, us, q, r, pterm, dt, 0.0)
    return gains, ok
