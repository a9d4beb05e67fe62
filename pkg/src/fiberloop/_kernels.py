"""Compiled inner loops for the planar chain integrator.

Generalized coordinates are the absolute headings ``phi`` of the ``n`` rigid
segments; the chain root sits on the left gripper. Everything here works on
plain float64 arrays so it can be jitted with numba.
"""

import numpy as np
from numba import njit

OK = 0
DIVERGED = 1
PROJECTION_FAILED = 2


@njit(cache=True)
def mass_matrix(phi, h, m, out):
    # Lumped segment masses at midpoints plus the rod inertia m h^2 / 12.
    n = phi.shape[0]
    mh2 = m * h * h
    c = np.cos(phi)
    s = np.sin(phi)
    for j in range(n):
        out[j, j] = mh2 * (0.25 + (n - 1 - j) + 1.0 / 12.0)
        for k in range(j + 1, n):
            v = mh2 * (0.5 + (n - 1 - k)) * (c[j] * c[k] + s[j] * s[k])
            out[j, k] = v
            out[k, j] = v


@njit(cache=True)
def kinetic_energy(phi, rate, h, m):
    n = phi.shape[0]
    M = np.empty((n, n))
    mass_matrix(phi, h, m, M)
    return 0.5 * rate @ (M @ rate)


@njit(cache=True)
def midpoint_velocities(phi, rate, h, v_left, out):
    n = phi.shape[0]
    ax = v_left[0]
    ay = v_left[1]
    for i in range(n):
        px = -np.sin(phi[i]) * h * rate[i]
        py = np.cos(phi[i]) * h * rate[i]
        out[i, 0] = ax + 0.5 * px
        out[i, 1] = ay + 0.5 * py
        ax += px
        ay += py


@njit(cache=True)
def closure_residual(phi, h, delta, out):
    sx = 0.0
    sy = 0.0
    for i in range(phi.shape[0]):
        sx += np.cos(phi[i])
        sy += np.sin(phi[i])
    out[0] = h * sx - delta[0]
    out[1] = h * sy - delta[1]


@njit(cache=True)
def _cholesky(A, L):
    n = A.shape[0]
    for j in range(n):
        d = A[j, j]
        for p in range(j):
            d -= L[j, p] * L[j, p]
        d = np.sqrt(d)
        L[j, j] = d
        for i in range(j + 1, n):
            v = A[i, j]
            for p in range(j):
                v -= L[i, p] * L[j, p]
            L[i, j] = v / d
        for i in range(j):
            L[i, j] = 0.0


@njit(cache=True)
def _cho_solve(L, b, out):
    n = L.shape[0]
    for i in range(n):
        v = b[i]
        for p in range(i):
            v -= L[i, p] * out[p]
        out[i] = v / L[i, i]
    for i in range(n - 1, -1, -1):
        v = out[i]
        for p in range(i + 1, n):
            v -= L[p, i] * out[p]
        out[i] = v / L[i, i]


@njit(cache=True)
def _solve2(S, r, out):
    # Pseudo-inverse of a symmetric 2x2; the straight chain makes S rank one.
    a = S[0, 0]
    b = S[0, 1]
    d = S[1, 1]
    tr = a + d
    if tr <= 0.0:
        out[0] = 0.0
        out[1] = 0.0
        return
    disc = np.sqrt(max((a - d) * (a - d) * 0.25 + b * b, 0.0))
    l1 = 0.5 * tr + disc
    l2 = 0.5 * tr - disc
    if abs(b) > 1e-300 or abs(a - d) > 1e-300:
        # eigenvector of l1
        if abs(b) > 1e-300:
            e1x = l1 - d
            e1y = b
        elif a >= d:
            e1x = 1.0
            e1y = 0.0
        else:
            e1x = 0.0
            e1y = 1.0
        nrm = np.sqrt(e1x * e1x + e1y * e1y)
        e1x /= nrm
        e1y /= nrm
    else:
        e1x = 1.0
        e1y = 0.0
    e2x = -e1y
    e2y = e1x
    p1 = e1x * r[0] + e1y * r[1]
    p2 = e2x * r[0] + e2y * r[1]
    cut = 1e-12 * l1
    q1 = p1 / l1 if l1 > cut else 0.0
    q2 = p2 / l2 if l2 > cut else 0.0
    out[0] = q1 * e1x + q2 * e2x
    out[1] = q1 * e1y + q2 * e2y


@njit(cache=True)
def _constraint_jacobian(phi, free, h, G):
    for j in range(phi.shape[0]):
        if free[j]:
            G[0, j] = -h * np.sin(phi[j])
            G[1, j] = h * np.cos(phi[j])
        else:
            G[0, j] = 0.0
            G[1, j] = 0.0


@njit(cache=True)
def _project(phi, free, h, delta, L, G, Y, tol, max_iter):
    # Newton steps onto the closure manifold in the metric of the step matrix.
    n = phi.shape[0]
    g = np.empty(2)
    S = np.empty((2, 2))
    mu = np.empty(2)
    col = np.empty(n)
    y = np.empty(n)
    for it in range(max_iter):
        closure_residual(phi, h, delta, g)
        if np.sqrt(g[0] * g[0] + g[1] * g[1]) < tol:
            return True
        _constraint_jacobian(phi, free, h, G)
        for r in range(2):
            for j in range(n):
                col[j] = G[r, j]
            _cho_solve(L, col, y)
            for j in range(n):
                Y[j, r] = y[j]
        for a in range(2):
            for b in range(2):
                acc = 0.0
                for j in range(n):
                    acc += G[a, j] * Y[j, b]
                S[a, b] = acc
        _solve2(S, g, mu)
        for j in range(n):
            phi[j] -= Y[j, 0] * mu[0] + Y[j, 1] * mu[1]
    closure_residual(phi, h, delta, g)
    return np.sqrt(g[0] * g[0] + g[1] * g[1]) < tol


@njit(cache=True)
def project_closure(phi, free, h, delta, tol, max_iter):
    n = phi.shape[0]
    L = np.zeros((n, n))
    for j in range(n):
        L[j, j] = 1.0
    G = np.empty((2, n))
    Y = np.empty((n, 2))
    return _project(phi, free, h, delta, L, G, Y, tol, max_iter)


@njit(cache=True)
def advance(phi, rate, free, h, m, k, c, dt, n_sub,
            x_left, x_right, v_left, v_right,
            mu_load, v_stick, rate_limit, tol, energy_log):
    """Advance ``n_sub`` substeps in place; returns a status code.

    Each substep is a linearly implicit Euler step of the joint-space
    dynamics followed by a velocity correction keeping the right end on its
    gripper and a Newton projection of the headings onto the closure
    constraint. Gripper positions move linearly at ``v_left``/``v_right``.
    When ``energy_log`` has length ``n_sub + 1`` the elastic plus kinetic
    energy is written before and after every substep.
    """
    n = phi.shape[0]
    M = np.empty((n, n))
    A = np.empty((n, n))
    L = np.empty((n, n))
    G = np.empty((2, n))
    Y = np.empty((n, 2))
    rhs = np.empty(n)
    vstar = np.empty(n)
    col = np.empty(n)
    y = np.empty(n)
    grad = np.empty(n)
    gam = np.empty(n)
    suffix = np.empty(n)
    w = np.empty((n, 2))
    g = np.empty(2)
    S = np.empty((2, 2))
    mu = np.empty(2)
    target = np.empty(2)
    delta = np.empty(2)
    log_energy = energy_log.shape[0] == n_sub + 1
    friction = mu_load > 0.0
    cs = np.empty(n)
    sn = np.empty(n)

    if log_energy:
        energy_log[0] = _total_energy(phi, rate, h, m, k, M)

    for step in range(n_sub):
        tau = (step + 1) * dt
        delta[0] = (x_right[0] + v_right[0] * tau) - (x_left[0] + v_left[0] * tau)
        delta[1] = (x_right[1] + v_right[1] * tau) - (x_left[1] + v_left[1] * tau)

        mass_matrix(phi, h, m, M)
        for j in range(n):
            cs[j] = np.cos(phi[j])
            sn[j] = np.sin(phi[j])

        # elastic gradient k D^T D phi and the joint-space damping/stiffness
        for j in range(n):
            gj = 0.0
            if j > 0:
                gj += phi[j] - phi[j - 1]
            if j < n - 1:
                gj -= phi[j + 1] - phi[j]
            grad[j] = k * gj
        for j in range(n):
            for i in range(n):
                A[j, i] = M[j, i]
            deg = 0.0
            if j > 0:
                deg += 1.0
                A[j, j - 1] -= dt * c + dt * dt * k
            if j < n - 1:
                deg += 1.0
                A[j, j + 1] -= dt * c + dt * dt * k
            A[j, j] += deg * (dt * c + dt * dt * k)
            rhs[j] = M[j] @ rate - dt * grad[j]

        if friction:
            # lagged regularised Coulomb drag, applied implicitly
            midpoint_velocities(phi, rate, h, v_left, w)
            for i in range(n):
                speed = np.sqrt(w[i, 0] * w[i, 0] + w[i, 1] * w[i, 1])
                gam[i] = mu_load / max(speed, v_stick)
            acc = 0.0
            for i in range(n - 1, -1, -1):
                suffix[i] = acc
                acc += gam[i]
            hh = h * h
            for j in range(n):
                A[j, j] += dt * hh * (0.25 * gam[j] + suffix[j])
                for i in range(j + 1, n):
                    v = dt * hh * (0.5 * gam[i] + suffix[i]) * (cs[j] * cs[i] + sn[j] * sn[i])
                    A[j, i] += v
                    A[i, j] += v
                proj = -sn[j] * v_left[0] + cs[j] * v_left[1]
                rhs[j] -= dt * h * proj * (0.5 * gam[j] + suffix[j])

        for j in range(n):
            if not free[j]:
                for i in range(n):
                    A[j, i] = 0.0
                    A[i, j] = 0.0
                A[j, j] = 1.0
                rhs[j] = 0.0

        _cholesky(A, L)
        _cho_solve(L, rhs, vstar)

        closure_residual(phi, h, delta, g)
        target[0] = -g[0] / dt
        target[1] = -g[1] / dt
        _constraint_jacobian(phi, free, h, G)
        for r in range(2):
            for j in range(n):
                col[j] = G[r, j]
            _cho_solve(L, col, y)
            for j in range(n):
                Y[j, r] = y[j]
        for a in range(2):
            for b in range(2):
                acc = 0.0
                for j in range(n):
                    acc += G[a, j] * Y[j, b]
                S[a, b] = acc
            acc = 0.0
            for j in range(n):
                acc += G[a, j] * vstar[j]
            g[a] = target[a] - acc
        _solve2(S, g, mu)

        peak = 0.0
        for j in range(n):
            v = vstar[j] + Y[j, 0] * mu[0] + Y[j, 1] * mu[1]
            rate[j] = v
            phi[j] += dt * v
            if abs(v) > peak:
                peak = abs(v)
        if not (peak <= rate_limit):
            return DIVERGED
        if not _project(phi, free, h, delta, L, G, Y, tol, 12):
            return PROJECTION_FAILED
        if log_energy:
            energy_log[step + 1] = _total_energy(phi, rate, h, m, k, M)
    return OK


@njit(cache=True)
def _total_energy(phi, rate, h, m, k, M):
    mass_matrix(phi, h, m, M)
    el = 0.0
    for j in range(phi.shape[0] - 1):
        d = phi[j + 1] - phi[j]
        el += d * d
    return 0.5 * k * el + 0.5 * rate @ (M @ rate)
