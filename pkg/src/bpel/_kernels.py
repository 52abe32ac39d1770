"""Compiled inner loops for the L1-penalized (and un-penalized) dual problem.

maximize  mean_i log(1 + lam'g_i) - nu * |lam|_1   subject to 1 + lam'g_i >= eps_f

Damped proximal Newton: at each outer step the smooth part is replaced by its
second-order model on the working set {lam_j != 0} u {|grad_j| > nu}; the
resulting lasso-type subproblem is solved by cyclic coordinate ascent with
exact soft-thresholding, and the step is halved until it is feasible and gives
sufficient ascent. With nu == 0 the direction is a ridge-damped Newton step.
"""
import numpy as np
from numba import njit

CONVERGED, MAX_ITER, UNBOUNDED, STALLED, NUMERICAL, STOPPED = 0, 1, 2, 3, 4, 5

_ARMIJO = 1e-4
_MIN_STEP = 1e-20
_CD_SWEEPS = 1000


@njit(cache=True)
def objective(s, lam, nu):
    n = s.size
    acc = 0.0
    for i in range(n):
        acc += np.log1p(s[i])
    pen = 0.0
    for j in range(lam.size):
        pen += abs(lam[j])
    return acc / n - nu * pen


@njit(cache=True)
def kkt_from_grad(grad, lam, nu):
    res = 0.0
    for j in range(lam.size):
        if lam[j] > 0.0:
            d = abs(grad[j] - nu)
        elif lam[j] < 0.0:
            d = abs(grad[j] + nu)
        else:
            d = abs(grad[j]) - nu
            if d < 0.0:
                d = 0.0
        if d > res or d != d:
            res = d
    return res


@njit(cache=True)
def score(G, lam):
    """(1/n) sum_i g_i / (1 + lam'g_i)."""
    n = G.shape[0]
    s = G @ lam
    w = np.empty(n)
    for i in range(n):
        w[i] = 1.0 / (1.0 + s[i])
    return (G.T @ w) / n


@njit(cache=True)
def _soft(c, t):
    if c > t:
        return c - t
    if c < -t:
        return c + t
    return 0.0


@njit(cache=True)
def chol_solve(M, b):
    """Solve M x = b for symmetric positive definite M; NaNs when not PD."""
    k = b.size
    L = np.zeros((k, k))
    for j in range(k):
        acc = M[j, j]
        for q in range(j):
            acc -= L[j, q] * L[j, q]
        if not (acc > 0.0):
            out = np.empty(k)
            out[:] = np.nan
            return out
        L[j, j] = np.sqrt(acc)
        inv = 1.0 / L[j, j]
        for i in range(j + 1, k):
            acc = M[i, j]
            for q in range(j):
                acc -= L[i, q] * L[j, q]
            L[i, j] = acc * inv
    x = np.empty(k)
    for i in range(k):
        acc = b[i]
        for q in range(i):
            acc -= L[i, q] * x[q]
        x[i] = acc / L[i, i]
    for i in range(k - 1, -1, -1):
        acc = x[i]
        for q in range(i + 1, k):
            acc -= L[q, i] * x[q]
        x[i] = acc / L[i, i]
    return x


@njit(cache=True)
def _solve_on_pattern(M, b, nu, x):
    """Exact minimizer if the sign pattern of ``x`` is optimal; writes it into x."""
    m = b.size
    k = 0
    for a in range(m):
        if x[a] != 0.0:
            k += 1
    S = np.empty(k, dtype=np.int64)
    sg = np.empty(k)
    k = 0
    for a in range(m):
        if x[a] != 0.0:
            S[k] = a
            sg[k] = 1.0 if x[a] > 0.0 else -1.0
            k += 1
    MS = np.empty((k, k))
    rhs = np.empty(k)
    for i in range(k):
        rhs[i] = b[S[i]] - nu * sg[i]
        for j in range(k):
            MS[i, j] = M[S[i], S[j]]
    xs = chol_solve(MS, rhs)
    for i in range(k):
        if not (xs[i] * sg[i] > 0.0):
            return False
    scale = nu
    for a in range(m):
        if abs(b[a]) > scale:
            scale = abs(b[a])
    slack = nu + 1e-11 * scale
    on = np.zeros(m, dtype=np.bool_)
    for i in range(k):
        on[S[i]] = True
    for a in range(m):
        if not on[a]:
            c = b[a]
            for i in range(k):
                c -= M[a, S[i]] * xs[i]
            if abs(c) > slack:
                return False
    for a in range(m):
        x[a] = 0.0
    for i in range(k):
        x[S[i]] = xs[i]
    return True


@njit(cache=True)
def lasso_inexact(M, b, nu, x0, tol_sub):
    """Approximately minimize 0.5 x'Mx - b'x + nu |x|_1 (M positive definite).

    Cyclic coordinate descent from ``x0`` until the subproblem optimality
    residual drops to ``tol_sub``; whenever a sweep leaves the sign pattern
    unchanged the exact minimizer on that pattern is tried. Every sweep
    lowers the model objective, so the result is a descent point.
    """
    m = b.size
    x = x0.copy()
    if _solve_on_pattern(M, b, nu, x):
        return x
    x[:] = x0
    r = b - M @ x
    for _sweep in range(_CD_SWEEPS):
        changed = False
        for a in range(m):
            c = r[a] + M[a, a] * x[a]
            xn = _soft(c, nu) / M[a, a]
            delta = xn - x[a]
            if delta != 0.0:
                if (xn > 0.0) != (x[a] > 0.0) or (xn < 0.0) != (x[a] < 0.0):
                    changed = True
                x[a] = xn
                for e in range(m):
                    r[e] -= M[a, e] * delta
        res = 0.0
        for a in range(m):
            if x[a] > 0.0:
                d = abs(r[a] - nu)
            elif x[a] < 0.0:
                d = abs(r[a] + nu)
            else:
                d = abs(r[a]) - nu
            if d > res:
                res = d
        if res <= tol_sub:
            return x
        if not changed:
            xt = x.copy()
            if _solve_on_pattern(M, b, nu, xt):
                return xt
    return x


@njit(cache=True)
def prox_newton(G, nu, lam0, tol, max_iter, eps_f, div_bound, hist, obj_stop):
    """Returns (lam, status, iterations, objective, history_length).

    Iterates ascend, so once the objective exceeds ``obj_stop`` the maximum
    does too; the solve then ends early with status STOPPED.
    """
    n, r = G.shape
    lam = lam0.copy()
    s = G @ lam
    for i in range(n):
        if not (1.0 + s[i] >= eps_f):
            lam[:] = 0.0
            s[:] = 0.0
            break
    obj = objective(s, lam, nu)
    log_cap = 50.0 * max(np.log(n), 1.0)
    w = np.empty(n)
    in_set = np.zeros(r, dtype=np.bool_)
    status = MAX_ITER
    it = 0
    n_hist = 0
    while True:
        for i in range(n):
            w[i] = 1.0 / (1.0 + s[i])
        grad = (G.T @ w) / n
        kkt = kkt_from_grad(grad, lam, nu)
        if n_hist < hist.size:
            hist[n_hist] = obj
            n_hist += 1
        if not np.isfinite(kkt) or not np.isfinite(obj):
            status = NUMERICAL
            break
        if obj > obj_stop:
            status = STOPPED
            break
        if kkt <= tol:
            status = CONVERGED
            break
        if it >= max_iter:
            status = MAX_ITER
            break

        m = 0
        for j in range(r):
            in_set[j] = lam[j] != 0.0 or abs(grad[j]) > nu
            if in_set[j]:
                m += 1
        A = np.empty(m, dtype=np.int64)
        k = 0
        for j in range(r):
            if in_set[j]:
                A[k] = j
                k += 1

        WG = np.empty((n, m))
        for i in range(n):
            for a in range(m):
                WG[i, a] = G[i, A[a]] * w[i]
        M = (WG.T @ WG) / n
        tr = 0.0
        for a in range(m):
            tr += M[a, a]
        ridge = 1e-10 * tr / m + 1e-300
        for a in range(m):
            M[a, a] += ridge

        lamA = np.empty(m)
        gA = np.empty(m)
        for a in range(m):
            lamA[a] = lam[A[a]]
            gA[a] = grad[A[a]]

        if nu == 0.0:
            dA = chol_solve(M, gA)
            x = lamA + dA
        else:
            bvec = gA + M @ lamA
            # inexact subproblem with forcing term min(0.1, sqrt(kkt))
            x = lasso_inexact(M, bvec, nu, lamA, min(0.1, np.sqrt(kkt)) * kkt)
            dA = x - lamA
        pred = 0.0
        for a in range(m):
            pred += gA[a] * dA[a] - nu * (abs(x[a]) - abs(lamA[a]))
        if not (pred > 0.0):
            status = STALLED
            break

        Gd = np.zeros(n)
        for i in range(n):
            acc = 0.0
            for a in range(m):
                acc += G[i, A[a]] * dA[a]
            Gd[i] = acc

        t = 1.0
        accepted = False
        snew = np.empty(n)
        lam_new = lam.copy()
        obj_new = obj
        while t > _MIN_STEP:
            feasible = True
            for i in range(n):
                snew[i] = s[i] + t * Gd[i]
                if not (1.0 + snew[i] >= eps_f):
                    feasible = False
                    break
            if feasible:
                for a in range(m):
                    lam_new[A[a]] = lamA[a] + t * dA[a]
                obj_new = objective(snew, lam_new, nu)
                if obj_new >= obj + _ARMIJO * t * pred:
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            status = STALLED
            break
        lam = lam_new
        s[:] = snew
        obj = obj_new
        it += 1
        if nu == 0.0:
            if np.sqrt(np.sum(lam * lam)) > div_bound or obj > log_cap:
                status = UNBOUNDED
                if n_hist < hist.size:
                    hist[n_hist] = obj
                    n_hist += 1
                break
    return lam, status, it, obj, n_hist


@njit(cache=True)
def certifies_unbounded(G, direction):
    """True when G @ direction > 0 row-wise, i.e. the un-penalized dual is unbounded."""
    n, r = G.shape
    if direction.size != r:
        return False
    s = G @ direction
    for i in range(n):
        if not (s[i] > 0.0):
            return False
    return True
