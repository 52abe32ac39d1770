"""Independent reference computations used by several test modules."""
from __future__ import annotations

import numpy as np


def objective_many(G, nu, L, floor=1e-10):
    """f_n at each row of L (vectorised); -inf where 1 + lam'g_i < floor."""
    S = 1.0 + L @ G.T
    ok = np.all(S >= floor, axis=1)
    out = np.full(L.shape[0], -np.inf)
    out[ok] = np.log(S[ok]).mean(axis=1) - nu * np.abs(L[ok]).sum(axis=1)
    return out


def grid_maximize(G, nu, half_width=20.0, points=201, levels=7, window=5):
    """Nested grid search for max f_n over lam in R^r (r = 1 or 2).

    Each level re-grids +-window cells around the incumbent. Zero is kept
    as an extra candidate so that exact sparsity is representable. The box
    doubles while the coarse maximizer sits on its edge, and extra levels
    run until the final cell is below 1e-7.
    """
    G = np.asarray(G, dtype=np.float64)
    r = G.shape[1]
    cell = 2 * half_width / (points - 1)
    while half_width < 1e4:
        best, _ = _grid_levels(G, nu, np.zeros(r), half_width, points, 1, window)
        if np.abs(best).max() < half_width - 2 * cell:
            break
        half_width *= 2
        cell *= 2
    shrink = 2 * window / (points - 1)
    while half_width * shrink ** (levels - 1) > 1e-7:
        levels += 1
    return _grid_levels(G, nu, np.zeros(r), half_width, points, levels, window)


def _grid_levels(G, nu, center, h, points, levels, window):
    r = G.shape[1]
    best_val, best = 0.0, np.zeros(r)
    for _ in range(levels):
        axes = [np.linspace(c - h, c + h, points) for c in center]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, r)
        # keep the axes through zero so exact sparsity is on the grid
        extra = []
        for j in range(r):
            e = mesh.copy()
            e[:, j] = 0.0
            extra.append(e)
        mesh = np.concatenate([mesh, *extra, np.zeros((1, r))])
        vals = objective_many(G, nu, mesh)
        k = int(np.argmax(vals))
        if vals[k] > best_val:
            best_val, best = float(vals[k]), mesh[k].copy()
        center = best
        h = window * (2 * h / (points - 1))
    return best, best_val


def brent_max_1d(f, a, b, tol=1e-13):
    """Golden-section maximization of a unimodal scalar function on [a, b]."""
    g = (np.sqrt(5) - 1) / 2
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


# Truncated bivariate Gaussian on [0, 2] x [-1, 1]: N(mu, S) restricted to
# the box. TRUNC_MEAN is its mean by adaptive 2-D quadrature (scipy dblquad,
# relative tolerance 1e-12), frozen.
TRUNC_MU = np.array([1.5, 0.5])
TRUNC_COV = np.array([[1.0, 0.5], [0.5, 0.8]])
TRUNC_LO, TRUNC_HI = (0.0, -1.0), (2.0, 1.0)
TRUNC_MEAN = np.array([1.1054957437760893, 0.13804373233912884])
_TRUNC_PREC = np.linalg.inv(TRUNC_COV)


def trunc_log_density(theta):
    d = np.asarray(theta) - TRUNC_MU
    return -0.5 * float(d @ _TRUNC_PREC @ d)


def batch_means_se(x, batches=100):
    """Monte-Carlo standard error of the mean of a correlated series."""
    m = x.size // batches
    means = x[: m * batches].reshape(batches, m).mean(axis=1)
    return means.std(ddof=1) / np.sqrt(batches)


def weighted_bootstrap_se(draws, log_weights, reps=200, seed=0):
    """Bootstrap standard error of a self-normalized weighted mean."""
    rng = np.random.default_rng(seed)
    finite = np.isfinite(log_weights)
    w_all = np.where(finite, np.exp(log_weights - log_weights[finite].max()), 0.0)
    out = []
    for _ in range(reps):
        i = rng.integers(0, draws.shape[0], draws.shape[0])
        w = w_all[i]
        out.append(w @ draws[i] / w.sum())
    return np.std(out, axis=0, ddof=1)
