"""Optimization baselines: Nelder-Mead on the profile, the standard EL estimator, grid mode."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from .errors import ConfigError, OptimizerError
from .inner import STOPPED, UNBOUNDED
from .likelihood import NEG_INF, PosteriorEvaluator, PosteriorSpec
from .samplers import LogDensityTarget
from .model import Dataset, MomentModel, ParameterSpace, default_iv_space

_GRID_WARN = 10**6


@dataclass(frozen=True)
class SimplexOptions:
    """Nelder-Mead settings (reflection 1, expansion 2, contraction 0.5, shrink 0.5)."""

    init_step: float = 0.5
    ftol: float = 1e-8
    xtol: float = 1e-6
    max_evals: int = 5000
    restarts: int = 0

    def __post_init__(self):
        if not (self.init_step > 0 and self.ftol > 0 and self.xtol > 0 and self.max_evals > 0):
            raise ConfigError("simplex options must be positive")
        if self.restarts < 0:
            raise ConfigError("restarts must be non-negative")


@dataclass(frozen=True)
class SimplexResult:
    theta: np.ndarray
    value: float
    evals: int


def _initial_simplex(x0, step, space: ParameterSpace | None) -> np.ndarray:
    p = x0.size
    simplex = np.tile(x0, (p + 1, 1))
    for k in range(p):
        v = x0.copy()
        v[k] += step
        if space is not None and v[k] > space.upper[k]:
            v[k] = x0[k] - step
        simplex[k + 1] = v
    return simplex


def nelder_mead(f: Callable, x0, opts: SimplexOptions = SimplexOptions(), space=None) -> SimplexResult:
    """Minimize ``f`` from ``x0``; values outside ``space`` are +inf.

    Each restart rebuilds the simplex around the best point so far. The
    evaluation count is exact (every call of ``f`` inside the box counts).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if space is not None and not space.contains(x0):
        raise ConfigError(f"start {x0.tolist()} lies outside the parameter space")
    evals = 0

    def wrapped(x):
        nonlocal evals
        if space is not None and not space.contains(x):
            return math.inf
        evals += 1
        return float(f(x))

    best_x, best_f = x0, math.inf
    for _ in range(opts.restarts + 1):
        budget = opts.max_evals - evals
        if budget <= 0:
            break
        with warnings.catch_warnings():
            # inf - inf inside the simplex bookkeeping is expected with +inf walls
            warnings.simplefilter("ignore", RuntimeWarning)
            res = minimize(
                wrapped, best_x, method="Nelder-Mead",
                options={
                    "initial_simplex": _initial_simplex(best_x, opts.init_step, space),
                    "maxfev": budget, "fatol": opts.ftol, "xatol": opts.xtol,
                },
            )
        if res.fun <= best_f:
            best_x, best_f = np.asarray(res.x, dtype=np.float64), float(res.fun)
    if not math.isfinite(best_f):
        raise OptimizerError(f"every simplex vertex from {x0.tolist()} has an infinite value")
    return SimplexResult(best_x, best_f, evals)


def profile_value(ev: PosteriorEvaluator, theta) -> float:
    """F_n(theta) = max_lam f_n(lam; theta); +inf when the un-penalized dual is unbounded."""
    sol = ev.solve(theta)
    if sol.status == UNBOUNDED:
        return math.inf
    return float(sol.objective)


def minimize_profile(post: PosteriorSpec, theta0, opts: SimplexOptions = SimplexOptions()):
    """Nelder-Mead on F_n over the box; returns (theta, value, evals)."""
    ev = PosteriorEvaluator(post)
    res = nelder_mead(lambda t: profile_value(ev, t), theta0, opts, post.space)
    return res.theta, res.value, res.evals


def standard_el_estimate(
    model: MomentModel,
    data: Dataset,
    theta0,
    opts: SimplexOptions = SimplexOptions(),
    space: ParameterSpace | None = None,
    moments: int = 4,
):
    """Un-penalized EL estimate using only the first ``moments`` conditions."""
    if model.r < moments:
        raise ConfigError(f"the standard EL baseline needs r >= {moments}")
    sub = model.subset(range(moments), name=f"{model.name}[first {moments}]")
    post = PosteriorSpec(sub, data, None, space or default_iv_space())
    return minimize_profile(post, theta0, opts)


def grid_points(lo, hi, points_per_dim: int) -> list:
    lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
    hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))
    if points_per_dim < 2 or lo.shape != hi.shape or np.any(lo >= hi):
        raise ConfigError("a grid needs lo < hi and at least two points per dimension")
    return [np.linspace(a, b, points_per_dim) for a, b in zip(lo, hi)]


def grid_mode(post, lo, hi, points_per_dim: int = 101):
    """Argmax of the log posterior over the tensor grid (first index wins ties).

    Returns ``(theta_mode, log_posterior_at_mode)``. Points are visited in
    C order, so each solve is warm-started from its neighbour; a point is
    only solved exactly when it could beat the current best.
    """
    axes = grid_points(lo, hi, points_per_dim)
    p = len(axes)
    if p != post.space.p:
        raise ConfigError("grid dimension does not match the parameter space")
    total = points_per_dim**p
    if total > _GRID_WARN:
        warnings.warn(f"grid mode over {total} points", RuntimeWarning, stacklevel=2)
    ev = post if isinstance(post, LogDensityTarget) else PosteriorEvaluator(post)
    best_lp, best_theta = NEG_INF, None
    lam = None
    for idx in np.ndindex(*(points_per_dim,) * p):
        theta = np.array([axes[k][i] for k, i in enumerate(idx)])
        lp, sol = ev.evaluate(theta, lam0=lam, floor=best_lp)
        if sol is None:
            continue
        if sol.status != UNBOUNDED:
            lam = sol.lam
        if lp > best_lp and sol.status != STOPPED:
            best_lp, best_theta = lp, theta
    if best_theta is None:
        raise OptimizerError("the posterior is zero on every grid point")
    return best_theta, best_lp
