"""Log empirical likelihood, log penalized EL, priors and the log posterior.

Zero likelihood (EL(theta) = 0, or theta outside the parameter box) is the
IEEE value ``-inf``; callers compare against it explicitly.
"""
from __future__ import annotations

import math
import threading
import weakref
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, SolverError
from .inner import STOPPED, UNBOUNDED, InnerSolver, LagrangeSolution, SolverOptions
from .model import Dataset, MomentModel, ParameterSpace, evaluate_moments
from .penalty import PenaltySpec

NEG_INF = -math.inf
PRIOR_KINDS = ("improper_uniform", "gaussian")


@dataclass(frozen=True)
class PriorSpec:
    """Improper uniform on the parameter box, or an isotropic Gaussian."""

    kind: str = "improper_uniform"
    mean: Optional[tuple] = None
    sd: Optional[float] = None

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise ConfigError(f"prior kind must be one of {PRIOR_KINDS}, got {self.kind!r}")
        if self.kind == "gaussian":
            if self.mean is None or self.sd is None:
                raise ConfigError("a gaussian prior needs mean and sd")
            sd = float(self.sd)
            if not sd > 0 or not math.isfinite(sd):
                raise ConfigError(f"prior sd must be positive, got {self.sd}")
            object.__setattr__(self, "mean", tuple(float(m) for m in np.atleast_1d(self.mean)))
            object.__setattr__(self, "sd", sd)

    @classmethod
    def gaussian(cls, mean, sd) -> "PriorSpec":
        return cls("gaussian", tuple(np.atleast_1d(mean)), sd)

    def log_density(self, theta) -> float:
        if self.kind == "improper_uniform":
            return 0.0
        theta = np.asarray(theta, dtype=np.float64)
        z = (theta - np.asarray(self.mean)) / self.sd
        p = theta.size
        return float(-0.5 * z @ z - p * math.log(self.sd) - 0.5 * p * math.log(2 * math.pi))


@dataclass(frozen=True, eq=False)
class PosteriorSpec:
    """The (penalized) EL posterior; ``penalty=None`` gives the plain EL posterior."""

    model: MomentModel
    data: Dataset
    penalty: Optional[PenaltySpec]
    space: ParameterSpace
    prior: PriorSpec = field(default_factory=PriorSpec)
    solver_opts: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if self.model.p != self.space.p:
            raise ConfigError(
                f"model has p={self.model.p} parameters but the space has p={self.space.p}"
            )
        if self.prior.kind == "gaussian" and len(self.prior.mean) != self.space.p:
            raise ConfigError("prior mean dimension does not match the parameter space")
        G = evaluate_moments(self.model, self.data, self.space.center)
        if G.shape[1] != self.model.r:
            raise ConfigError("model output width differs from model.r")

    @property
    def n(self) -> int:
        return self.data.n

    def with_penalty(self, penalty: Optional[PenaltySpec]) -> "PosteriorSpec":
        return PosteriorSpec(self.model, self.data, penalty, self.space, self.prior, self.solver_opts)


class PosteriorEvaluator:
    """Single-owner evaluator: warm-started inner solver plus a small theta cache."""

    def __init__(self, post: PosteriorSpec, cache_size: int = 64):
        self.post = post
        self.solver = InnerSolver(post.penalty, post.solver_opts)
        self._cache: OrderedDict = OrderedDict()
        self._cache_size = cache_size
        self._nlogn = post.n * math.log(post.n)
        self.evaluations = 0

    def reset(self):
        self.solver.reset()
        self._cache.clear()

    def solve(self, theta, lam0=None, obj_stop: float = math.inf) -> LagrangeSolution:
        theta = np.asarray(theta, dtype=np.float64)
        key = theta.tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            return hit
        G = evaluate_moments(self.post.model, self.post.data, theta)
        try:
            sol = self.solver.solve(G, lam0, obj_stop)
        except SolverError as exc:
            raise SolverError(str(exc), theta) from exc
        self.evaluations += 1
        if sol.status != STOPPED:
            self._cache[key] = sol
            if len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        return sol

    def log_likelihood(self, theta) -> tuple[float, LagrangeSolution]:
        """log EL or log PEL at theta (theta is assumed inside the box)."""
        sol = self.solve(theta)
        if sol.status == UNBOUNDED:
            return NEG_INF, sol
        return -self._nlogn - self.post.n * sol.objective, sol

    def log_posterior(self, theta) -> float:
        return self.evaluate(theta)[0]

    def evaluate(
        self, theta, lam0=None, floor: float = NEG_INF, inside: bool = False
    ) -> tuple[float, Optional[LagrangeSolution]]:
        """(log posterior, inner solution); the solution is None outside the box.

        With a finite ``floor`` the inner solve may stop once the log
        posterior is proven to lie below it; the returned value is then an
        upper bound below ``floor`` and the solution status is ``stopped``.
        ``inside=True`` skips the box check for callers that already did it.
        """
        theta = np.asarray(theta, dtype=np.float64)
        if not inside and not self.post.space.contains(theta):
            return NEG_INF, None
        log_prior = self.post.prior.log_density(theta)
        obj_stop = math.inf
        if floor > NEG_INF:
            obj_stop = (log_prior - self._nlogn - floor) / self.post.n
        sol = self.solve(theta, lam0, obj_stop)
        if sol.status == UNBOUNDED:
            return NEG_INF, sol
        return log_prior - self._nlogn - self.post.n * sol.objective, sol


_local = threading.local()


def evaluator_for(post: PosteriorSpec) -> PosteriorEvaluator:
    """The calling thread's evaluator for ``post``."""
    table = getattr(_local, "table", None)
    if table is None:
        table = _local.table = weakref.WeakKeyDictionary()
    ev = table.get(post)
    if ev is None:
        ev = table[post] = PosteriorEvaluator(post)
    return ev


def _require_inside(post: PosteriorSpec, theta):
    if not post.space.contains(theta):
        raise ConfigError(f"theta={list(map(float, theta))} lies outside the parameter space")


def log_el(post: PosteriorSpec, theta) -> float:
    """-n log n - n max_lam (1/n) sum log(1 + lam'g_i); ``-inf`` when EL(theta) = 0."""
    theta = np.asarray(theta, dtype=np.float64)
    _require_inside(post, theta)
    if post.penalty is not None:
        post = post.with_penalty(None)
    return evaluator_for(post).log_likelihood(theta)[0]


def log_pel(post: PosteriorSpec, theta) -> tuple[float, LagrangeSolution]:
    """-n log n - n f_n(lam_hat; theta) together with the inner solution."""
    if post.penalty is None:
        raise ConfigError("log_pel needs a penalty; use log_el for the plain EL")
    theta = np.asarray(theta, dtype=np.float64)
    _require_inside(post, theta)
    return evaluator_for(post).log_likelihood(theta)


def log_posterior(post: PosteriorSpec, theta) -> float:
    """log prior + log (P)EL inside the box, ``-inf`` outside. Unnormalized."""
    return evaluator_for(post).log_posterior(theta)
