"""Random-walk Metropolis-Hastings and modified adaptive multiple importance sampling."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _rng
from .errors import ConfigError, NumericalError, SamplerError
from .inner import STOPPED, UNBOUNDED
from .likelihood import NEG_INF, PosteriorEvaluator, PosteriorSpec

SCALE_RULES = ("fixed", "n_logr")
METHODS = ("mh", "mamis")
_NEGLIGIBLE_NATS = 40.0


@dataclass(frozen=True)
class RwProposal:
    """Gaussian random-walk proposal N(theta, sigma2 I).

    With ``scale_rule="n_logr"`` the variance is C / (n log r). When
    ``adapt_burnin`` is set the scale is multiplied by 1.1 (acceptance above
    target) or 0.9 (below) after every 50 burn-in steps, then frozen.
    """

    sigma2: Optional[float] = None
    scale_rule: str = "fixed"
    C: float = 1.0
    target_acceptance: float = 0.234
    adapt_burnin: bool = False

    def __post_init__(self):
        if self.scale_rule not in SCALE_RULES:
            raise ConfigError(f"scale_rule must be one of {SCALE_RULES}")
        if self.scale_rule == "fixed" and not (self.sigma2 is not None and self.sigma2 > 0):
            raise ConfigError("a fixed random-walk proposal needs sigma2 > 0")
        if not self.C > 0:
            raise ConfigError("C must be positive")
        if not 0 < self.target_acceptance < 1:
            raise ConfigError("target_acceptance must lie in (0, 1)")

    @classmethod
    def n_logr(cls, C: float, adapt_burnin: bool = True, target_acceptance: float = 0.234):
        return cls(None, "n_logr", float(C), target_acceptance, adapt_burnin)

    def variance(self, n: int, r: int) -> float:
        if self.scale_rule == "fixed":
            return float(self.sigma2)
        if r < 2:
            raise ConfigError("the n log r scale rule needs r >= 2")
        return self.C / (n * math.log(r))


@dataclass
class Chain:
    """Post-burn-in states of one M-H run.

    ``accepted_steps[k]`` records whether the move into ``draws[k]`` was
    accepted. ``aborted`` is set when a posterior evaluation failed; the
    draws up to that point are kept.
    """

    draws: np.ndarray
    log_post: np.ndarray
    accepted_steps: np.ndarray
    burnin: int
    seed: int
    sigma2: float
    burnin_accepted: int = 0
    aborted: bool = False
    error: str = ""

    @property
    def K(self) -> int:
        return self.draws.shape[0]

    @property
    def accepted(self) -> int:
        return int(self.accepted_steps.sum())

    @property
    def proposed(self) -> int:
        return self.K

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else float("nan")


def mh_log_alpha(lp_current: float, lp_proposal: float, inside: bool) -> float:
    """log of the acceptance probability for a symmetric proposal.

    0 (alpha = 1) when the current density is zero, -inf when the proposal
    leaves the box, else min(0, lp_proposal - lp_current).
    """
    if not inside:
        return NEG_INF
    if lp_current == NEG_INF:
        return 0.0
    return min(0.0, lp_proposal - lp_current)


class _Point:
    """Stand-in inner solution for targets without a multiplier."""

    status = "converged"
    lam = None


class LogDensityTarget:
    """An explicit (unnormalized) log density on a box, usable in place of a posterior.

    Serves as its own evaluator, so it can be passed wherever the samplers
    and :func:`bpel.baselines.grid_mode` take a :class:`PosteriorSpec`.
    """

    def __init__(self, log_density, space, n: int | None = None, r: int | None = None):
        self.log_density = log_density
        self.space = space
        self.n, self.r = n, r
        self.post = self
        self.evaluations = 0

    def reset(self):
        pass

    def evaluate(self, theta, lam0=None, floor: float = NEG_INF, inside: bool = False):
        theta = np.asarray(theta, dtype=np.float64)
        if not inside and not self.space.contains(theta):
            return NEG_INF, None
        self.evaluations += 1
        return float(self.log_density(theta)), _Point


class _Walker:
    """Shared accept-reject step.

    The uniform is drawn before the target is evaluated, so the inner solve
    can stop as soon as rejection is certain; the decision is the same as
    with a full evaluation.
    """

    def __init__(self, ev: PosteriorEvaluator, rng: np.random.Generator, sd: float):
        self.ev = ev
        self.rng = rng
        self.sd = sd
        self.space = ev.post.space
        self.p = self.space.p

    def start(self, theta):
        theta = np.array(theta, dtype=np.float64)
        lp, sol = self.ev.evaluate(theta)
        lam = sol.lam if sol is not None and sol.status != UNBOUNDED else None
        return theta, lp, lam

    def step(self, theta, lp, lam):
        """One proposal; returns (theta, lp, lam, accepted, moved_to_positive)."""
        prop = theta + self.sd * self.rng.standard_normal(self.p)
        u = self.rng.random()
        if not self.space.contains(prop):
            return theta, lp, lam, False, False
        if lp == NEG_INF:
            # zero current density: alpha = 1
            lp_new, sol = self.ev.evaluate(prop, lam0=lam, inside=True)
            lam_new = sol.lam if sol.status != UNBOUNDED else None
            return prop, lp_new, lam_new, True, lp_new > NEG_INF
        log_u = math.log(u) if u > 0.0 else NEG_INF
        lp_new, sol = self.ev.evaluate(prop, lam0=lam, floor=lp + log_u, inside=True)
        # a stopped solve proved lp_new < lp + log u, i.e. rejection
        if sol.status == STOPPED or not (log_u < mh_log_alpha(lp, lp_new, True)):
            return theta, lp, lam, False, False
        return prop, lp_new, sol.lam, True, True


def _evaluator(post, evaluator):
    if isinstance(post, LogDensityTarget):
        return post
    if evaluator is None:
        return PosteriorEvaluator(post)
    if evaluator.post is not post:
        raise ConfigError("evaluator belongs to a different posterior")
    return evaluator


def _variance(prop: RwProposal, post) -> float:
    if isinstance(post, LogDensityTarget):
        if prop.scale_rule == "n_logr" and (post.n is None or post.r is None):
            raise ConfigError("the n log r scale rule needs a target with n and r")
        return prop.variance(post.n, post.r) if prop.scale_rule == "n_logr" else float(prop.sigma2)
    return prop.variance(post.n, post.model.r)


def mh_sample(
    post: PosteriorSpec,
    prop: RwProposal,
    theta0,
    K: int,
    burnin: int = 500,
    seed: int = 0,
    rng: np.random.Generator | None = None,
    evaluator: PosteriorEvaluator | None = None,
) -> Chain:
    """Random-walk M-H started at ``theta0``; returns the K post-burn-in states.

    Per step the generator yields p standard normals then one uniform.
    """
    if K < 1 or burnin < 0:
        raise ConfigError("K must be positive and burnin non-negative")
    theta0 = np.asarray(theta0, dtype=np.float64)
    if theta0.shape != (post.space.p,):
        raise ConfigError(f"theta0 must have {post.space.p} components")
    if not post.space.contains(theta0):
        raise ConfigError(f"theta0={theta0.tolist()} lies outside the parameter space")
    ev = _evaluator(post, evaluator)
    rng = rng if rng is not None else _rng.substream(seed, "mh")
    scale = 1.0
    sigma2 = _variance(prop, post)
    walker = _Walker(ev, rng, math.sqrt(sigma2))
    theta, lp, lam = walker.start(theta0)
    if lp == NEG_INF:
        raise ConfigError(f"posterior density is zero at theta0={theta0.tolist()}")

    p = post.space.p
    draws = np.empty((K, p))
    lps = np.empty(K)
    acc = np.zeros(K, dtype=bool)
    burn_acc = window = 0
    aborted, error, k = False, "", 0
    try:
        for b in range(burnin):
            theta, lp, lam, a, _ = walker.step(theta, lp, lam)
            burn_acc += a
            window += a
            if prop.adapt_burnin and (b + 1) % 50 == 0:
                rate = window / 50
                if rate > prop.target_acceptance:
                    scale *= 1.1
                elif rate < prop.target_acceptance:
                    scale *= 0.9
                walker.sd = math.sqrt(sigma2 * scale)
                window = 0
            elif not prop.adapt_burnin and (b + 1) % 50 == 0:
                window = 0
        for k in range(K):
            theta, lp, lam, a, _ = walker.step(theta, lp, lam)
            draws[k] = theta
            lps[k] = lp
            acc[k] = a
        k = K
    except NumericalError as exc:
        aborted, error = True, str(exc)
    return Chain(
        draws=draws[:k].copy(),
        log_post=lps[:k].copy(),
        accepted_steps=acc[:k].copy(),
        burnin=burnin,
        seed=int(seed),
        sigma2=sigma2 * scale,
        burnin_accepted=int(burn_acc),
        aborted=aborted,
        error=error,
    )


def count_proposals(
    post: PosteriorSpec,
    prop: RwProposal,
    theta0,
    accepts: int = 5,
    cap: int = 200_000,
    seed: int = 0,
    rng: np.random.Generator | None = None,
    evaluator: PosteriorEvaluator | None = None,
) -> tuple[int, bool]:
    """Proposals needed until ``accepts`` moves into positive-density states.

    Unlike :func:`mh_sample` the start may have zero density (every
    in-box proposal is then accepted, but only moves to positive density
    count). Returns ``(proposals, censored)``; censored runs report ``cap``.
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    if not post.space.contains(theta0):
        raise ConfigError(f"theta0={theta0.tolist()} lies outside the parameter space")
    if accepts < 1 or cap < 1:
        raise ConfigError("accepts and cap must be positive")
    ev = _evaluator(post, evaluator)
    rng = rng if rng is not None else _rng.substream(seed, "count")
    walker = _Walker(ev, rng, math.sqrt(_variance(prop, post)))
    theta, lp, lam = walker.start(theta0)
    valid = 0
    for t in range(1, cap + 1):
        theta, lp, lam, _, good = walker.step(theta, lp, lam)
        valid += good
        if valid >= accepts:
            return t, False
    return cap, True


def chain_mean(chain: Chain, k: int | None = None) -> np.ndarray:
    """Mean of the first ``k`` (default all) post-burn-in draws."""
    k = chain.K if k is None else int(k)
    if k < 1 or k > chain.K:
        raise SamplerError(f"chain has {chain.K} draws, cannot average the first {k}")
    return chain.draws[:k].mean(axis=0)


@dataclass(frozen=True)
class StudentTProposal:
    """Multivariate Student-t with ``df`` degrees of freedom, location mu, scale sigma."""

    mu: np.ndarray
    sigma: np.ndarray
    df: float = 3.0

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64).reshape(-1)
        sigma = np.array(self.sigma, dtype=np.float64).reshape(mu.size, mu.size)
        if not self.df > 2:
            raise ConfigError("df must exceed 2")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", 0.5 * (sigma + sigma.T))
        object.__setattr__(self, "_chol", _chol_jitter(self.sigma))

    @classmethod
    def standard(cls, mu, df: float = 3.0) -> "StudentTProposal":
        mu = np.asarray(mu, dtype=np.float64)
        return cls(mu, np.eye(mu.size), df)

    @property
    def p(self) -> int:
        return self.mu.size

    @property
    def zeta(self) -> np.ndarray:
        """(mu, vech(sigma))."""
        rows, cols = np.tril_indices(self.p)
        return np.concatenate([self.mu, self.sigma[cols, rows]])

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """``size`` draws; consumes size*p normals then size chi-squares."""
        z = rng.standard_normal((size, self.p))
        w = rng.chisquare(self.df, size)
        return self.mu + (z @ self._chol.T) / np.sqrt(w / self.df)[:, None]

    def logpdf(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        p, df = self.p, self.df
        y = np.linalg.solve(self._chol, (X - self.mu).T)
        q = np.sum(y * y, axis=0)
        const = (
            math.lgamma(0.5 * (df + p)) - math.lgamma(0.5 * df)
            - 0.5 * p * math.log(df * math.pi) - float(np.log(np.diag(self._chol)).sum())
        )
        return const - 0.5 * (df + p) * np.log1p(q / df)


def _chol_jitter(sigma: np.ndarray) -> np.ndarray:
    """Cholesky factor, adding 1e-8 trace/p to the diagonal on failure."""
    if not np.all(np.isfinite(sigma)):
        raise SamplerError("proposal scale matrix has non-finite entries")
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        p = sigma.shape[0]
        jitter = 1e-8 * np.trace(sigma) / p
        try:
            return np.linalg.cholesky(sigma + jitter * np.eye(p))
        except np.linalg.LinAlgError:
            raise SamplerError("proposal scale matrix is not positive definite") from None


@dataclass
class MamisStage:
    proposal: StudentTProposal
    draws: np.ndarray
    log_post: np.ndarray
    log_proposal: np.ndarray
    # self-normalized pi/phi weights used for the next proposal
    weights: np.ndarray


@dataclass
class WeightedSamples:
    """All MAMIS draws with their recycled weights (normalized to sum 1)."""

    stages: list
    draws: np.ndarray
    log_weights: np.ndarray
    weights: np.ndarray
    seed: int = 0
    warnings: list = field(default_factory=list)

    @property
    def S(self) -> int:
        return self.draws.shape[0]

    @property
    def sizes(self) -> tuple:
        return tuple(st.draws.shape[0] for st in self.stages)

    def stage_index(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.stages)), self.sizes)


def _normalize_log(lw: np.ndarray) -> np.ndarray:
    finite = np.isfinite(lw)
    w = np.zeros(lw.size)
    if not finite.any():
        return w
    top = lw[finite].max()
    w[finite] = np.exp(lw[finite] - top)
    return w / w.sum()


def default_stage_sizes(total: int, stages: int) -> tuple:
    """N_k proportional to k, summing to ``total`` (remainder on the last stage)."""
    if stages < 1 or total < stages:
        raise ConfigError("need at least one draw per stage")
    unit = total / (stages * (stages + 1) / 2)
    sizes = [max(1, int(unit * k)) for k in range(1, stages + 1)]
    sizes[-1] += total - sum(sizes)
    return tuple(sizes)


def mamis_sample(
    post: PosteriorSpec,
    init: StudentTProposal,
    sizes: Sequence[int],
    seed: int = 0,
    rng: np.random.Generator | None = None,
    evaluator: PosteriorEvaluator | None = None,
    min_ess: float | None = None,
) -> WeightedSamples:
    """Stage-wise adaptive Student-t importance sampling with final recycling.

    Draws whose weight is provably below exp(-40)/S of the running maximum
    are not solved to convergence; their (upper-bound) weights are negligible
    at double precision, and any that could matter after recycling are
    re-evaluated exactly.

    The location always moves to the weighted mean. The scale update is
    skipped (previous scale kept) when it is not positive definite after
    jitter, or when the stage weights have an effective sample size below
    ``min_ess`` (default p + 1), because the weighted covariance of fewer
    effective points is numerically rank deficient.
    """
    sizes = [int(s) for s in sizes]
    if not sizes or min(sizes) < 1:
        raise ConfigError("stage sizes must be positive")
    if any(b < a for a, b in zip(sizes, sizes[1:])):
        raise ConfigError("stage sizes must be non-decreasing")
    if init.p != post.space.p:
        raise ConfigError("proposal dimension does not match the parameter space")
    ev = _evaluator(post, evaluator)
    rng = rng if rng is not None else _rng.substream(seed, "mamis")
    space = post.space
    min_ess = space.p + 1.0 if min_ess is None else float(min_ess)
    stages, notes = [], []
    q = init
    S = sum(sizes)
    # a draw more than this many nats below the running best weight is
    # negligible at double precision, even summed over all S draws
    cut = _NEGLIGIBLE_NATS + math.log(S)
    bounded = []
    for k, N in enumerate(sizes):
        X = q.sample(rng, N)
        logq = q.logpdf(X)
        lp = np.full(N, NEG_INF)
        best = NEG_INF
        for i in range(N):
            if not space.contains(X[i]):
                continue
            lp[i], sol = ev.evaluate(X[i], floor=best + logq[i] - cut, inside=True)
            if sol is not None and sol.status == STOPPED:
                # lp[i] is an upper bound; resolved after recycling if it matters
                bounded.append((k, i))
            elif lp[i] - logq[i] > best:
                best = lp[i] - logq[i]
        w = _normalize_log(lp - logq)
        stages.append(MamisStage(q, X, lp, logq, w))
        if k == len(sizes) - 1:
            break
        if not w.any():
            notes.append(f"stage {k + 1}: no draw with positive density; proposal kept")
            continue
        mu = w @ X
        D = X - mu
        sigma = (w[:, None] * D).T @ D
        ess = 1.0 / float(np.sum(w * w))
        try:
            if ess < min_ess:
                # the weighted covariance then has effective rank below p
                raise SamplerError("degenerate covariance update")
            q = StudentTProposal(mu, sigma, q.df)
        except SamplerError:
            notes.append(
                f"stage {k + 1}: covariance update unusable (weight ESS {ess:.3g}); scale kept"
            )
            q = StudentTProposal(mu, q.sigma, q.df)

    draws = np.concatenate([st.draws for st in stages])
    offsets = np.cumsum([0] + [st.draws.shape[0] for st in stages])
    # log of S^-1 sum_l N_l phi_l(theta)
    comp = np.stack([math.log(st.draws.shape[0]) + st.proposal.logpdf(draws) for st in stages])
    top = comp.max(axis=0)
    log_mix = top + np.log(np.exp(comp - top).sum(axis=0)) - math.log(S)
    lp_all = np.concatenate([st.log_post for st in stages])
    if bounded:
        idx = np.array([offsets[k] + i for k, i in bounded])
        exact = np.ones(S, dtype=bool)
        exact[idx] = False
        lw = lp_all - log_mix
        ref = lw[exact & np.isfinite(lw)].max() if (exact & np.isfinite(lw)).any() else NEG_INF
        for (k, i), j in zip(bounded, idx):
            if not lw[j] < ref - cut:
                lp_exact = ev.evaluate(draws[j], inside=True)[0]
                stages[k].log_post[i] = lp_exact
                lp_all[j] = lp_exact
    lw = lp_all - log_mix
    weights = _normalize_log(lw)
    return WeightedSamples(stages, draws, lw, weights, int(seed), notes)


def weighted_mean(ws: WeightedSamples) -> np.ndarray:
    if not ws.weights.any():
        raise SamplerError("all importance weights are zero: no draw has positive density in the box")
    return ws.weights @ ws.draws


def effective_sample_size(obj) -> float:
    """(sum w)^2 / sum w^2 for weights; initial-positive-sequence ESS for a chain.

    For a chain the smallest ESS over the coordinates is returned.
    """
    if isinstance(obj, WeightedSamples):
        w = obj.weights
    elif isinstance(obj, Chain):
        if obj.K < 1:
            raise SamplerError("empty chain")
        return min(_ips_ess(obj.draws[:, j]) for j in range(obj.draws.shape[1]))
    else:
        w = np.asarray(obj, dtype=np.float64)
    if w.size == 0:
        raise SamplerError("no weights")
    s2 = float(np.sum(w * w))
    return float(np.sum(w)) ** 2 / s2 if s2 > 0 else 0.0


def _ips_ess(x: np.ndarray) -> float:
    K = x.size
    x = x - x.mean()
    m = 1 << (2 * K - 1).bit_length()
    f = np.fft.rfft(x, m)
    acov = np.fft.irfft(f * np.conj(f), m)[:K] / K
    if acov[0] <= 0:
        return 1.0
    rho = acov / acov[0]
    tau = -1.0
    for t in range(0, K - 1, 2):
        pair = rho[t] + rho[t + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
    return float(K / max(tau, 1e-12))


def write_chain_csv(chain: Chain, path) -> None:
    p = chain.draws.shape[1] if chain.draws.ndim == 2 else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step"] + [f"theta_{j + 1}" for j in range(p)] + ["log_post", "accepted"])
        for k in range(chain.K):
            w.writerow(
                [k + 1] + [repr(float(v)) for v in chain.draws[k]]
                + [repr(float(chain.log_post[k])), int(chain.accepted_steps[k])]
            )


def write_weighted_csv(ws: WeightedSamples, path) -> None:
    p = ws.draws.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "i"] + [f"theta_{j + 1}" for j in range(p)] + ["weight"])
        for k, st in enumerate(ws.stages):
            offset = sum(ws.sizes[:k])
            for i in range(st.draws.shape[0]):
                w.writerow(
                    [k + 1, i + 1] + [repr(float(v)) for v in st.draws[i]]
                    + [repr(float(ws.weights[offset + i]))]
                )


@dataclass(frozen=True)
class SamplerConfig:
    """How to turn a posterior into a point estimate (its mean).

    ``mh``: one chain of ``draws`` post-burn-in states with the C/(n log r)
    random-walk scale. ``mamis``: ``draws`` total over ``stages`` stages of
    sizes proportional to 1..stages, starting from a standard Student-t at
    the initial point.
    """

    method: str = "mh"
    draws: int = 3500
    burnin: int = 500
    C: float = 10.0
    adapt_burnin: bool = True
    stages: int = 5
    df: float = 3.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"sampler method must be one of {METHODS}, got {self.method!r}")
        if self.draws < 1 or self.burnin < 0 or self.stages < 1:
            raise ConfigError("draws and stages must be positive, burnin non-negative")
        if self.method == "mamis" and self.draws < self.stages:
            raise ConfigError("MAMIS needs at least one draw per stage")

    def run(self, post: PosteriorSpec, theta0, seed: int = 0, evaluator=None):
        """The :class:`Chain` or :class:`WeightedSamples` for this configuration."""
        if self.method == "mh":
            prop = RwProposal.n_logr(self.C, self.adapt_burnin)
            return mh_sample(post, prop, theta0, self.draws, self.burnin, seed, evaluator=evaluator)
        init = StudentTProposal.standard(theta0, self.df)
        sizes = default_stage_sizes(self.draws, self.stages)
        return mamis_sample(post, init, sizes, seed, evaluator=evaluator)


def posterior_mean(post: PosteriorSpec, cfg: SamplerConfig, theta0, seed: int = 0, evaluator=None):
    """Posterior-mean estimate from one sampler run; raises if a chain aborted."""
    out = cfg.run(post, theta0, seed, evaluator)
    if isinstance(out, Chain):
        if out.aborted:
            raise SamplerError(f"chain aborted: {out.error}")
        return chain_mean(out)
    return weighted_mean(out)
