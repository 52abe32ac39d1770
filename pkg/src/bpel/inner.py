"""The inner maximization over the Lagrange multiplier.

f_n(lam; theta) = (1/n) sum_i log(1 + lam'g_i) - sum_j P_nu(|lam_j|)

L1 penalties (and the un-penalized problem) run through the compiled
proximal-Newton kernel in :mod:`bpel._kernels`; other convex penalties use a
pure-numpy implementation of the same iteration.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from . import _kernels
from .errors import ConfigError, SolverError
from .penalty import PenaltySpec, penalty_subgradient_interval, penalty_value

CONVERGED = "converged"
MAX_ITER = "max_iter"
UNBOUNDED = "unbounded"
# internal: the solve ended once the objective passed a caller-supplied bound
STOPPED = "stopped"

_STATUS = {
    _kernels.CONVERGED: CONVERGED,
    _kernels.MAX_ITER: MAX_ITER,
    _kernels.STALLED: MAX_ITER,
    _kernels.UNBOUNDED: UNBOUNDED,
    _kernels.STOPPED: STOPPED,
}


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-8
    max_iter: int = 10_000
    feasibility_floor: float = 1e-10
    support_threshold: float = 1e-6
    divergence_bound: float = 1e8

    def __post_init__(self):
        for name in ("tol", "max_iter", "feasibility_floor", "support_threshold", "divergence_bound"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"solver option {name} must be positive")
        if self.tol >= 1 or self.feasibility_floor >= 1:
            raise ConfigError("tol and feasibility_floor must be below 1")


@dataclass
class LagrangeSolution:
    """Maximizer of the inner problem at one theta.

    ``eta`` holds the score-equation subgradients: nu*rho'(|lam_j|)*sgn(lam_j)
    where lam_j != 0 and the score clipped into [-nu rho'(0+), nu rho'(0+)]
    elsewhere.
    """

    lam: np.ndarray
    objective: float
    status: str
    iterations: int
    history: Optional[np.ndarray] = None
    certificate: Optional[np.ndarray] = None
    _G: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    _penalty: Optional[PenaltySpec] = field(default=None, repr=False, compare=False)
    support_threshold: float = 1e-6

    @cached_property
    def support(self) -> tuple:
        """0-based indices j with |lam_j| above the support threshold."""
        return _support(self.lam, self.support_threshold)

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED

    @cached_property
    def score(self) -> np.ndarray:
        """(1/n) sum_i g_i / (1 + lam'g_i) at the solution."""
        if self._G is None or self.status == UNBOUNDED:
            raise SolverError("score unavailable for this solution")
        return _score(self._G, self.lam)

    @cached_property
    def eta(self) -> np.ndarray:
        if self._penalty is None:
            return self.score.copy()
        return eta_from_score(self._penalty, self.lam, self.score)


def _score(G, lam) -> np.ndarray:
    denom = 1.0 + G @ lam
    return (G / denom[:, None]).mean(axis=0)


def eta_from_score(penalty: PenaltySpec, lam, score) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    tau = penalty.threshold
    eta = np.clip(score, -tau, tau)
    nz = lam != 0
    if nz.any():
        a = np.abs(lam[nz])
        eta[nz] = penalty.nu * np.asarray(penalty.rho_prime(a), dtype=np.float64) * np.sign(lam[nz])
    return eta


def _check_G(G) -> np.ndarray:
    G = np.ascontiguousarray(G, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] < 1 or G.shape[1] < 1:
        raise ValueError("G must be an n x r matrix")
    # a finite sum is the cheap common case; only then is the full scan skipped
    if not math.isfinite(G.sum()) and not np.isfinite(G).all():
        raise SolverError("moment matrix contains non-finite values")
    return G


def _support(lam, threshold) -> tuple:
    return tuple(np.flatnonzero(np.abs(lam) > threshold).tolist())


def inner_objective(G, penalty: Optional[PenaltySpec], lam) -> float:
    """f_n(lam); ``penalty=None`` gives the un-penalized log term alone."""
    G = np.asarray(G, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    s = 1.0 + G @ lam
    if not np.all(s > 0):
        raise ValueError("lambda is outside the domain: 1 + lam'g_i <= 0 for some i")
    val = float(np.mean(np.log(s)))
    if penalty is not None:
        val -= penalty_value(penalty, lam)
    return val


def kkt_residual(G, penalty: Optional[PenaltySpec], sol: LagrangeSolution) -> float:
    """Largest distance from the score to the penalty subdifferential at lam."""
    G = np.asarray(G, dtype=np.float64)
    sc = _score(G, np.asarray(sol.lam, dtype=np.float64))
    if penalty is None:
        return float(np.max(np.abs(sc)))
    res = 0.0
    for j, (lj, sj) in enumerate(zip(sol.lam, sc)):
        lo, hi = penalty_subgradient_interval(penalty, lj)
        res = max(res, lo - sj, sj - hi, 0.0)
    return float(res)


def solve_lambda(
    G,
    penalty: PenaltySpec,
    opts: SolverOptions | None = None,
    lam0=None,
    record_history: bool = False,
    obj_stop: float = math.inf,
) -> LagrangeSolution:
    """Maximize f_n(lam) for a convex penalty, optionally warm-started at ``lam0``.

    With a finite ``obj_stop`` the solve may end early (status ``stopped``)
    as soon as some iterate proves the maximum exceeds it.
    """
    opts = opts or SolverOptions()
    G = _check_G(G)
    r = G.shape[1]
    lam0 = np.zeros(r) if lam0 is None else np.ascontiguousarray(lam0, dtype=np.float64)
    if lam0.shape != (r,):
        lam0 = np.zeros(r)
    if penalty.kind == "l1":
        hist = np.empty(opts.max_iter + 2 if record_history else 0)
        lam, code, its, obj, nh = _kernels.prox_newton(
            G, penalty.nu, lam0, opts.tol, opts.max_iter, opts.feasibility_floor,
            opts.divergence_bound, hist, obj_stop,
        )
        if code == _kernels.NUMERICAL:
            raise SolverError("numerical breakdown in the inner solver")
        status = _STATUS[code]
        history = hist[:nh].copy() if record_history else None
    else:
        lam, status, its, obj, history = _solve_generic(G, penalty, opts, lam0, record_history, obj_stop)
    return LagrangeSolution(
        lam=lam,
        support_threshold=opts.support_threshold,
        objective=float(obj),
        status=status,
        iterations=int(its),
        history=history,
        _G=G,
        _penalty=penalty,
    )


def solve_lambda_unpenalized(
    G,
    opts: SolverOptions | None = None,
    lam0=None,
    certificate=None,
    record_history: bool = False,
    obj_stop: float = math.inf,
) -> LagrangeSolution:
    """Maximize (1/n) sum log(1 + lam'g_i) alone.

    Returns status ``unbounded`` (EL = 0) as soon as a direction c with
    G c > 0 is known: the supplied ``certificate``, the least-squares
    solution of G c = 1, or the direction of a diverging Newton iterate.
    """
    opts = opts or SolverOptions()
    G = _check_G(G)
    n, r = G.shape
    if certificate is not None:
        c = np.ascontiguousarray(certificate, dtype=np.float64)
        if c.shape == (r,) and _kernels.certifies_unbounded(G, c):
            return _unbounded(c, 0, opts, record_history)
    c = _certificate_guess(G)
    if c is not None and _kernels.certifies_unbounded(G, c):
        return _unbounded(c, 0, opts, record_history)

    lam0 = np.zeros(r) if lam0 is None else np.ascontiguousarray(lam0, dtype=np.float64)
    if lam0.shape != (r,):
        lam0 = np.zeros(r)
    hist = np.empty(opts.max_iter + 2 if record_history else 0)
    lam, code, its, obj, nh = _kernels.prox_newton(
        G, 0.0, lam0, opts.tol, opts.max_iter, opts.feasibility_floor, opts.divergence_bound, hist,
        obj_stop,
    )
    if code == _kernels.NUMERICAL:
        raise SolverError("numerical breakdown in the un-penalized solver")
    history = hist[:nh].copy() if record_history else None
    if code == _kernels.UNBOUNDED:
        direction = lam / np.linalg.norm(lam)
        cert = direction if _kernels.certifies_unbounded(G, direction) else None
        sol = _unbounded(direction, its, opts, False)
        sol.certificate = cert
        sol.history = history
        return sol
    return LagrangeSolution(
        lam=lam,
        support_threshold=opts.support_threshold,
        objective=float(obj),
        status=_STATUS[code],
        iterations=int(its),
        history=history,
        _G=G,
    )


def _certificate_guess(G) -> Optional[np.ndarray]:
    """Least-squares solution of G c = 1 (min-norm when r >= n), via ridged normal equations."""
    n, r = G.shape
    ones = np.ones(n)
    if r >= n:
        A, b = G @ G.T, ones
    else:
        A, b = G.T @ G, G.T @ ones
    A[np.diag_indices_from(A)] += 1e-12 * np.trace(A) / A.shape[0] + 1e-300
    try:
        y = np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        return None
    c = G.T @ y if r >= n else y
    return np.ascontiguousarray(c) if np.all(np.isfinite(c)) else None


def _unbounded(direction, its, opts, record_history) -> LagrangeSolution:
    return LagrangeSolution(
        lam=np.asarray(direction, dtype=np.float64),
        support_threshold=opts.support_threshold,
        objective=math.inf,
        status=UNBOUNDED,
        iterations=int(its),
        history=np.array([math.inf]) if record_history else None,
        certificate=np.asarray(direction, dtype=np.float64),
    )


class InnerSolver:
    """Stateful solver for one thread: warm starts and divergence certificates.

    By default each call starts from the previous multiplier; pass ``lam0``
    to choose the start explicitly. ``penalty=None`` selects the
    un-penalized problem.
    """

    def __init__(self, penalty: Optional[PenaltySpec], opts: SolverOptions | None = None):
        self.penalty = penalty
        self.opts = opts or SolverOptions()
        self._warm = None
        self._certificate = None

    def reset(self):
        self._warm = None
        self._certificate = None

    def solve(self, G, lam0=None, obj_stop: float = math.inf) -> LagrangeSolution:
        warm = self._warm if lam0 is None else lam0
        if self.penalty is None:
            sol = solve_lambda_unpenalized(G, self.opts, warm, self._certificate, obj_stop=obj_stop)
            if sol.status == UNBOUNDED:
                if sol.certificate is not None:
                    self._certificate = sol.certificate
            elif sol.status != STOPPED:
                self._warm = sol.lam
            return sol
        sol = solve_lambda(G, self.penalty, self.opts, warm, obj_stop=obj_stop)
        if sol.status == MAX_ITER and warm is not None:
            # a warm start should never hurt; retry cold before giving up
            cold = solve_lambda(G, self.penalty, self.opts, None, obj_stop=obj_stop)
            if cold.objective >= sol.objective or cold.status == STOPPED:
                sol = cold
        if sol.status != STOPPED:
            self._warm = sol.lam
        return sol


def _solve_generic(G, penalty: PenaltySpec, opts: SolverOptions, lam0, record_history, obj_stop=math.inf):
    """Proximal Newton for a general convex penalty.

    The penalty is split as tau*|t| + nu*h(t) with tau = nu*rho'(0+) and
    h(t) = rho(t) - rho'(0+) t, which is convex and continuously
    differentiable; h joins the smooth part.
    """
    n, r = G.shape
    nu, tau, c0 = penalty.nu, penalty.threshold, penalty.rho_prime_at_zero
    eps = opts.feasibility_floor

    def full_obj(s, lam):
        return float(np.mean(np.log1p(s))) - penalty_value(penalty, lam)

    lam = lam0.copy()
    s = G @ lam
    if np.any(1.0 + s < eps):
        lam[:] = 0.0
        s[:] = 0.0
    obj = full_obj(s, lam)
    history = [obj]
    status = MAX_ITER
    it = 0
    while True:
        w = 1.0 / (1.0 + s)
        a = np.abs(lam)
        extra = np.where(lam != 0, -nu * (penalty.rho_prime(a) - c0) * np.sign(lam), 0.0)
        grad = (G.T @ w) / n + extra
        res = np.where(
            lam > 0, np.abs(grad - tau),
            np.where(lam < 0, np.abs(grad + tau), np.maximum(np.abs(grad) - tau, 0.0)),
        )
        if not np.all(np.isfinite(res)):
            raise SolverError("numerical breakdown in the inner solver")
        if obj > obj_stop:
            status = STOPPED
            break
        if res.max() <= opts.tol:
            status = CONVERGED
            break
        if it >= opts.max_iter:
            break
        A = np.flatnonzero((lam != 0) | (np.abs(grad) > tau))
        WG = G[:, A] * w[:, None]
        M = WG.T @ WG / n + np.diag(nu * np.asarray(penalty.rho_second(a[A]), dtype=np.float64))
        M[np.diag_indices_from(M)] += 1e-10 * np.trace(M) / len(A) + 1e-300
        lamA, gA = lam[A], grad[A]
        x, d, Md = lamA.copy(), np.zeros(len(A)), np.zeros(len(A))
        for _ in range(1000):
            maxdelta = 0.0
            for k in range(len(A)):
                c = gA[k] - Md[k] + M[k, k] * (d[k] + lamA[k])
                xn = np.sign(c) * max(abs(c) - tau, 0.0) / M[k, k]
                delta = xn - x[k]
                if delta != 0.0:
                    x[k] = xn
                    d[k] += delta
                    Md += M[:, k] * delta
                maxdelta = max(maxdelta, abs(delta))
            if maxdelta <= 1e-13 * (1.0 + np.abs(x).max()):
                break
        pred = float(gA @ d - tau * (np.abs(x).sum() - np.abs(lamA).sum()))
        if not pred > 0:
            break
        Gd = G[:, A] @ d
        t, accepted = 1.0, False
        while t > 1e-20:
            snew = s + t * Gd
            if np.all(1.0 + snew >= eps):
                lam_new = lam.copy()
                lam_new[A] = lamA + t * d
                obj_new = full_obj(snew, lam_new)
                if obj_new >= obj + 1e-4 * t * pred:
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            break
        lam, s, obj = lam_new, snew, obj_new
        history.append(obj)
        it += 1
    hist = np.array(history) if record_history else None
    return lam, status, it, obj, hist
