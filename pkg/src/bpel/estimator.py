"""Support extraction, sandwich matrices, bias correction and BIC tuning of nu.

For the support R of the multiplier at the estimate,

    V = E_n[g_R g_R'],  Gamma = E_n[d g_R / d theta],  H = Gamma' V^-1 Gamma,
    psi = H^-1 Gamma' V^-1 eta_R,

and theta_hat - psi is asymptotically N(theta_0, H^-1 / n).
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .errors import ConfigError, EmptySupportError, NumericalError, SingularMatrixError
from .likelihood import PosteriorEvaluator, PosteriorSpec
from .model import Dataset, MomentModel, evaluate_moments, mean_moments
from .penalty import PenaltySpec
from .samplers import SamplerConfig, posterior_mean

BIC_FLOOR = 1e-300
# V is treated as singular when its condition number exceeds this
_MAX_CONDITION = 1e12


def extract_support(sol_or_lam, threshold: float = 1e-6) -> tuple:
    """0-based indices j with |lambda_j| > threshold."""
    lam = getattr(sol_or_lam, "lam", sol_or_lam)
    lam = np.asarray(lam, dtype=np.float64)
    return tuple(np.flatnonzero(np.abs(lam) > threshold).tolist())


def _jacobian_fd(model: MomentModel, data: Dataset, theta: np.ndarray, cols) -> np.ndarray:
    """Mean jacobian of g_R by central differences, step 1e-6 (1 + |theta_k|)."""
    out = np.empty((len(cols), theta.size))
    for k in range(theta.size):
        h = 1e-6 * (1.0 + abs(theta[k]))
        up, dn = theta.copy(), theta.copy()
        up[k] += h
        dn[k] -= h
        diff = evaluate_moments(model, data, up)[:, cols] - evaluate_moments(model, data, dn)[:, cols]
        out[:, k] = diff.mean(axis=0) / (2 * h)
    return out


def mean_jacobian(model: MomentModel, data: Dataset, theta, support=None) -> np.ndarray:
    """E_n[dg_R/dtheta] (|R| x p): analytic when the model has one, else finite differences."""
    theta = np.asarray(theta, dtype=np.float64)
    cols = list(range(model.r)) if support is None else list(support)
    if model.jacobian is None:
        return _jacobian_fd(model, data, theta, cols)
    J = np.asarray(model.jacobian(data.observations, theta), dtype=np.float64)
    if J.shape != (data.n, model.r, theta.size):
        raise ConfigError(f"jacobian has shape {J.shape}, expected {(data.n, model.r, theta.size)}")
    return J[:, cols, :].mean(axis=0)


@dataclass(frozen=True)
class Sandwich:
    v_hat: np.ndarray
    gamma_hat: np.ndarray
    h_hat: np.ndarray


def sandwich(model: MomentModel, data: Dataset, theta, support: Sequence[int]) -> Sandwich:
    """V, Gamma and H = Gamma' V^-1 Gamma on the support (via a Cholesky factor of V)."""
    support = list(support)
    if not support:
        raise EmptySupportError(
            "the multiplier support is empty at this theta; use a smaller nu "
            "(or a nu grid reaching lower) or a different theta"
        )
    theta = np.asarray(theta, dtype=np.float64)
    G = evaluate_moments(model, data, theta)[:, support]
    V = (G.T @ G) / data.n
    V = 0.5 * (V + V.T)
    eig = np.linalg.eigvalsh(V)
    if not eig[0] > eig[-1] / _MAX_CONDITION:
        raise SingularMatrixError(
            f"V is singular or ill-conditioned (smallest eigenvalue {eig[0]:.3g}, "
            f"largest {eig[-1]:.3g})",
            smallest_eigenvalue=float(eig[0]),
        )
    gamma = mean_jacobian(model, data, theta, support)
    L = np.linalg.cholesky(V)
    A = solve_triangular(L, gamma, lower=True)
    H = A.T @ A
    return Sandwich(V, gamma, 0.5 * (H + H.T))


def bias_correct(theta_hat, sw: Sandwich, eta_support, n: int, level: float = 0.95):
    """(psi, theta_hat - psi, ci) with ci[k] = corrected_k -/+ z sqrt((H^-1)_kk / n)."""
    if not 0 < level < 1:
        raise ConfigError("confidence level must lie in (0, 1)")
    theta_hat = np.asarray(theta_hat, dtype=np.float64)
    eta = np.asarray(eta_support, dtype=np.float64)
    if eta.shape != (sw.v_hat.shape[0],):
        raise ConfigError("eta must be restricted to the support")
    try:
        Hf = cho_factor(sw.h_hat, lower=True)
    except np.linalg.LinAlgError:
        eig = np.linalg.eigvalsh(sw.h_hat)
        raise SingularMatrixError(
            f"H is singular (smallest eigenvalue {eig[0]:.3g}); Gamma lacks full column rank",
            smallest_eigenvalue=float(eig[0]),
        ) from None
    Vf = cho_factor(sw.v_hat, lower=True)
    psi = cho_solve(Hf, sw.gamma_hat.T @ cho_solve(Vf, eta))
    corrected = theta_hat - psi
    h_inv = cho_solve(Hf, np.eye(theta_hat.size))
    z = NormalDist().inv_cdf(0.5 + 0.5 * level)
    half = z * np.sqrt(np.diag(h_inv) / n)
    ci = np.column_stack([corrected - half, corrected + half])
    return psi, corrected, ci


def bic(model: MomentModel, data: Dataset, theta, support_size: int) -> float:
    """log max(floor, |gbar(theta)|^2 / r) + |R| log(n) / n."""
    gbar = mean_moments(evaluate_moments(model, data, theta))
    fit = float(gbar @ gbar) / model.r
    return math.log(max(BIC_FLOOR, fit)) + support_size * math.log(data.n) / data.n


def nu_interval(n: int, r: int) -> tuple[float, float]:
    """[0.05, 0.75] * sqrt(log(r) / n)."""
    if n < 1 or r < 2:
        raise ConfigError("the nu interval needs n >= 1 and r >= 2")
    base = math.sqrt(math.log(r) / n)
    return 0.05 * base, 0.75 * base


def nu_grid(n: int, r: int, size: int) -> np.ndarray:
    if size < 2:
        raise ConfigError("the nu grid needs at least two points")
    lo, hi = nu_interval(n, r)
    return np.linspace(lo, hi, size)


def select_nu(nus, bics) -> int:
    """Index of the smallest finite BIC; ties go to the larger nu."""
    nus = np.asarray(nus, dtype=np.float64)
    bics = np.asarray(bics, dtype=np.float64)
    ok = np.isfinite(bics)
    if not ok.any():
        raise NumericalError("no finite BIC value to select from")
    best = bics[ok].min()
    idx = np.flatnonzero(ok & (bics == best))
    return int(idx[np.argmax(nus[idx])])


@dataclass(frozen=True)
class BicPoint:
    nu: float
    bic: float
    support_size: int
    theta_hat: tuple


def _penalized(post: PosteriorSpec, nu: float) -> PosteriorSpec:
    pen = post.penalty.with_nu(nu) if post.penalty is not None else PenaltySpec.l1(nu)
    return post.with_penalty(pen)


def tune_nu(
    post: PosteriorSpec,
    sampler: SamplerConfig,
    grid_size: int = 10,
    theta0=None,
    seed: int = 0,
) -> tuple[float, list]:
    """BIC-minimizing nu over the equispaced grid on the nu interval.

    At each nu the estimate is the sampler's posterior mean. Grid points
    where sampling or the solve fails are skipped with a warning.
    """
    theta0 = post.space.center if theta0 is None else np.asarray(theta0, dtype=np.float64)
    trace = []
    for nu in nu_grid(post.n, post.model.r, grid_size):
        nu = float(nu)
        pnu = _penalized(post, nu)
        try:
            theta_hat = posterior_mean(pnu, sampler, theta0, seed)
            sol = PosteriorEvaluator(pnu).solve(theta_hat)
        except NumericalError as exc:
            warnings.warn(f"nu={nu:.6g} skipped: {exc}", RuntimeWarning, stacklevel=2)
            continue
        support = extract_support(sol, pnu.solver_opts.support_threshold)
        value = bic(pnu.model, pnu.data, theta_hat, len(support))
        trace.append(BicPoint(nu, value, len(support), tuple(map(float, theta_hat))))
    if not trace:
        raise NumericalError("BIC tuning failed at every grid point")
    k = select_nu([t.nu for t in trace], [t.bic for t in trace])
    return trace[k].nu, trace


def _arr(a):
    return np.asarray(a, dtype=np.float64).tolist()


@dataclass
class EstimatorReport:
    theta_hat: np.ndarray
    support: tuple
    v_hat: np.ndarray
    gamma_hat: np.ndarray
    h_hat: np.ndarray
    psi_hat: np.ndarray
    theta_corrected: np.ndarray
    ci: np.ndarray
    nu: float
    level: float = 0.95
    n: int = 0
    bic_trace: list = field(default_factory=list)

    def __post_init__(self):
        eig = np.linalg.eigvalsh(self.h_hat)
        if not eig[0] > 0:
            raise SingularMatrixError("H is not positive definite", smallest_eigenvalue=float(eig[0]))

    def to_dict(self) -> dict:
        return {
            "theta_hat": _arr(self.theta_hat),
            "support": [int(j) for j in self.support],
            "v_hat": _arr(self.v_hat),
            "gamma_hat": _arr(self.gamma_hat),
            "h_hat": _arr(self.h_hat),
            "psi_hat": _arr(self.psi_hat),
            "theta_corrected": _arr(self.theta_corrected),
            "ci": _arr(self.ci),
            "level": float(self.level),
            "nu": float(self.nu),
            "n": int(self.n),
            "bic_trace": [
                {"nu": t.nu, "bic": t.bic, "support_size": t.support_size, "theta_hat": list(t.theta_hat)}
                for t in self.bic_trace
            ],
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=False)
            fh.write("\n")

    def csv_row(self) -> dict:
        row = {"nu": repr(float(self.nu)), "n": self.n, "support_size": len(self.support)}
        for k in range(self.theta_hat.size):
            row[f"theta_hat_{k + 1}"] = repr(float(self.theta_hat[k]))
            row[f"psi_{k + 1}"] = repr(float(self.psi_hat[k]))
            row[f"theta_corrected_{k + 1}"] = repr(float(self.theta_corrected[k]))
            row[f"ci_lo_{k + 1}"] = repr(float(self.ci[k, 0]))
            row[f"ci_hi_{k + 1}"] = repr(float(self.ci[k, 1]))
        return row

    def to_csv(self, path) -> None:
        row = self.csv_row()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
            w.writeheader()
            w.writerow(row)


def report_at(
    post: PosteriorSpec, theta_hat, level: float = 0.95, bic_trace: Optional[list] = None
) -> EstimatorReport:
    """Support, sandwich and bias correction at a given estimate."""
    if post.penalty is None:
        raise ConfigError("the bias-corrected estimator needs a penalized posterior")
    theta_hat = np.asarray(theta_hat, dtype=np.float64)
    sol = PosteriorEvaluator(post).solve(theta_hat)
    support = extract_support(sol, post.solver_opts.support_threshold)
    sw = sandwich(post.model, post.data, theta_hat, support)
    psi, corrected, ci = bias_correct(theta_hat, sw, sol.eta[list(support)], post.n, level)
    return EstimatorReport(
        theta_hat, support, sw.v_hat, sw.gamma_hat, sw.h_hat, psi, corrected, ci,
        post.penalty.nu, level, post.n, list(bic_trace or []),
    )


def estimate(
    post: PosteriorSpec,
    sampler: SamplerConfig,
    theta0=None,
    seed: int = 0,
    tune_grid: int = 0,
    level: float = 0.95,
) -> EstimatorReport:
    """Posterior mean, optionally at the BIC-tuned nu, with its bias-corrected report."""
    theta0 = post.space.center if theta0 is None else np.asarray(theta0, dtype=np.float64)
    trace = []
    if tune_grid:
        nu, trace = tune_nu(post, sampler, tune_grid, theta0, seed)
        post = _penalized(post, nu)
        # same sampler and seed as in the tuning run at this nu
        theta_hat = np.array(next(t.theta_hat for t in trace if t.nu == nu))
    elif post.penalty is None:
        raise ConfigError("give a penalty level or a tuning grid")
    else:
        theta_hat = posterior_mean(post, sampler, theta0, seed)
    return report_at(post, theta_hat, level, trace)
