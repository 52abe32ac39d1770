"""Penalties P_nu(t) = nu * rho(t; nu) on the Lagrange multiplier magnitudes."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError

_CHECK_GRID = np.concatenate([[0.0], np.geomspace(1e-6, 50.0, 200)])


def _l1_rho(t):
    return np.asarray(t, dtype=np.float64)


def _l1_rho_prime(t):
    return np.ones_like(np.asarray(t, dtype=np.float64))


def _l1_rho_second(t):
    return np.zeros_like(np.asarray(t, dtype=np.float64))


@dataclass(frozen=True)
class PenaltySpec:
    """A member of the penalty class with its derivatives bound to ``nu``.

    ``rho``, ``rho_prime`` and ``rho_second`` are vectorised callables of t
    only. Use :meth:`l1` or :meth:`custom` rather than the constructor.
    """

    nu: float
    rho: Callable
    rho_prime: Callable
    rho_second: Callable
    rho_prime_at_zero: float
    kind: str = "l1"
    # the (t, nu) callables a custom penalty was built from, for with_nu()
    family: tuple | None = None

    @classmethod
    def l1(cls, nu: float) -> "PenaltySpec":
        nu = float(nu)
        if not nu > 0 or not np.isfinite(nu):
            raise ConfigError(f"penalty level nu must be positive, got {nu}")
        return cls(nu, _l1_rho, _l1_rho_prime, _l1_rho_second, 1.0, "l1")

    @classmethod
    def custom(cls, nu, rho, rho_prime, rho_second) -> "PenaltySpec":
        """Build from callables ``f(t, nu)``; checks class membership and convexity."""
        nu = float(nu)
        if not nu > 0 or not np.isfinite(nu):
            raise ConfigError(f"penalty level nu must be positive, got {nu}")
        f = lambda t: np.asarray(rho(np.asarray(t, dtype=np.float64), nu), dtype=np.float64)
        fp = lambda t: np.asarray(rho_prime(np.asarray(t, dtype=np.float64), nu), dtype=np.float64)
        fpp = lambda t: np.asarray(rho_second(np.asarray(t, dtype=np.float64), nu), dtype=np.float64)
        t = _CHECK_GRID
        vals = f(t)
        if abs(float(f(0.0))) > 1e-14:
            raise ConfigError("rho(0) must be 0")
        if np.any(np.diff(vals) < -1e-12):
            raise ConfigError("rho must be increasing on [0, inf)")
        mid = f(0.5 * (t[:-1] + t[1:]))
        if np.any(mid > 0.5 * (vals[:-1] + vals[1:]) + 1e-10 * (1 + np.abs(vals[1:]))):
            raise ConfigError("rho must be convex for the penalized solver")
        d0 = float(fp(1e-12))
        if not d0 > 0 or not np.isfinite(d0):
            raise ConfigError("rho'(0+) must be positive and finite")
        # rho'(0+) must not depend on nu
        for other in (0.5 * nu, 2.0 * nu):
            if abs(float(np.asarray(rho_prime(1e-12, other))) - d0) > 1e-8 * max(1.0, d0):
                raise ConfigError("rho'(0+) must be independent of nu")
        return cls(nu, f, fp, fpp, d0, "custom", family=(rho, rho_prime, rho_second))

    def with_nu(self, nu: float) -> "PenaltySpec":
        if self.kind == "l1":
            return PenaltySpec.l1(nu)
        return PenaltySpec.custom(nu, *self.family)

    @property
    def threshold(self) -> float:
        """nu * rho'(0+): half-width of the subdifferential at zero."""
        return self.nu * self.rho_prime_at_zero


def penalty_value(spec: PenaltySpec, lam) -> float:
    """sum_j P_nu(|lambda_j|)."""
    a = np.abs(np.asarray(lam, dtype=np.float64))
    if spec.kind == "l1":
        return spec.nu * float(a.sum())
    return spec.nu * float(np.sum(spec.rho(a)))


def penalty_subgradient_interval(spec: PenaltySpec, lambda_j: float) -> tuple[float, float]:
    """Subdifferential of t -> P_nu(|t|) at ``lambda_j`` as a closed interval."""
    lambda_j = float(lambda_j)
    if lambda_j == 0.0:
        return (-spec.threshold, spec.threshold)
    v = spec.nu * float(spec.rho_prime(abs(lambda_j))) * np.sign(lambda_j)
    return (v, v)
