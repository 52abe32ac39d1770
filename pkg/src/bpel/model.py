"""Datasets, moment models and the instrumental-variable simulation design."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numba import njit

from . import _rng
from .errors import ConfigError, MomentEvaluationError

DEFAULT_ERROR_COV = ((0.43, 0.3, 0.3), (0.3, 0.34, 0.09), (0.3, 0.09, 0.34))
DEFAULT_THETA0 = (0.5, 0.5)
LINKS = ("linear", "sin")
INSTRUMENT_DISTS = ("gaussian", "student_t3")


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """An ``n x d`` table of i.i.d. observations."""

    observations: np.ndarray
    label: str = ""
    columns: tuple = ()

    def __post_init__(self):
        X = np.array(self.observations, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[0] < 1:
            raise ConfigError("a dataset needs at least one row of observations")
        if not np.all(np.isfinite(X)):
            raise ConfigError("dataset contains non-finite entries")
        X = np.ascontiguousarray(X)
        X.setflags(write=False)
        object.__setattr__(self, "observations", X)
        cols = tuple(self.columns) or tuple(f"x{j + 1}" for j in range(X.shape[1]))
        if len(cols) != X.shape[1]:
            raise ConfigError(f"{len(cols)} column names for {X.shape[1]} columns")
        object.__setattr__(self, "columns", cols)

    @property
    def n(self) -> int:
        return self.observations.shape[0]

    @property
    def d(self) -> int:
        return self.observations.shape[1]


@dataclass(frozen=True)
class ParameterSpace:
    """A compact box ``[lower, upper]`` in R^p."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo, hi = np.atleast_1d(_frozen(self.lower)), np.atleast_1d(_frozen(self.upper))
        if lo.shape != hi.shape or lo.ndim != 1 or lo.size < 1:
            raise ConfigError("parameter box bounds must be matching 1-d vectors")
        if not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)) or np.any(lo >= hi):
            raise ConfigError("parameter box needs finite bounds with lower < upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def box(cls, lo: float, hi: float, p: int) -> "ParameterSpace":
        return cls(np.full(p, float(lo)), np.full(p, float(hi)))

    @property
    def p(self) -> int:
        return self.lower.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, theta) -> bool:
        theta = np.asarray(theta, dtype=np.float64)
        return bool(((theta >= self.lower) & (theta <= self.upper)).all())


def default_iv_space() -> ParameterSpace:
    return ParameterSpace.box(-5.0, 5.0, 2)


@dataclass(frozen=True)
class MomentModel:
    """Estimating function g(x; theta) with r components.

    ``moments(X, theta)`` is vectorised over rows: it receives an ``n x d``
    array and returns ``n x r``. ``jacobian(X, theta)``, when given,
    returns the ``n x r x p`` array of dg_j/dtheta_k.
    """

    r: int
    p: int
    moments: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jacobian: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    name: str = "moment-model"

    def eval(self, x, theta) -> np.ndarray:
        """g at a single observation, as an r-vector."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return self.moments(x, np.asarray(theta, dtype=np.float64))[0]

    def subset(self, columns: Sequence[int], name: str | None = None) -> "MomentModel":
        """The model keeping only the moment components in ``columns``."""
        cols = np.asarray(columns, dtype=np.intp)
        if cols.size == 0 or cols.min() < 0 or cols.max() >= self.r:
            raise ConfigError(f"moment subset {list(cols)} out of range for r={self.r}")
        full, jac = self.moments, self.jacobian

        def sub_jac(X, theta):
            return jac(X, theta)[:, cols, :]
        return MomentModel(
            r=int(cols.size),
            p=self.p,
            moments=lambda X, theta: full(X, theta)[:, cols],
            jacobian=sub_jac if jac is not None else None,
            name=name or f"{self.name}[{cols.size} moments]",
        )


def evaluate_moments(model: MomentModel, data: Dataset, theta) -> np.ndarray:
    """The ``n x r`` matrix whose row i is g(X_i; theta)."""
    theta = np.asarray(theta, dtype=np.float64)
    G = np.asarray(model.moments(data.observations, theta), dtype=np.float64)
    if G.shape != (data.n, model.r):
        raise MomentEvaluationError(
            f"{model.name} returned shape {G.shape}, expected {(data.n, model.r)}"
        )
    if not math.isfinite(G.sum()) and not np.isfinite(G).all():
        i, j = np.argwhere(~np.isfinite(G))[0]
        raise MomentEvaluationError(
            f"{model.name}: non-finite moment at row {i}, component {j} (theta={theta.tolist()})",
            row=int(i),
            component=int(j),
        )
    return G


def mean_moments(G) -> np.ndarray:
    G = np.asarray(G, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] < 1:
        raise ValueError("mean_moments needs an n x r matrix with n >= 1")
    return G.mean(axis=0)


@dataclass(frozen=True)
class IvSimConfig:
    """Simulation design for y = h(u'theta0) + e0 with r instruments."""

    n: int = 120
    r: int = 80
    link: str = "linear"
    theta0: tuple = DEFAULT_THETA0
    instrument_dist: str = "gaussian"
    error_cov: tuple = DEFAULT_ERROR_COV
    seed: int = 0
    space: ParameterSpace = field(default_factory=default_iv_space)

    def __post_init__(self):
        if int(self.n) < 1:
            raise ConfigError("n must be positive")
        if int(self.r) < 4:
            raise ConfigError("the IV design needs r >= 4 instruments")
        if self.link not in LINKS:
            raise ConfigError(f"link must be one of {LINKS}, got {self.link!r}")
        if self.instrument_dist not in INSTRUMENT_DISTS:
            raise ConfigError(f"instrument_dist must be one of {INSTRUMENT_DISTS}")
        theta0 = tuple(float(t) for t in self.theta0)
        if len(theta0) != 2:
            raise ConfigError("theta0 must have two components")
        if not self.space.contains(theta0):
            raise ConfigError(f"theta0={theta0} lies outside the parameter space")
        cov = np.asarray(self.error_cov, dtype=np.float64)
        if cov.shape != (3, 3):
            raise ConfigError("error_cov must be 3 x 3")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "r", int(self.r))
        object.__setattr__(self, "theta0", theta0)
        object.__setattr__(self, "error_cov", tuple(map(tuple, cov.tolist())))
        object.__setattr__(self, "seed", int(self.seed))
        _cov_factor(cov)

    def with_(self, **changes) -> "IvSimConfig":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return IvSimConfig(**kw)


def _cov_factor(cov: np.ndarray) -> np.ndarray:
    """Cholesky factor; PSD (e.g. zero) matrices fall back to an eigen factor."""
    if not np.allclose(cov, cov.T, rtol=0, atol=1e-12):
        raise ConfigError("error_cov must be symmetric")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        scale = max(1.0, float(np.abs(vals).max()))
        if vals.min() < -1e-12 * scale:
            raise ConfigError(
                f"error_cov is not positive semi-definite (eigenvalue {vals.min():.3g})"
            ) from None
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def iv_columns(r: int) -> tuple:
    return ("y", "u1", "u2") + tuple(f"z{j + 1}" for j in range(r))


def simulate_iv(config: IvSimConfig, rng: np.random.Generator | None = None) -> Dataset:
    """Draw rows X_i = (y_i, u_i1, u_i2, z_i1..z_ir).

    Without ``rng`` the draw uses the sub-stream ``(config.seed, "simulate_iv")``.
    Draw order: instruments (n x r), then standard-normal errors (n x 3).
    """
    if rng is None:
        rng = _rng.substream(config.seed, "simulate_iv")
    n, r = config.n, config.r
    if config.instrument_dist == "gaussian":
        Z = rng.standard_normal((n, r))
    else:
        Z = rng.standard_t(3, size=(n, r))
    L = _cov_factor(np.asarray(config.error_cov))
    E = rng.standard_normal((n, 3)) @ L.T
    U = np.empty((n, 2))
    U[:, 0] = 0.5 * Z[:, 0] + 0.5 * Z[:, 1] + E[:, 1]
    U[:, 1] = 0.5 * Z[:, 2] + 0.5 * Z[:, 3] + E[:, 2]
    index = U @ np.asarray(config.theta0)
    y = (index if config.link == "linear" else np.sin(index)) + E[:, 0]
    X = np.column_stack([y, U, Z])
    label = (
        f"iv n={n} r={r} link={config.link} z={config.instrument_dist} seed={config.seed}"
    )
    return Dataset(X, label=label, columns=iv_columns(r))


@njit(cache=True)
def _iv_moments(X, theta, r, use_sin):
    n = X.shape[0]
    G = np.empty((n, r))
    for i in range(n):
        idx = X[i, 1] * theta[0] + X[i, 2] * theta[1]
        res = X[i, 0] - (np.sin(idx) if use_sin else idx)
        for j in range(r):
            G[i, j] = res * X[i, 3 + j]
    return G


def iv_moment_model(r: int | IvSimConfig, link: str = "linear") -> MomentModel:
    """g(X; theta) = {y - h(u'theta)} z with its analytic jacobian."""
    if isinstance(r, IvSimConfig):
        r, link = r.r, r.link
    if link not in LINKS:
        raise ConfigError(f"link must be one of {LINKS}, got {link!r}")
    r = int(r)

    if link == "linear":
        def moments(X, theta):
            return _iv_moments(X, np.asarray(theta, dtype=np.float64), r, False)

        def jacobian(X, theta):
            return -X[:, 3:3 + r, None] * X[:, None, 1:3]
    else:
        def moments(X, theta):
            return _iv_moments(X, np.asarray(theta, dtype=np.float64), r, True)

        def jacobian(X, theta):
            c = np.cos(X[:, 1:3] @ theta)
            return -(c[:, None, None] * X[:, 3:3 + r, None]) * X[:, None, 1:3]

    return MomentModel(r=r, p=2, moments=moments, jacobian=jacobian, name=f"iv-{link}-r{r}")


def write_dataset_csv(data: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(data.columns)
        for row in data.observations:
            w.writerow([repr(float(v)) for v in row])


def read_dataset_csv(path, label: str | None = None) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"{path}: empty file")
    header, body = [h.strip() for h in rows[0]], rows[1:]
    try:
        X = np.array([[float(v) for v in row] for row in body if row], dtype=np.float64)
    except ValueError as exc:
        raise ConfigError(f"{path}: non-numeric entry ({exc})") from None
    if X.size == 0:
        raise ConfigError(f"{path}: no data rows")
    return Dataset(X, label=label or str(path), columns=tuple(header))


def is_iv_dataset(data: Dataset) -> bool:
    r = data.d - 3
    return r >= 1 and data.columns == iv_columns(r)


def iv_instruments(data: Dataset) -> int:
    if not is_iv_dataset(data):
        raise ConfigError("dataset header is not y,u1,u2,z1..zr")
    return data.d - 3

