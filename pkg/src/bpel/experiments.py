"""Config-driven simulation studies and their CSV/JSON outputs.

A config is a TOML (or JSON) document with a top-level ``kind`` in
``efficiency, mse1, mse2, estimate, tune`` and optional sections ``dgp``,
``penalty``, ``prior``, ``solver``, ``mh``, ``mamis``, ``starts``,
``baseline``, ``grid``, ``efficiency`` and ``estimate``; see the README for
the schema. Every random quantity is drawn from a named sub-stream of the
master seed, so a run's rows do not depend on worker count or order.
"""
from __future__ import annotations

import csv
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import _rng
from .baselines import SimplexOptions, grid_mode, minimize_profile, standard_el_estimate
from .errors import BPELError, ConfigError
from .estimator import EstimatorReport, estimate, tune_nu
from .inner import SolverOptions
from .likelihood import PosteriorEvaluator, PosteriorSpec, PriorSpec
from .model import (
    Dataset,
    IvSimConfig,
    ParameterSpace,
    iv_instruments,
    iv_moment_model,
    read_dataset_csv,
    simulate_iv,
)
from .penalty import PenaltySpec
from .samplers import (
    RwProposal,
    SamplerConfig,
    StudentTProposal,
    chain_mean,
    count_proposals,
    default_stage_sizes,
    mamis_sample,
    mh_sample,
    weighted_mean,
)

KINDS = ("efficiency", "mse1", "mse2", "estimate", "tune")
METRIC_FIELDS = ("method", "n", "r", "nu", "link", "value", "replications", "wall_time_s", "seed")
THREADS_ENV = "BPEL_THREADS"
DEFAULT_METHODS = {"mse1": ("mh", "mamis", "simplex"), "mse2": ("mamis", "mh", "standard_el")}
# "grid_mode" reports the MSE_1 target itself (a zero reference row)
ALLOWED_METHODS = {"mse1": {"mh", "mamis", "simplex", "grid_mode"}, "mse2": {"mh", "mamis", "standard_el"}}


@dataclass(frozen=True)
class MhSettings:
    C: float = 10.0
    burnin: int = 500
    adapt_burnin: bool = True
    # reported sample sizes; all are prefixes of one chain of the largest size
    sizes: tuple = (1500, 2500, 3500)


@dataclass(frozen=True)
class MamisSettings:
    stages: int = 5
    df: float = 3.0
    # one independent run per total size
    sizes: tuple = (1500, 2500, 3500)


@dataclass(frozen=True)
class StartGrid:
    per_dim: int = 7
    lo: float = -3.0
    hi: float = 4.0

    def points(self, p: int = 2) -> list:
        axis = np.linspace(self.lo, self.hi, self.per_dim)
        return [np.array([axis[i] for i in idx]) for idx in np.ndindex(*(self.per_dim,) * p)]


@dataclass(frozen=True)
class GridSpec:
    lo: float = -0.5
    hi: float = 1.5
    points: int = 101


@dataclass(frozen=True)
class EfficiencySettings:
    r_values: tuple = (20, 40, 60, 80, 100, 120, 140, 160, 180, 200)
    sigma2: float = 1e-4
    theta0: tuple = (0.3, 0.3)
    nu: float = 0.03
    accepts: int = 5
    cap: int = 200_000


@dataclass(frozen=True)
class EstimateSettings:
    data: Optional[str] = None
    method: str = "mh"
    draws: int = 3500
    theta0: Optional[tuple] = None
    level: float = 0.95


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    dgp: IvSimConfig = field(default_factory=IvSimConfig)
    replications: int = 20
    seed: int = 0
    nu: Optional[float] = 0.03
    # > 0: tune nu by BIC over this many grid points instead of using ``nu``
    nu_grid: int = 0
    prior: PriorSpec = field(default_factory=PriorSpec)
    solver: SolverOptions = field(default_factory=SolverOptions)
    mh: MhSettings = field(default_factory=MhSettings)
    mamis: MamisSettings = field(default_factory=MamisSettings)
    starts: StartGrid = field(default_factory=StartGrid)
    baseline: SimplexOptions = field(default_factory=SimplexOptions)
    grid: GridSpec = field(default_factory=GridSpec)
    efficiency: EfficiencySettings = field(default_factory=EfficiencySettings)
    estimate: EstimateSettings = field(default_factory=EstimateSettings)
    methods: tuple = ()
    output: str = "results"
    threads: int = 1
    timing: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.replications < 1:
            raise ConfigError("replications must be at least 1")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if self.nu_grid == 0 and self.kind not in ("efficiency", "tune") and not (self.nu and self.nu > 0):
            raise ConfigError("give a positive nu or a BIC grid size nu_grid >= 2")
        if self.nu_grid == 1 or self.nu_grid < 0:
            raise ConfigError("nu_grid must be 0 (fixed nu) or at least 2")
        space = self.dgp.space
        for corner in (self.starts.lo, self.starts.hi):
            if not space.contains(np.full(space.p, corner)):
                raise ConfigError("the initial-point grid must lie inside the parameter space")
        if self.starts.per_dim < 1:
            raise ConfigError("starts.per_dim must be positive")
        if self.kind in DEFAULT_METHODS and not self.methods:
            object.__setattr__(self, "methods", DEFAULT_METHODS[self.kind])
        bad = set(self.methods) - ALLOWED_METHODS.get(self.kind, set(self.methods))
        if bad:
            raise ConfigError(f"methods {sorted(bad)} are not available for kind={self.kind}")
        for sizes in (self.mh.sizes, self.mamis.sizes):
            if not sizes or min(sizes) < 1:
                raise ConfigError("sampler sizes must be positive")
        if self.estimate.method not in ("mh", "mamis"):
            raise ConfigError("estimate.method must be mh or mamis")

    def with_(self, **changes) -> "ExperimentConfig":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(changes)
        return ExperimentConfig(**kw)


# ---------------------------------------------------------------- config io


def _build(cls, section: dict, name: str, convert=None):
    if not isinstance(section, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    kw = dict(section)
    for k, v in kw.items():
        if isinstance(v, list):
            kw[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
    if convert:
        kw = convert(kw)
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def _dgp(kw):
    if "space" in kw:
        lo, hi = kw.pop("space")
        kw["space"] = ParameterSpace.box(lo, hi, 2)
    return kw


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Build and validate an :class:`ExperimentConfig` from a parsed document."""
    doc = dict(doc)
    kw = {}
    sections = {
        "dgp": (IvSimConfig, _dgp),
        "prior": (PriorSpec, None),
        "solver": (SolverOptions, None),
        "mh": (MhSettings, None),
        "mamis": (MamisSettings, None),
        "starts": (StartGrid, None),
        "baseline": (SimplexOptions, None),
        "grid": (GridSpec, None),
        "efficiency": (EfficiencySettings, None),
        "estimate": (EstimateSettings, None),
    }
    for name, (cls, conv) in sections.items():
        if name in doc:
            kw[name] = _build(cls, doc.pop(name), name, conv)
    if "penalty" in doc:
        pen = dict(doc.pop("penalty"))
        if pen.pop("kind", "l1") != "l1":
            raise ConfigError("only the l1 penalty is available from config files")
        if "nu" in pen:
            kw["nu"] = pen.pop("nu")
        if "nu_grid" in pen:
            kw["nu_grid"] = pen.pop("nu_grid")
        if pen:
            raise ConfigError(f"unknown keys in [penalty]: {sorted(pen)}")
    if "kind" not in doc:
        raise ConfigError("config needs a top-level kind")
    # nu and nu_grid may also sit at top level (as config.json writes them)
    top = {f.name for f in fields(ExperimentConfig)} - set(sections)
    clash = {"nu", "nu_grid"} & set(doc) & set(kw)
    if clash:
        raise ConfigError(f"{sorted(clash)} given both at top level and in [penalty]")
    unknown = set(doc) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    for k, v in doc.items():
        kw[k] = tuple(v) if isinstance(v, list) else v
    try:
        return ExperimentConfig(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        if path.suffix.lower() == ".json":
            doc = json.loads(raw)
        else:
            doc = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return config_from_dict(doc)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "dgp":
            v = {k: getattr(v, k) for k in v.__dataclass_fields__ if k != "space"}
            v["space"] = [float(cfg.dgp.space.lower[0]), float(cfg.dgp.space.upper[0])]
        elif hasattr(v, "__dataclass_fields__"):
            v = asdict(v)
        d[f.name] = v
    return json.loads(json.dumps(d))


# ---------------------------------------------------------------- results


@dataclass(frozen=True)
class MetricRow:
    method: str
    n: int
    r: int
    nu: float
    link: str
    value: float
    replications: int
    wall_time_s: float
    seed: int

    def as_row(self) -> list:
        return [
            self.method, self.n, self.r, repr(float(self.nu)), self.link,
            repr(float(self.value)), self.replications, repr(float(self.wall_time_s)), self.seed,
        ]


def write_metrics(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for row in rows:
            w.writerow(row.as_row())


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def resolve_threads(cli_value: Optional[int], cfg_value: int = 1) -> int:
    """CLI flag, then the BPEL_THREADS environment variable, then the config."""
    if cli_value is not None:
        return max(1, int(cli_value))
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return cfg_value


def _map(fn, tasks, threads: int) -> list:
    if threads <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, tasks))


# ---------------------------------------------------------------- helpers


def replication_data(cfg: ExperimentConfig, rep: int, r: Optional[int] = None) -> Dataset:
    dgp = cfg.dgp.with_(seed=_rng.derive_seed(cfg.seed, "rep", rep))
    if r is not None:
        dgp = dgp.with_(r=int(r))
    return simulate_iv(dgp)


def _posterior(cfg: ExperimentConfig, data: Dataset, nu: Optional[float], r: Optional[int] = None):
    r = data.d - 3 if r is None else r
    model = iv_moment_model(r, cfg.dgp.link)
    pen = PenaltySpec.l1(nu) if nu else None
    return PosteriorSpec(model, data, pen, cfg.dgp.space, cfg.prior, cfg.solver)


_SIZE_LABELS = {1500: 1, 2500: 2, 3500: 3}


def method_label(prefix: str, size: int) -> str:
    """M-H-1/2/3 and MAMIS-1/2/3 for 1500/2500/3500 draws, else e.g. M-H[4000]."""
    k = _SIZE_LABELS.get(int(size))
    return f"{prefix}-{k}" if k else f"{prefix}[{int(size)}]"


def _clock(cfg):
    return time.perf_counter if cfg.timing else (lambda: 0.0)


# ---------------------------------------------------------------- efficiency


def _efficiency_task(args):
    cfg, r, rep = args
    eff = cfg.efficiency
    data = replication_data(cfg, rep, r)
    prop = RwProposal(eff.sigma2)
    clock = _clock(cfg)
    out = []
    for arm, nu in (("EL", None), ("PEL", eff.nu)):
        post = _posterior(cfg, data, nu, r)
        seed = _rng.derive_seed(cfg.seed, "count", arm, r, rep)
        t0 = clock()
        count, censored = count_proposals(post, prop, eff.theta0, eff.accepts, eff.cap, seed)
        out.append((r, rep, arm, nu or 0.0, count, int(censored), seed, clock() - t0))
    return out


def run_efficiency(cfg: ExperimentConfig, threads: int = 1) -> tuple[list, list]:
    """Mean proposals to ``accepts`` valid moves, EL vs PEL, per r; returns (metrics, runs)."""
    tasks = [(cfg, int(r), rep) for r in cfg.efficiency.r_values for rep in range(cfg.replications)]
    runs = [row for rows in _map(_efficiency_task, tasks, threads) for row in rows]
    metrics = []
    for r in cfg.efficiency.r_values:
        for arm in ("EL", "PEL"):
            sel = [x for x in runs if x[0] == r and x[2] == arm]
            metrics.append(MetricRow(
                arm, cfg.dgp.n, int(r), sel[0][3], cfg.dgp.link,
                float(np.mean([x[4] for x in sel])), cfg.replications,
                float(sum(x[7] for x in sel)), cfg.seed,
            ))
    return metrics, runs


# ---------------------------------------------------------------- mse


def _mse_task(args):
    """All starts and methods of one replication: rows of per-start results."""
    cfg, rep, target_kind = args
    data = replication_data(cfg, rep)
    clock = _clock(cfg)
    nu = cfg.nu
    if cfg.nu_grid:
        post0 = _posterior(cfg, data, None)
        sampler = SamplerConfig("mh", max(cfg.mh.sizes), cfg.mh.burnin, cfg.mh.C, cfg.mh.adapt_burnin)
        nu, _ = tune_nu(post0, sampler, cfg.nu_grid, seed=_rng.derive_seed(cfg.seed, "tune", rep))
    post = _posterior(cfg, data, nu)
    if target_kind == "mode":
        g = cfg.grid
        target, _ = grid_mode(post, [g.lo] * 2, [g.hi] * 2, g.points)
    else:
        target = np.asarray(cfg.dgp.theta0)
    ev = PosteriorEvaluator(post)
    rows = []

    def record(s, start, method, est, seed, status, dt):
        sq = float(np.sum((est - target) ** 2)) if est is not None else math.nan
        e = est if est is not None else (math.nan, math.nan)
        rows.append((rep, s, float(start[0]), float(start[1]), method, float(nu),
                     float(target[0]), float(target[1]), float(e[0]), float(e[1]), sq, status, seed, dt))

    for s, start in enumerate(cfg.starts.points()):
        if "grid_mode" in cfg.methods and target_kind == "mode":
            record(s, start, "grid_mode", target, 0, "ok", 0.0)
        if "mh" in cfg.methods:
            seed = _rng.derive_seed(cfg.seed, "mh", rep, s)
            t0 = clock()
            err = ""
            try:
                prop = RwProposal.n_logr(cfg.mh.C, cfg.mh.adapt_burnin)
                ev.reset()
                chain = mh_sample(post, prop, start, max(cfg.mh.sizes), cfg.mh.burnin, seed, evaluator=ev)
                if chain.aborted:
                    err = "aborted"
            except BPELError as exc:
                chain, err = None, type(exc).__name__
            dt = clock() - t0
            for size in sorted(cfg.mh.sizes):
                est = chain_mean(chain, size) if chain is not None and chain.K >= size else None
                record(s, start, method_label("M-H", size), est, seed, err or "ok", dt)
        if "mamis" in cfg.methods:
            for k, size in enumerate(sorted(cfg.mamis.sizes)):
                seed = _rng.derive_seed(cfg.seed, "mamis", rep, s, k)
                t0 = clock()
                try:
                    ev.reset()
                    init = StudentTProposal.standard(start, cfg.mamis.df)
                    ws = mamis_sample(post, init, default_stage_sizes(size, cfg.mamis.stages), seed, evaluator=ev)
                    est, status = weighted_mean(ws), "ok"
                except BPELError as exc:
                    est, status = None, type(exc).__name__
                record(s, start, method_label("MAMIS", size), est, seed, status, clock() - t0)
        for name in ("simplex", "standard_el"):
            if name not in cfg.methods:
                continue
            t0 = clock()
            try:
                if name == "simplex":
                    est = minimize_profile(post, start, cfg.baseline)[0]
                else:
                    est = standard_el_estimate(post.model, data, start, cfg.baseline, cfg.dgp.space)[0]
                status = "ok"
            except BPELError as exc:
                est, status = None, type(exc).__name__
            record(s, start, name, est, 0, status, clock() - t0)
    return rows


START_FIELDS = (
    "replication", "start", "start_1", "start_2", "method", "nu", "target_1", "target_2",
    "estimate_1", "estimate_2", "sq_error", "status", "seed", "wall_time_s",
)


def _run_mse(cfg: ExperimentConfig, target_kind: str, threads: int):
    tasks = [(cfg, rep, target_kind) for rep in range(cfg.replications)]
    rows = [row for rs in _map(_mse_task, tasks, threads) for row in rs]
    methods = list(dict.fromkeys(row[4] for row in rows))
    metrics, failures = [], {}
    for m in methods:
        sel = [row for row in rows if row[4] == m]
        ok = [row[10] for row in sel if math.isfinite(row[10])]
        failures[m] = len(sel) - len(ok)
        value = float(np.mean(ok)) if ok else math.nan
        nus = sorted({row[5] for row in sel})
        metrics.append(MetricRow(
            m, cfg.dgp.n, cfg.dgp.r, nus[0] if len(nus) == 1 else math.nan, cfg.dgp.link,
            value, cfg.replications, float(sum(row[13] for row in sel)), cfg.seed,
        ))
    return metrics, rows, failures


def run_mse1(cfg: ExperimentConfig, threads: int = 1):
    """Mean squared distance of each method's estimate to the grid mode.

    Returns ``(metrics, per_start_rows, failure_counts)``.
    """
    return _run_mse(cfg, "mode", threads)


def run_mse2(cfg: ExperimentConfig, threads: int = 1):
    """Mean squared distance to the true theta0; same return shape as :func:`run_mse1`."""
    return _run_mse(cfg, "truth", threads)


# ---------------------------------------------------------------- estimate / tune


def _estimate_data(cfg: ExperimentConfig, data_path=None) -> Dataset:
    path = data_path or cfg.estimate.data
    if path:
        return read_dataset_csv(path)
    return simulate_iv(cfg.dgp.with_(seed=_rng.derive_seed(cfg.seed, "data")))


def _estimate_setup(cfg, data_path):
    data = _estimate_data(cfg, data_path)
    r = iv_instruments(data)
    model = iv_moment_model(r, cfg.dgp.link)
    pen = PenaltySpec.l1(cfg.nu) if cfg.nu and not cfg.nu_grid else None
    post = PosteriorSpec(model, data, pen, cfg.dgp.space, cfg.prior, cfg.solver)
    est = cfg.estimate
    sampler = SamplerConfig(
        est.method, est.draws, cfg.mh.burnin, cfg.mh.C, cfg.mh.adapt_burnin, cfg.mamis.stages, cfg.mamis.df
    )
    theta0 = est.theta0 if est.theta0 is not None else post.space.center
    return post, sampler, np.asarray(theta0, dtype=np.float64)


def run_estimate(cfg: ExperimentConfig, data_path=None) -> EstimatorReport:
    post, sampler, theta0 = _estimate_setup(cfg, data_path)
    seed = _rng.derive_seed(cfg.seed, "estimate")
    return estimate(post, sampler, theta0, seed, cfg.nu_grid, cfg.estimate.level)


def run_tune(cfg: ExperimentConfig, data_path=None):
    post, sampler, theta0 = _estimate_setup(cfg, data_path)
    return tune_nu(post, sampler, max(cfg.nu_grid, 2) if cfg.nu_grid else 10, theta0,
                   _rng.derive_seed(cfg.seed, "estimate"))


def write_bic_trace(trace, path) -> None:
    _write_csv(path, ("nu", "bic", "support_size", "theta_hat_1", "theta_hat_2"),
               [(t.nu, t.bic, t.support_size, *t.theta_hat) for t in trace])


# ---------------------------------------------------------------- driver


def run_experiment(cfg: ExperimentConfig, out_dir=None, threads: Optional[int] = None, data_path=None) -> dict:
    """Run ``cfg`` and write its files into ``out_dir``; returns {name: path}."""
    out = Path(out_dir or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    threads = resolve_threads(threads, cfg.threads)
    files = {}
    with open(out / "config.json", "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2)
        fh.write("\n")
    files["config"] = out / "config.json"
    if cfg.kind == "efficiency":
        metrics, runs = run_efficiency(cfg, threads)
        files["metrics"] = out / "efficiency.csv"
        write_metrics(metrics, files["metrics"])
        files["runs"] = out / "efficiency_runs.csv"
        _write_csv(files["runs"], ("r", "replication", "method", "nu", "proposals", "censored", "seed",
                                   "wall_time_s"), runs)
    elif cfg.kind in ("mse1", "mse2"):
        runner = run_mse1 if cfg.kind == "mse1" else run_mse2
        metrics, rows, failures = runner(cfg, threads)
        files["metrics"] = out / f"{cfg.kind}.csv"
        write_metrics(metrics, files["metrics"])
        files["starts"] = out / f"{cfg.kind}_starts.csv"
        _write_csv(files["starts"], START_FIELDS, rows)
        files["failures"] = out / f"{cfg.kind}_failures.json"
        with open(files["failures"], "w") as fh:
            json.dump(failures, fh, indent=2)
            fh.write("\n")
    elif cfg.kind == "estimate":
        report = run_estimate(cfg, data_path)
        files["report"] = out / "report.json"
        report.to_json(files["report"])
        files["report_csv"] = out / "report.csv"
        report.to_csv(files["report_csv"])
    else:
        nu, trace = run_tune(cfg, data_path)
        files["trace"] = out / "bic_trace.csv"
        write_bic_trace(trace, files["trace"])
    return files


def mse_from_starts(path, method: str) -> float:
    """Recompute a method's MSE from a per-start CSV (skipping failed starts)."""
    with open(path, newline="") as fh:
        vals = [
            float(row["sq_error"]) for row in csv.DictReader(fh)
            if row["method"] == method and math.isfinite(float(row["sq_error"]))
        ]
    return float(np.mean(vals)) if vals else math.nan
