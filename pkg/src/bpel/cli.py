"""Command-line interface: ``bpel <subcommand> ...``.

Exit codes: 0 success, 2 configuration or usage error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import _rng
from .errors import ConfigError, NumericalError
from .estimator import estimate, tune_nu
from .experiments import (
    ExperimentConfig,
    config_from_dict,
    load_config,
    resolve_threads,
    run_experiment,
    write_bic_trace,
)
from .likelihood import PosteriorSpec
from .model import iv_instruments, iv_moment_model, read_dataset_csv, simulate_iv, write_dataset_csv
from .penalty import PenaltySpec
from .samplers import (
    RwProposal,
    SamplerConfig,
    StudentTProposal,
    chain_mean,
    default_stage_sizes,
    effective_sample_size,
    mamis_sample,
    mh_sample,
    weighted_mean,
    write_chain_csv,
    write_weighted_csv,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _common(p, seed_default=0):
    p.add_argument("--seed", type=int, default=seed_default, help=f"master seed (default {seed_default})")
    p.add_argument("--out", help="output file or directory")
    p.add_argument("--threads", type=int, help="worker processes (overrides BPEL_THREADS)")
    p.add_argument("--config", help="TOML/JSON file supplying defaults for any section")


def _data_args(p):
    p.add_argument("--data", help="IV dataset CSV (y,u1,u2,z1..zr); simulated when omitted")
    p.add_argument("--n", type=int, help="sample size of simulated data")
    p.add_argument("--r", type=int, help="number of instruments of simulated data")
    p.add_argument("--link", choices=("linear", "sin"))
    p.add_argument("--instrument-dist", choices=("gaussian", "student_t3"))
    p.add_argument("--theta-true", type=_floats, help="theta0 of the simulation design")


def _posterior_args(p):
    p.add_argument("--nu", type=float, help="L1 penalty level; 0 gives the plain EL posterior")
    p.add_argument("--theta0", type=_floats, help="initial point (default: box centre)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bpel", description="Bayesian penalized empirical likelihood")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="simulate an IV dataset to CSV")
    _common(p)
    _data_args(p)

    p = sub.add_parser("sample-mh", help="random-walk Metropolis-Hastings chain to CSV")
    _common(p)
    _data_args(p)
    _posterior_args(p)
    p.add_argument("--K", type=int, default=3500, help="post-burn-in draws")
    p.add_argument("--burnin", type=int)
    p.add_argument("--sigma2", type=float, help="fixed proposal variance")
    p.add_argument("--C", type=float, help="variance C/(n log r) when --sigma2 is not given")
    p.add_argument("--no-adapt", action="store_true", help="no burn-in scale adaptation")

    p = sub.add_parser("sample-mamis", help="MAMIS weighted sample to CSV")
    _common(p)
    _data_args(p)
    _posterior_args(p)
    p.add_argument("--draws", type=int, default=3500, help="total draws over all stages")
    p.add_argument("--stages", type=int)
    p.add_argument("--df", type=float)

    for name, helptext in (("estimate", "bias-corrected estimate (JSON + CSV)"),
                           ("tune-nu", "BIC trace over the nu interval")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        _data_args(p)
        _posterior_args(p)
        p.add_argument("--method", choices=("mh", "mamis"))
        p.add_argument("--draws", type=int)
        p.add_argument("--grid-size", type=int, help="BIC grid points (estimate: tune nu when given)")
        if name == "estimate":
            p.add_argument("--level", type=float, help="confidence level (default 0.95)")

    p = sub.add_parser("experiment", help="run a simulation study from a config file")
    p.add_argument("config_file", nargs="?", help="TOML or JSON experiment config (or --config)")
    _common(p, seed_default=None)
    p.add_argument("--timing", action="store_true", help="record wall times (output then varies run to run)")
    return parser


def _base_config(args, kind: str) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
        cfg = cfg.with_(kind=kind) if cfg.kind != kind else cfg
    else:
        cfg = config_from_dict({"kind": kind})
    changes = {}
    dgp = {}
    for flag, key in (("n", "n"), ("r", "r"), ("link", "link"), ("instrument_dist", "instrument_dist"),
                      ("theta_true", "theta0")):
        v = getattr(args, flag, None)
        if v is not None:
            dgp[key] = v
    if dgp:
        changes["dgp"] = cfg.dgp.with_(**dgp)
    if getattr(args, "nu", None) is not None:
        changes["nu"] = args.nu
    changes["seed"] = args.seed
    return cfg.with_(**changes)


def _data(args, cfg: ExperimentConfig):
    if getattr(args, "data", None):
        return read_dataset_csv(args.data)
    return simulate_iv(cfg.dgp.with_(seed=args.seed))


def _posterior(args, cfg, data) -> PosteriorSpec:
    r = iv_instruments(data)
    pen = PenaltySpec.l1(cfg.nu) if cfg.nu else None
    return PosteriorSpec(iv_moment_model(r, cfg.dgp.link), data, pen, cfg.dgp.space, cfg.prior, cfg.solver)


def _theta0(args, post):
    return np.asarray(args.theta0 if args.theta0 else post.space.center, dtype=np.float64)


def _out(args, default: str) -> Path:
    path = Path(args.out or default)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    return path


def cmd_simulate(args):
    cfg = _base_config(args, "estimate")
    data = simulate_iv(cfg.dgp.with_(seed=args.seed))
    path = _out(args, "data.csv")
    write_dataset_csv(data, path)
    print(f"wrote {data.n} rows x {data.d} columns to {path}")


def cmd_sample_mh(args):
    cfg = _base_config(args, "estimate")
    data = _data(args, cfg)
    post = _posterior(args, cfg, data)
    burnin = cfg.mh.burnin if args.burnin is None else args.burnin
    if args.sigma2 is not None:
        prop = RwProposal(args.sigma2, adapt_burnin=not args.no_adapt)
    else:
        prop = RwProposal.n_logr(cfg.mh.C if args.C is None else args.C, cfg.mh.adapt_burnin and not args.no_adapt)
    chain = mh_sample(post, prop, _theta0(args, post), args.K, burnin, _rng.derive_seed(args.seed, "mh"))
    path = _out(args, "chain.csv")
    write_chain_csv(chain, path)
    if chain.aborted:
        raise NumericalError(f"chain aborted after {chain.K} draws: {chain.error} (partial chain in {path})")
    print(f"acceptance {chain.acceptance_rate:.3f}  mean {chain_mean(chain).tolist()}  "
          f"ESS {effective_sample_size(chain):.0f}  -> {path}")


def cmd_sample_mamis(args):
    cfg = _base_config(args, "estimate")
    data = _data(args, cfg)
    post = _posterior(args, cfg, data)
    stages = args.stages or cfg.mamis.stages
    df = args.df or cfg.mamis.df
    init = StudentTProposal.standard(_theta0(args, post), df)
    ws = mamis_sample(post, init, default_stage_sizes(args.draws, stages), _rng.derive_seed(args.seed, "mamis"))
    path = _out(args, "weighted.csv")
    write_weighted_csv(ws, path)
    for note in ws.warnings:
        print(f"warning: {note}", file=sys.stderr)
    print(f"weighted mean {weighted_mean(ws).tolist()}  ESS {effective_sample_size(ws):.0f}  -> {path}")


def _sampler(args, cfg) -> SamplerConfig:
    return SamplerConfig(
        args.method or cfg.estimate.method, args.draws or cfg.estimate.draws, cfg.mh.burnin,
        cfg.mh.C, cfg.mh.adapt_burnin, cfg.mamis.stages, cfg.mamis.df,
    )


def cmd_estimate(args):
    cfg = _base_config(args, "estimate")
    data = _data(args, cfg)
    grid = args.grid_size or 0
    if not grid and not cfg.nu:
        raise ConfigError("estimate needs --nu > 0 or --grid-size for BIC tuning")
    post = _posterior(args, cfg.with_(nu=None) if grid else cfg, data)
    level = args.level if args.level is not None else cfg.estimate.level
    report = estimate(post, _sampler(args, cfg), _theta0(args, post), _rng.derive_seed(args.seed, "estimate"),
                      grid, level)
    out = Path(args.out or "estimate")
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "report.json")
    report.to_csv(out / "report.csv")
    print(f"nu {report.nu:.6g}  |R| {len(report.support)}  corrected {report.theta_corrected.tolist()}  -> {out}")


def cmd_tune_nu(args):
    cfg = _base_config(args, "tune")
    data = _data(args, cfg)
    post = _posterior(args, cfg.with_(nu=None), data)
    nu, trace = tune_nu(post, _sampler(args, cfg), args.grid_size or 10, _theta0(args, post),
                        _rng.derive_seed(args.seed, "estimate"))
    path = _out(args, "bic_trace.csv")
    write_bic_trace(trace, path)
    print(f"selected nu {nu:.6g}  -> {path}")


def cmd_experiment(args):
    path = args.config_file or args.config
    if not path:
        raise ConfigError("experiment needs a config file")
    cfg = load_config(path)
    changes = {"seed": args.seed} if args.seed is not None else {}
    if args.timing:
        changes["timing"] = True
    cfg = cfg.with_(**changes) if changes else cfg
    files = run_experiment(cfg, args.out, resolve_threads(args.threads, cfg.threads))
    for name, path in files.items():
        print(f"{name}: {path}")


COMMANDS = {
    "simulate": cmd_simulate,
    "sample-mh": cmd_sample_mh,
    "sample-mamis": cmd_sample_mamis,
    "estimate": cmd_estimate,
    "tune-nu": cmd_tune_nu,
    "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"bpel: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"bpel: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"bpel: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
