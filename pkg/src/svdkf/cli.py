"""Command-line entry point: ``svdkf-bench {example1,sweep,gradcheck,estimate}``.

Exit status is 0 whenever the harness itself ran, including sweeps where some
filter runs failed and gradient checks that did not pass.  Bad arguments,
unreadable configs and unexpected exceptions exit nonzero.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .bench import (
    QUICK_DELTAS,
    SweepConfig,
    cmd_example1,
    cmd_gradcheck,
    cmd_sweep,
    with_overrides,
)
from .config import load_model_config
from .errors import ConfigError, SvdKfError
from .estimation import ENGINES, EstimateOptions, estimate
from .model import evaluate, satellite_model, simulate


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def _method_list(text: str) -> tuple[str, ...]:
    methods = tuple(x.strip() for x in text.split(",") if x.strip())
    bad = [m for m in methods if m not in ENGINES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown method(s) {bad}; choose from {ENGINES}")
    return methods


def _model_arg(args):
    """Model and default theta from ``--config`` or the satellite model at ``--delta``."""
    if args.config:
        cfg = load_model_config(args.config)
        return cfg.model, cfg.theta_true
    return satellite_model(args.delta), np.array([args.theta_true])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="svdkf-bench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p1 = sub.add_parser("example1", help="differentiate the SVD of the 5x2 worked example")
    p1.add_argument("--out", type=Path, help="also write the report to this file")

    ps = sub.add_parser("sweep", help="Monte Carlo delta sweep on the satellite model")
    ps.add_argument("--config", type=Path, help="YAML file with SweepConfig fields")
    ps.add_argument("--delta-list", type=_float_list)
    ps.add_argument("--runs", type=int)
    ps.add_argument("--steps", type=int)
    ps.add_argument("--theta-true", type=float)
    ps.add_argument("--theta0", type=float)
    ps.add_argument("--seed", type=int)
    ps.add_argument("--methods", type=_method_list)
    ps.add_argument("--workers", type=int)
    ps.add_argument("--quick", action="store_true", help="30 runs, delta down to 1e-7")
    ps.add_argument("--out", type=Path, help="CSV summary path")
    ps.add_argument("--verbose", action="store_true", help="print progress to stderr")

    pg = sub.add_parser("gradcheck", help="analytic vs central-difference gradient")
    pg.add_argument("--config", type=Path, help="YAML model description (default: satellite model)")
    pg.add_argument("--delta", type=float, default=0.1)
    pg.add_argument("--theta", type=_float_list, help="evaluation point (default: theta_true)")
    pg.add_argument("--theta-true", type=float, default=5.0)
    pg.add_argument("--steps", type=int, default=100)
    pg.add_argument("--seed", type=int, default=0)
    pg.add_argument("--h", type=float, help="difference step (default 1e-6 * (1 + |theta_i|))")
    pg.add_argument("--method", choices=ENGINES, default="diff_svd_kf")
    pg.add_argument("--trace-out", type=Path, help="per-step filter trace CSV")

    pe = sub.add_parser("estimate", help="one maximum-likelihood fit on simulated data")
    pe.add_argument("--config", type=Path)
    pe.add_argument("--delta", type=float, default=0.1)
    pe.add_argument("--theta-true", type=float, default=5.0)
    pe.add_argument("--theta0", type=_float_list, default=(1.0,))
    pe.add_argument("--steps", type=int, default=100)
    pe.add_argument("--seed", type=int, default=0)
    pe.add_argument("--method", choices=ENGINES, default="diff_svd_kf")
    pe.add_argument("--out", type=Path, help="optimizer iteration CSV")
    return parser


def _run_sweep(args) -> int:
    base = SweepConfig.from_yaml(args.config) if args.config else SweepConfig()
    if args.quick:
        base = with_overrides(base, deltas=QUICK_DELTAS, runs=30)
    config = with_overrides(
        base,
        deltas=args.delta_list,
        runs=args.runs,
        steps=args.steps,
        theta_true=args.theta_true,
        theta0=args.theta0,
        seed=args.seed,
        methods=args.methods,
        workers=args.workers,
    )
    progress = (lambda msg: print(msg, file=sys.stderr, flush=True)) if args.verbose else None
    summary = cmd_sweep(config, out=args.out, progress=progress)
    sys.stdout.write(summary.render())
    return 0


def _run_gradcheck(args) -> int:
    model, theta_true = _model_arg(args)
    if theta_true is None and args.theta is None:
        raise ConfigError("no theta given and the config has no theta_true")
    theta = np.array(args.theta) if args.theta is not None else theta_true
    report = cmd_gradcheck(
        model,
        theta,
        theta_data=theta_true if theta_true is not None else theta,
        steps=args.steps,
        seed=args.seed,
        h=args.h,
        engine=args.method,
        trace_out=args.trace_out,
    )
    sys.stdout.write(report.render())
    return 0


def _run_estimate(args) -> int:
    model, theta_true = _model_arg(args)
    if theta_true is None:
        raise ConfigError("config needs theta_true to simulate data")
    data = simulate(evaluate(model, theta_true), args.steps, args.seed)
    report = estimate(model, data, np.array(args.theta0), EstimateOptions(engine=args.method))
    if args.out:
        report.write_csv(args.out)
    est = ", ".join(f"{t:.6f}" for t in report.theta)
    print(f"theta_hat: [{est}]  nll: {report.value:.6f}  iterations: {report.iterations}  "
          f"reason: {report.reason}  converged: {report.converged}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "example1":
            text = cmd_example1().render()
            sys.stdout.write(text)
            if args.out:
                args.out.write_text(text)
            return 0
        if args.command == "sweep":
            return _run_sweep(args)
        if args.command == "gradcheck":
            return _run_gradcheck(args)
        return _run_estimate(args)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SvdKfError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
