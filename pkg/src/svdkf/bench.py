"""Benchmark harness: the 5x2 worked example, the delta sweep and gradient audits."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .config import read_yaml
from .errors import ConfigError, SvdKfError
from .estimation import ENGINES, EstimateOptions, estimate, evaluate_nll, fd_gradient_oracle
from .filters import write_trace_csv
from .model import ParametrizedModel, SATELLITE_Q1, Trajectory, evaluate, satellite_model, simulate
from .svd_diff import differentiated_svd, gram_derivative_gap, gram_derivative_gap_fd, split_triangular

DEFAULT_DELTAS = tuple(10.0**-k for k in range(1, 11))
QUICK_DELTAS = tuple(10.0**-k for k in range(1, 8))
GRADCHECK_TOL = 1e-4

# ---------------------------------------------------------------------------
# Worked 5x2 example
# ---------------------------------------------------------------------------

EXAMPLE1_THETA = 0.5


def example1_prearray(theta: float) -> np.ndarray:
    t = float(theta)
    return np.array(
        [
            [-2.0 * t, math.sin(t)],
            [2.0 * t, t * t],
            [math.sin(t) ** 2, t**3 / 3.0],
            [t, 2.0 * t * t - 1.0],
            [math.cos(t) ** 2, t**3 + t * t],
        ]
    )


def example1_derivative(theta: float) -> np.ndarray:
    t = float(theta)
    return np.array(
        [
            [-2.0, math.cos(t)],
            [2.0, 2.0 * t],
            [math.sin(2.0 * t), t * t],
            [1.0, 4.0 * t],
            [-math.sin(2.0 * t), 3.0 * t * t + 2.0 * t],
        ]
    )


@dataclass(frozen=True)
class Example1Report:
    A: np.ndarray
    A_prime: np.ndarray
    W: np.ndarray
    S: np.ndarray
    V: np.ndarray
    M_full: np.ndarray
    M: np.ndarray
    lower: np.ndarray
    diag: np.ndarray
    upper: np.ndarray
    lbar2: np.ndarray
    S_prime: np.ndarray
    V_prime: np.ndarray
    linf_analytic: float
    linf_fd: float

    def render(self) -> str:
        def block(title: str, arr: np.ndarray) -> str:
            arr = np.atleast_2d(arr) + 0.0  # no negative zeros in the printout
            rows = ["  " + " ".join(f"{v:9.4f}" for v in row) for row in arr]
            return f"{title}\n" + "\n".join(rows)

        parts = [
            f"Worked example at theta = {EXAMPLE1_THETA}",
            block("pre-array A", self.A),
            block("derivative A'", self.A_prime),
            block("W", self.W),
            block("singular values S", self.S),
            block("V", self.V),
            block("M = W^T A' V", self.M_full),
            block("main block of M", self.M),
            block("strict lower part", self.lower),
            block("diagonal part", self.diag),
            block("strict upper part", self.upper),
            block("lbar2", self.lbar2),
            block("S'", self.S_prime),
            block("V'", self.V_prime),
            f"l_inf Gram-derivative gap (analytic left side): {self.linf_analytic:.3e}",
            f"l_inf Gram-derivative gap (central differences): {self.linf_fd:.3e}",
        ]
        return "\n".join(parts) + "\n"


def cmd_example1() -> Example1Report:
    A = example1_prearray(EXAMPLE1_THETA)
    Ap = example1_derivative(EXAMPLE1_THETA)
    res = differentiated_svd(A, Ap)
    split = split_triangular(res.M)
    return Example1Report(
        A=A,
        A_prime=Ap,
        W=res.W,
        S=res.S,
        V=res.V,
        M_full=res.WtApV,
        M=res.M,
        lower=split.lower,
        diag=split.diag,
        upper=split.upper,
        lbar2=res.lbar2,
        S_prime=res.S_prime,
        V_prime=res.V_prime,
        linf_analytic=gram_derivative_gap(A, Ap, res),
        linf_fd=gram_derivative_gap_fd(example1_prearray, EXAMPLE1_THETA, Ap),
    )


# ---------------------------------------------------------------------------
# Monte Carlo sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepConfig:
    deltas: tuple[float, ...] = DEFAULT_DELTAS
    runs: int = 100
    steps: int = 100
    theta_true: float = 5.0
    theta0: float = 1.0
    seed: int = 0
    methods: tuple[str, ...] = ENGINES
    q1: float = SATELLITE_Q1
    workers: int = 1

    def __post_init__(self):
        if self.runs < 1 or self.steps < 1:
            raise ConfigError("runs and steps must be at least 1")
        if not self.deltas or any(not (d > 0) for d in self.deltas):
            raise ConfigError("every delta must be positive")
        if not self.methods or any(m not in ENGINES for m in self.methods):
            raise ConfigError(f"methods must be a non-empty subset of {ENGINES}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("methods are repeated")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")

    @classmethod
    def quick(cls, **overrides) -> "SweepConfig":
        return cls(**{"deltas": QUICK_DELTAS, "runs": 30, **overrides})

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "SweepConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(data) - known - {"quick"}
        if extra:
            raise ConfigError(f"unknown sweep option(s): {', '.join(sorted(extra))}")
        kwargs = {k: v for k, v in data.items() if k != "quick"}
        try:
            if "deltas" in kwargs:
                kwargs["deltas"] = tuple(float(d) for d in kwargs["deltas"])
            if "methods" in kwargs:
                kwargs["methods"] = tuple(str(m) for m in kwargs["methods"])
            for key in ("runs", "steps", "seed", "workers"):
                if key in kwargs:
                    kwargs[key] = int(kwargs[key])
            for key in ("theta_true", "theta0", "q1"):
                if key in kwargs:
                    kwargs[key] = float(kwargs[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad sweep option: {exc}") from None
        return cls.quick(**kwargs) if data.get("quick") else cls(**kwargs)

    @classmethod
    def from_yaml(cls, path) -> "SweepConfig":
        return cls.from_mapping(read_yaml(path))


@dataclass(frozen=True)
class RunOutcome:
    method: str
    delta: float
    run: int
    theta_hat: float
    ok: bool
    detail: str


@dataclass(frozen=True)
class SweepRow:
    method: str
    delta: float
    mean: float
    rmse: float
    mape_pct: float
    failures: int
    runs: int

    @property
    def failed(self) -> bool:
        return self.failures > 0


@dataclass(frozen=True)
class SweepSummary:
    config: SweepConfig
    rows: list[SweepRow]
    outcomes: list[RunOutcome] = field(repr=False, default_factory=list)

    def row(self, method: str, delta: float) -> SweepRow:
        for r in self.rows:
            if r.method == method and math.isclose(r.delta, delta, rel_tol=1e-12):
                return r
        raise KeyError((method, delta))

    def first_failing_delta(self, method: str) -> float | None:
        """Largest delta at which ``method`` has a failed run, scanning from large to small."""
        for r in sorted((r for r in self.rows if r.method == method), key=lambda r: -r.delta):
            if r.failed:
                return r.delta
        return None

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["method", "delta", "mean", "rmse", "mape_pct", "failures"])
        for r in self.rows:
            writer.writerow([r.method, f"{r.delta:g}", f"{r.mean:.10g}", f"{r.rmse:.10g}", f"{r.mape_pct:.10g}", r.failures])
        return buf.getvalue()

    def render(self) -> str:
        lines = [f"{'delta':>8}  {'method':<12} {'mean':>9} {'rmse':>9} {'mape %':>9}  failures"]
        for r in self.rows:
            if r.failed:
                stats = f"{'FAILED':>9} {'':>9} {'':>9}"
            else:
                stats = f"{r.mean:9.4f} {r.rmse:9.4f} {r.mape_pct:9.2f}"
            lines.append(f"{r.delta:8.0e}  {r.method:<12} {stats}  {r.failures}/{r.runs}")
        for method in self.config.methods:
            first = self.first_failing_delta(method)
            lines.append(f"first failing delta for {method}: {'none' if first is None else f'{first:.0e}'}")
        return "\n".join(lines) + "\n"


def summarize_estimates(estimates: Sequence[float], theta_true: float) -> tuple[float, float, float]:
    """Mean, RMSE and MAPE (percent) of scalar estimates; NaN triple when empty."""
    est = np.asarray(estimates, dtype=float)
    if est.size == 0:
        return math.nan, math.nan, math.nan
    err = est - theta_true
    return float(est.mean()), float(np.sqrt(np.mean(err**2))), float(100.0 * np.mean(np.abs(err)) / abs(theta_true))


def _run_one(args: tuple[SweepConfig, float, int]) -> list[RunOutcome]:
    config, delta, run = args
    model = satellite_model(delta, config.q1)
    data = simulate(evaluate(model, [config.theta_true]), config.steps, config.seed + run)
    outcomes = []
    for method in config.methods:
        try:
            rep = estimate(model, data, [config.theta0], EstimateOptions(engine=method))
        except SvdKfError as exc:
            outcomes.append(RunOutcome(method, delta, run, math.nan, False, f"{type(exc).__name__}: {exc}"))
            continue
        theta_hat = float(rep.theta[0])
        ok = rep.converged and math.isfinite(theta_hat)
        outcomes.append(RunOutcome(method, delta, run, theta_hat, ok, rep.reason))
    return outcomes


def cmd_sweep(
    config: SweepConfig,
    out: str | Path | None = None,
    progress: Callable[[str], None] | None = None,
) -> SweepSummary:
    """Estimate theta on ``config.runs`` simulated datasets per delta with each method.

    Run ``r`` uses seed ``config.seed + r`` for every method and delta, so the
    methods see identical data.  A run that raises or stops at the iteration
    limit counts as a failure; statistics cover the remaining runs.
    """
    rows: list[SweepRow] = []
    all_outcomes: list[RunOutcome] = []
    pool = ProcessPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    try:
        for delta in config.deltas:
            jobs = [(config, delta, r) for r in range(config.runs)]
            results = list(pool.map(_run_one, jobs)) if pool else [_run_one(j) for j in jobs]
            outcomes = [o for per_run in results for o in per_run]
            all_outcomes.extend(outcomes)
            for method in config.methods:
                mine = sorted((o for o in outcomes if o.method == method), key=lambda o: o.run)
                good = [o.theta_hat for o in mine if o.ok]
                mean, rmse, mape = summarize_estimates(good, config.theta_true)
                row = SweepRow(method, delta, mean, rmse, mape, len(mine) - len(good), len(mine))
                rows.append(row)
                if progress is not None:
                    progress(f"delta={delta:.0e} {method}: mean={mean:.4f} rmse={rmse:.4f} mape={mape:.2f}% failures={row.failures}")
    finally:
        if pool is not None:
            pool.shutdown()
    summary = SweepSummary(config=config, rows=rows, outcomes=all_outcomes)
    if out is not None:
        Path(out).write_text(summary.to_csv())
    return summary


# ---------------------------------------------------------------------------
# Gradient audit
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradcheckReport:
    model_name: str
    theta: np.ndarray
    analytic: np.ndarray
    finite_difference: np.ndarray
    rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.rel_error <= self.tolerance

    def render(self) -> str:
        fmt = lambda v: "[" + ", ".join(f"{x:.10e}" for x in v) + "]"
        return (
            f"model: {self.model_name}\n"
            f"theta: {fmt(self.theta)}\n"
            f"analytic gradient: {fmt(self.analytic)}\n"
            f"central-difference gradient: {fmt(self.finite_difference)}\n"
            f"relative error: {self.rel_error:.3e} (tolerance {self.tolerance:g})\n"
            f"{'PASS' if self.passed else 'FAIL'}\n"
        )


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``max|a - b| / max|b|``, or the absolute gap when the reference is zero."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    gap = float(np.abs(a - b).max(initial=0.0))
    scale = float(np.abs(b).max(initial=0.0))
    return gap / scale if scale > 0.0 else gap


def cmd_gradcheck(
    model: ParametrizedModel,
    theta,
    *,
    data: Trajectory | None = None,
    theta_data=None,
    steps: int = 100,
    seed: int = 0,
    h: float | None = None,
    engine: str = "diff_svd_kf",
    tolerance: float = GRADCHECK_TOL,
    trace_out: str | Path | None = None,
) -> GradcheckReport:
    """Compare the analytic gradient with central differences at ``theta``.

    Data are simulated at ``theta_data`` (default ``theta``) unless supplied.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if data is None:
        src = theta if theta_data is None else np.atleast_1d(np.asarray(theta_data, dtype=float))
        data = simulate(evaluate(model, src), steps, seed)
    ev = evaluate_nll(model, data, theta, engine)
    fd = fd_gradient_oracle(model, data, theta, h=h, engine=engine)
    if trace_out is not None:
        write_trace_csv(ev.trace, trace_out)
    return GradcheckReport(
        model_name=model.name,
        theta=theta,
        analytic=ev.gradient,
        finite_difference=fd,
        rel_error=relative_error(ev.gradient, fd),
        tolerance=tolerance,
    )


def with_overrides(config: SweepConfig, **changes) -> SweepConfig:
    """``dataclasses.replace`` that skips ``None`` values."""
    return replace(config, **{k: v for k, v in changes.items() if v is not None})
