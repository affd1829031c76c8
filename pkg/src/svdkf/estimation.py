"""Negative log-likelihood, its gradient, and a BFGS maximum-likelihood estimator.

The objective is the negative log-likelihood

    L(theta) = c0 + 1/2 sum_k [ ln det R_e,k + e_k^T R_e,k^{-1} e_k ],   c0 = N m ln(2 pi) / 2

which the optimizer minimizes.  In SVD variables ``R_e,k`` is replaced by the
diagonal ``D_{R_e,k}`` and ``e_k`` by the rotated innovation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import (
    FilterError,
    NonFiniteStateError,
    NotPDError,
    SingularInnovationCovarianceError,
    ZeroSingularValueError,
)
from .filters import (
    DiffKfTrace,
    DiffSvdKfTrace,
    KfTrace,
    SvdKfTrace,
    diff_kf_run,
    diff_svd_kf_run,
    kf_run,
    svd_kf_run,
)
from .model import ParametrizedModel, Trajectory, evaluate

LOG_2PI = math.log(2.0 * math.pi)
ENGINES = ("diff_kf", "diff_svd_kf")

# Failures that make a trial theta unusable without aborting an optimization.
TRIAL_ERRORS = (FilterError, NotPDError)


def _c0(N: int, m: int) -> float:
    return 0.5 * N * m * LOG_2PI


def _innov_sqrt(trace: SvdKfTrace) -> np.ndarray:
    D_sqrt = trace.D_innov_sqrt
    if np.any(D_sqrt <= 0.0):
        raise ZeroSingularValueError("innovation covariance factor has a zero entry")
    return D_sqrt


def nll_svd(trace: SvdKfTrace) -> float:
    D_sqrt = _innov_sqrt(trace)
    N, m = D_sqrt.shape
    white = trace.rotated_innovations / D_sqrt
    return _c0(N, m) + 0.5 * (2.0 * np.log(D_sqrt).sum() + (white**2).sum())


def _innovation_cholesky(trace: KfTrace) -> np.ndarray:
    try:
        return np.linalg.cholesky(trace.innovation_cov)
    except np.linalg.LinAlgError:
        raise SingularInnovationCovarianceError("innovation covariance is not positive definite") from None


def nll_conventional(trace: KfTrace) -> float:
    L = _innovation_cholesky(trace)
    N, m = trace.innovations.shape
    logdet = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum()
    white = np.linalg.solve(L, trace.innovations[..., None])
    return _c0(N, m) + 0.5 * (logdet + (white**2).sum())


def grad_nll_svd(trace: DiffSvdKfTrace) -> np.ndarray:
    """Gradient of ``nll_svd`` from the derivative tracks of the SVD engine."""
    D_sqrt = _innov_sqrt(trace)
    D_inv = 1.0 / D_sqrt**2
    dD = 2.0 * D_sqrt * trace.d_D_innov_sqrt  # (p, N, m)
    ebar, debar = trace.rotated_innovations, trace.d_rotated_innovations
    terms = dD * D_inv + 2.0 * debar * D_inv * ebar - (ebar * D_inv) ** 2 * dD
    return 0.5 * terms.sum(axis=(1, 2))


def grad_nll_conventional(trace: DiffKfTrace) -> np.ndarray:
    _innovation_cholesky(trace)
    Rinv = np.linalg.inv(trace.innovation_cov)  # (N, m, m)
    e, de, dRe = trace.innovations, trace.d_innovations, trace.d_innovation_cov
    Rinv_e = np.einsum("kij,kj->ki", Rinv, e)
    trace_term = np.einsum("kij,pkji->p", Rinv, dRe)
    cross = 2.0 * np.einsum("pki,ki->p", de, Rinv_e)
    quad = np.einsum("ki,pkij,kj->p", Rinv_e, dRe, Rinv_e)
    return 0.5 * (trace_term + cross - quad)


@dataclass(frozen=True)
class NllEvaluation:
    value: float
    gradient: np.ndarray | None
    theta: np.ndarray
    N: int
    m: int
    trace: object = field(repr=False, default=None)


def evaluate_nll(
    model: ParametrizedModel,
    data: Trajectory,
    theta,
    engine: str = "diff_svd_kf",
    *,
    with_gradient: bool = True,
) -> NllEvaluation:
    """Run one filter engine at ``theta`` and return the objective (and gradient)."""
    if engine not in ENGINES:
        raise ValueError(f"unknown engine {engine!r}, expected one of {ENGINES}")
    inst = evaluate(model, theta)
    if engine == "diff_svd_kf":
        if with_gradient:
            trace = diff_svd_kf_run(inst, data)
            value, grad = nll_svd(trace), grad_nll_svd(trace)
        else:
            trace = svd_kf_run(inst, data)
            value, grad = nll_svd(trace), None
    else:
        if with_gradient:
            trace = diff_kf_run(inst, data)
            value, grad = nll_conventional(trace), grad_nll_conventional(trace)
        else:
            trace = kf_run(inst, data)
            value, grad = nll_conventional(trace), None
    if not math.isfinite(value) or (grad is not None and not np.all(np.isfinite(grad))):
        raise NonFiniteStateError("objective or gradient is not finite")
    return NllEvaluation(value=value, gradient=grad, theta=inst.theta, N=data.N, m=inst.m, trace=trace)


def fd_gradient_oracle(
    model: ParametrizedModel,
    data: Trajectory,
    theta,
    h: float | None = None,
    engine: str = "diff_svd_kf",
) -> np.ndarray:
    """Central differences of the objective, one coordinate at a time."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    grad = np.empty_like(theta)
    for i in range(theta.size):
        step = 1e-6 * (1.0 + abs(theta[i])) if h is None else h
        e = np.zeros_like(theta)
        e[i] = step
        plus = evaluate_nll(model, data, theta + e, engine, with_gradient=False).value
        minus = evaluate_nll(model, data, theta - e, engine, with_gradient=False).value
        grad[i] = (plus - minus) / (2.0 * step)
    return grad


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EstimateOptions:
    grad_tol: float = 1e-6
    max_iter: int = 100
    armijo_c: float = 1e-4
    shrink: float = 0.5
    step_tol: float = 1e-12
    engine: str = "diff_svd_kf"


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    theta: np.ndarray
    value: float
    grad_norm: float
    step_length: float


@dataclass(frozen=True)
class OptimizerReport:
    theta: np.ndarray
    value: float
    gradient: np.ndarray
    iterations: int
    grad_norm: float
    line_search_failures: int
    failed_trials: int
    converged: bool
    reason: str
    history: list[IterationRecord]
    evaluations: int

    def write_csv(self, path) -> None:
        """Iteration log: iter, theta components, objective, gradient norm, step length."""
        p = self.theta.size
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iter", *[f"theta_{i}" for i in range(p)], "nll", "grad_norm", "step_length"])
            for rec in self.history:
                writer.writerow(
                    [rec.iteration, *[repr(float(t)) for t in rec.theta], repr(rec.value), repr(rec.grad_norm), repr(rec.step_length)]
                )


def bfgs_minimize(
    fun: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: Sequence[float],
    options: EstimateOptions = EstimateOptions(),
    value: Callable[[np.ndarray], float] | None = None,
) -> OptimizerReport:
    """BFGS with Armijo backtracking.

    ``fun`` returns ``(f, grad)``; the optional ``value`` returns ``f`` alone and is
    used for line-search trials.  Either may raise one of ``TRIAL_ERRORS`` at a
    trial point, which shrinks the step.  A failure at ``x0`` propagates.
    The first trial step of an unscaled direction is capped at unit max-norm.
    Stops when ``max|grad| <= grad_tol`` or a step falls below ``step_tol``
    (both count as converged) or after ``max_iter`` iterations (not converged).
    """
    if value is None:
        def value(x):
            return fun(x)[0]

    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    f, g = fun(x)
    g = np.asarray(g, dtype=float)
    evals = 1
    if not (math.isfinite(f) and np.all(np.isfinite(g))):
        raise NonFiniteStateError("objective is not finite at the starting point")
    p = x.size
    Hinv = np.eye(p)
    scaled = False
    history = [IterationRecord(0, x.copy(), float(f), float(np.abs(g).max()), 0.0)]
    ls_failures = failed_trials = 0
    reason, converged, it = "max_iter", False, 0

    while True:
        if np.abs(g).max() <= options.grad_tol:
            reason, converged = "gradient", True
            break
        if it >= options.max_iter:
            break
        it += 1
        d = -Hinv @ g
        slope = float(g @ d)
        if slope >= 0.0:
            Hinv = np.eye(p)
            scaled = False
            d = -g
            slope = float(g @ d)

        # Until curvature information exists the raw gradient has no length
        # scale, so the first trial step is capped at unit max-norm.
        t = 1.0 if scaled else min(1.0, 1.0 / np.abs(d).max())
        accepted = None
        while t * np.abs(d).max() >= options.step_tol:
            x_try = x + t * d
            try:
                f_try = value(x_try)
                evals += 1
                if math.isfinite(f_try) and f_try <= f + options.armijo_c * t * slope:
                    f_new, g_new = fun(x_try)
                    evals += 1
                    g_new = np.asarray(g_new, dtype=float)
                    if math.isfinite(f_new) and np.all(np.isfinite(g_new)):
                        accepted = (x_try, f_new, g_new)
                        break
                    failed_trials += 1
            except TRIAL_ERRORS:
                failed_trials += 1
            t *= options.shrink

        if accepted is None:
            ls_failures += 1
            reason, converged = "step", True
            break

        x_new, f_new, g_new = accepted
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if not scaled:
                Hinv = (sy / float(y @ y)) * np.eye(p)
                scaled = True
            rho = 1.0 / sy
            V = np.eye(p) - rho * np.outer(s, y)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
        x, f, g = x_new, f_new, g_new
        step_len = float(np.abs(s).max())
        history.append(IterationRecord(it, x.copy(), float(f), float(np.abs(g).max()), step_len))
        if step_len < options.step_tol:
            reason, converged = "step", True
            break

    return OptimizerReport(
        theta=x,
        value=float(f),
        gradient=g,
        iterations=it,
        grad_norm=float(np.abs(g).max()),
        line_search_failures=ls_failures,
        failed_trials=failed_trials,
        converged=converged,
        reason=reason,
        history=history,
        evaluations=evals,
    )


def estimate(
    model: ParametrizedModel,
    data: Trajectory,
    theta0,
    options: EstimateOptions = EstimateOptions(),
) -> OptimizerReport:
    """Maximum-likelihood estimate of theta with the chosen differentiated engine."""
    engine = options.engine

    def fun(theta):
        ev = evaluate_nll(model, data, theta, engine)
        return ev.value, ev.gradient

    def value(theta):
        return evaluate_nll(model, data, theta, engine, with_gradient=False).value

    return bfgs_minimize(fun, theta0, options, value=value)
