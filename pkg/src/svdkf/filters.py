"""Kalman filter engines: conventional, SVD array form, and their differentiated versions.

All engines start from ``x_{1|0} = x0`` and ``P_{1|0} = Pi0`` and run the
measurement update for ``z_1..z_N`` followed by a time update, so each trace
holds the a priori estimates for ``k = 1..N+1``.  The time update after
``z_k`` uses control row ``k`` of the trajectory; rows past the end count as zero.

Derivative tracks carry a leading axis of length ``p``.  Any NaN/Inf or
numerical breakdown raises a ``FilterError`` subclass tagged with the step.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    FilterError,
    NonFiniteStateError,
    RankDeficientError,
    SingularInnovationCovarianceError,
    ZeroSingularValueError,
)
from .model import FactorDerivs, ModelInstance, Trajectory, init_factors
from .svd_diff import (
    SvdFactors,
    differentiated_svd,
    svd_factorize,
    sym_spectral_factors,
)


def _T(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _control(data: Trajectory, k: int, d: int) -> np.ndarray:
    if k < data.controls.shape[0]:
        return data.controls[k]
    return np.zeros(d)


def _check_finite(step: int, *arrays) -> None:
    # A NaN or Inf anywhere poisons the sum, so one reduction per array suffices.
    for a in arrays:
        if not math.isfinite(float(np.sum(a))):
            raise NonFiniteStateError("non-finite filter quantity", step=step)


# ---------------------------------------------------------------------------
# Conventional filter
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KfTrace:
    x_prior: np.ndarray  # (N+1, n): x_{k|k-1}, k = 1..N+1
    x_post: np.ndarray  # (N, n)
    P_prior: np.ndarray  # (N+1, n, n)
    innovations: np.ndarray  # (N, m)
    innovation_cov: np.ndarray  # (N, m, m)
    gains: np.ndarray  # (N, n, m), predictor gain K_p

    @property
    def N(self) -> int:
        return self.innovations.shape[0]


@dataclass(frozen=True)
class DiffKfTrace(KfTrace):
    d_x_prior: np.ndarray  # (p, N+1, n)
    d_x_post: np.ndarray
    d_P_prior: np.ndarray
    d_innovations: np.ndarray
    d_innovation_cov: np.ndarray
    d_gains: np.ndarray


def _innovation_inverse(Re: np.ndarray, step: int) -> np.ndarray:
    try:
        np.linalg.cholesky(Re)
    except np.linalg.LinAlgError:
        raise SingularInnovationCovarianceError("innovation covariance is not positive definite", step=step) from None
    return np.linalg.inv(Re)


def _run_conventional(inst: ModelInstance, data: Trajectory, with_derivs: bool):
    F, B, G, H = inst.F, inst.B, inst.G, inst.H
    N, n, m, p, d = data.N, inst.n, inst.m, inst.p, inst.B.shape[1]
    GWG = G @ inst.Omega @ G.T

    xs_prior = np.empty((N + 1, n))
    xs_post = np.empty((N, n))
    Ps = np.empty((N + 1, n, n))
    es = np.empty((N, m))
    Res = np.empty((N, m, m))
    Kps = np.empty((N, n, m))

    x, P = inst.x0.copy(), inst.Pi0.copy()
    xs_prior[0], Ps[0] = x, P
    if with_derivs:
        dF, dB, dG, dH = inst.dF, inst.dB, inst.dG, inst.dH
        dGWG = dG @ inst.Omega @ G.T
        dGWG = dGWG + _T(dGWG) + G @ inst.dOmega @ G.T
        d_xs_prior = np.empty((p, N + 1, n))
        d_xs_post = np.empty((p, N, n))
        d_Ps = np.empty((p, N + 1, n, n))
        d_es = np.empty((p, N, m))
        d_Res = np.empty((p, N, m, m))
        d_Kps = np.empty((p, N, n, m))
        dx, dP = inst.dx0.copy(), inst.dPi0.copy()
        d_xs_prior[:, 0], d_Ps[:, 0] = dx, dP

    for k in range(1, N + 1):
        u = _control(data, k, d)
        e = data.measurements[k - 1] - H @ x
        PHt = P @ H.T
        Re = inst.R + H @ PHt
        Rinv = _innovation_inverse(Re, k)
        Kf = PHt @ Rinv
        Kp = F @ Kf
        x_post = x + Kf @ e
        x_next = F @ x + B @ u + Kp @ e
        P_next = F @ P @ F.T + GWG - Kp @ Re @ Kp.T
        # The recursion amplifies round-off asymmetry on some non-normal F;
        # keeping P and its partials symmetric is the usual remedy.
        P_next = 0.5 * (P_next + P_next.T)

        if with_derivs:
            de = -(dH @ x + dx @ H.T)
            dPHt = dP @ H.T + P @ _T(dH)
            dRe = inst.dR + dH @ PHt + H @ dPHt
            dKf = dPHt @ Rinv - Kf @ dRe @ Rinv
            dKp = dF @ Kf + F @ dKf
            dx_post = dx + dKf @ e + de @ Kf.T
            dx_next = dF @ x + dx @ F.T + dB @ u + dKp @ e + de @ Kp.T
            FPdFt = F @ P @ _T(dF)
            KRdKt = Kp @ Re @ _T(dKp)
            dP_next = (
                FPdFt + _T(FPdFt) + F @ dP @ F.T + dGWG
                - KRdKt - _T(KRdKt) - Kp @ dRe @ Kp.T
            )
            dP_next = 0.5 * (dP_next + _T(dP_next))

        _check_finite(k, x_next, P_next, x_post)
        es[k - 1], Res[k - 1], Kps[k - 1], xs_post[k - 1] = e, Re, Kp, x_post
        xs_prior[k], Ps[k] = x_next, P_next
        x, P = x_next, P_next
        if with_derivs:
            _check_finite(k, dx_next, dP_next)
            d_es[:, k - 1], d_Res[:, k - 1], d_Kps[:, k - 1] = de, dRe, dKp
            d_xs_post[:, k - 1] = dx_post
            d_xs_prior[:, k], d_Ps[:, k] = dx_next, dP_next
            dx, dP = dx_next, dP_next

    base = dict(x_prior=xs_prior, x_post=xs_post, P_prior=Ps, innovations=es, innovation_cov=Res, gains=Kps)
    if not with_derivs:
        return KfTrace(**base)
    return DiffKfTrace(
        **base,
        d_x_prior=d_xs_prior, d_x_post=d_xs_post, d_P_prior=d_Ps,
        d_innovations=d_es, d_innovation_cov=d_Res, d_gains=d_Kps,
    )


def kf_run(instance: ModelInstance, data: Trajectory) -> KfTrace:
    """Conventional Kalman filter in condensed (one-step predictor) form."""
    return _run_conventional(instance, data, with_derivs=False)


def diff_kf_run(instance: ModelInstance, data: Trajectory) -> DiffKfTrace:
    """Conventional filter plus the filter and Riccati-type sensitivity recursions."""
    return _run_conventional(instance, data, with_derivs=True)


# ---------------------------------------------------------------------------
# SVD array filter
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SvdKfTrace:
    x_prior: np.ndarray  # (N+1, n)
    x_post: np.ndarray  # (N, n)
    Q_prior: np.ndarray  # (N+1, n, n)
    D_prior_sqrt: np.ndarray  # (N+1, n)
    Q_post: np.ndarray  # (N, n, n)
    D_post_sqrt: np.ndarray  # (N, n)
    Q_innov: np.ndarray  # (N, m, m)
    D_innov_sqrt: np.ndarray  # (N, m)
    rotated_innovations: np.ndarray  # (N, m)
    Kbar: np.ndarray  # (N, n, m)
    K: np.ndarray  # (N, n, m)

    @property
    def N(self) -> int:
        return self.rotated_innovations.shape[0]

    @property
    def P_prior(self) -> np.ndarray:
        """Full a priori covariances ``Q D Q^T``, for diagnostics only."""
        return (self.Q_prior * self.D_prior_sqrt[:, None, :] ** 2) @ _T(self.Q_prior)

    @property
    def P_post(self) -> np.ndarray:
        return (self.Q_post * self.D_post_sqrt[:, None, :] ** 2) @ _T(self.Q_post)

    @property
    def innovation_cov(self) -> np.ndarray:
        return (self.Q_innov * self.D_innov_sqrt[:, None, :] ** 2) @ _T(self.Q_innov)


@dataclass(frozen=True)
class DiffSvdKfTrace(SvdKfTrace):
    d_x_prior: np.ndarray  # (p, N+1, n)
    d_x_post: np.ndarray
    d_Q_prior: np.ndarray
    d_D_prior_sqrt: np.ndarray
    d_Q_post: np.ndarray
    d_D_post_sqrt: np.ndarray
    d_Q_innov: np.ndarray
    d_D_innov_sqrt: np.ndarray
    d_rotated_innovations: np.ndarray
    d_Kbar: np.ndarray


@dataclass(frozen=True)
class MeasurementUpdate:
    x_post: np.ndarray
    post: SvdFactors
    innov: SvdFactors
    Kbar: np.ndarray
    K: np.ndarray
    rotated_innovation: np.ndarray


def _scaled(D_sqrt: np.ndarray, Q: np.ndarray, X: np.ndarray | None = None) -> np.ndarray:
    """``D^{1/2} Q^T X^T`` (``X`` defaults to the identity)."""
    out = D_sqrt[:, None] * Q.T
    return out if X is None else out @ X.T


def _d_scaled(D_sqrt, Q, dD_sqrt, dQ, X=None, dX=None) -> np.ndarray:
    """Partials of ``_scaled`` by the product rule, stacked over ``p``."""
    out = dD_sqrt[:, :, None] * Q.T + D_sqrt[:, None] * _T(dQ)
    if X is not None:
        out = out @ X.T
        if dX is not None:
            out = out + _scaled(D_sqrt, Q) @ _T(dX)
    return out


def _mu1_prearray(R_f: SvdFactors, prior: SvdFactors, H) -> np.ndarray:
    return np.vstack([_scaled(R_f.D_sqrt, R_f.Q), _scaled(prior.D_sqrt, prior.Q, H)])


def _mu2_prearray(R_f: SvdFactors, prior: SvdFactors, H, K) -> np.ndarray:
    I_KH = np.eye(H.shape[1]) - K @ H
    return np.vstack([_scaled(prior.D_sqrt, prior.Q, I_KH), _scaled(R_f.D_sqrt, R_f.Q, K)])


def _tu_prearray(post: SvdFactors, W_f: SvdFactors, F, G) -> np.ndarray:
    return np.vstack([_scaled(post.D_sqrt, post.Q, F), _scaled(W_f.D_sqrt, W_f.Q, G)])


def _gain_values(prior: SvdFactors, innov: SvdFactors, H):
    D_inv = 1.0 / innov.D
    Kbar = prior.covariance() @ H.T @ innov.Q
    K = (Kbar * D_inv) @ innov.Q.T
    return Kbar, K, D_inv


def _factors_from_triple(triple) -> SvdFactors:
    return SvdFactors(Q=triple.V, D_sqrt=triple.S)


def _check_innovation_factor(D_sqrt: np.ndarray) -> None:
    if np.any(D_sqrt == 0.0):
        raise ZeroSingularValueError("innovation covariance factor has a zero singular value")


def svd_measurement_update(x_prior, prior: SvdFactors, instance: ModelInstance, z, R_factors: SvdFactors | None = None) -> MeasurementUpdate:
    """One SVD measurement update from ``{x_{k|k-1}, Q, D^{1/2}}`` and ``z_k``."""
    H = instance.H
    R_f = R_factors if R_factors is not None else plain_factors(instance.R)
    innov = _factors_from_triple(svd_factorize(_mu1_prearray(R_f, prior, H), full=False))
    _check_innovation_factor(innov.D_sqrt)
    Kbar, K, D_inv = _gain_values(prior, innov, H)
    post = _factors_from_triple(svd_factorize(_mu2_prearray(R_f, prior, H, K), full=False))
    ebar = innov.Q.T @ (z - H @ x_prior)
    x_post = x_prior + Kbar @ (D_inv * ebar)
    return MeasurementUpdate(x_post=x_post, post=post, innov=innov, Kbar=Kbar, K=K, rotated_innovation=ebar)


def svd_time_update(x_post, post: SvdFactors, instance: ModelInstance, u=None, Omega_factors: SvdFactors | None = None):
    """One SVD time update; returns ``(x_{k+1|k}, factors of P_{k+1|k})``."""
    W_f = Omega_factors if Omega_factors is not None else plain_factors(instance.Omega)
    prior = _factors_from_triple(svd_factorize(_tu_prearray(post, W_f, instance.F, instance.G), full=False))
    if u is None:
        u = np.zeros(instance.B.shape[1])
    return instance.F @ x_post + instance.B @ u, prior


def plain_factors(C) -> SvdFactors:
    """Factors of a covariance; SVD branch when nonsingular so they match the derivative path."""
    try:
        triple = svd_factorize(C)
    except RankDeficientError:
        return sym_spectral_factors(C)
    # C is its own pre-array here, so its singular values are D, not D^{1/2}.
    return SvdFactors(Q=triple.V, D_sqrt=np.sqrt(triple.S))


def _initial_plain_factors(instance: ModelInstance) -> dict[str, SvdFactors]:
    out = {}
    for name in ("Omega", "R", "Pi0"):
        if name in instance.analytic_factors:
            out[name] = instance.analytic_factors[name].factors
        else:
            out[name] = plain_factors(getattr(instance, name))
    return out


class _SvdTraceBuffers:
    def __init__(self, N, n, m):
        self.x_prior = np.empty((N + 1, n))
        self.x_post = np.empty((N, n))
        self.Q_prior = np.empty((N + 1, n, n))
        self.D_prior_sqrt = np.empty((N + 1, n))
        self.Q_post = np.empty((N, n, n))
        self.D_post_sqrt = np.empty((N, n))
        self.Q_innov = np.empty((N, m, m))
        self.D_innov_sqrt = np.empty((N, m))
        self.rotated_innovations = np.empty((N, m))
        self.Kbar = np.empty((N, n, m))
        self.K = np.empty((N, n, m))

    def store_step(self, k, mu: MeasurementUpdate, x_next, prior_next: SvdFactors):
        i = k - 1
        self.x_post[i] = mu.x_post
        self.Q_post[i], self.D_post_sqrt[i] = mu.post.Q, mu.post.D_sqrt
        self.Q_innov[i], self.D_innov_sqrt[i] = mu.innov.Q, mu.innov.D_sqrt
        self.rotated_innovations[i] = mu.rotated_innovation
        self.Kbar[i], self.K[i] = mu.Kbar, mu.K
        self.x_prior[k] = x_next
        self.Q_prior[k], self.D_prior_sqrt[k] = prior_next.Q, prior_next.D_sqrt

    def fields(self) -> dict:
        return dict(vars(self))


def svd_kf_run(instance: ModelInstance, data: Trajectory) -> SvdKfTrace:
    """SVD-based Kalman filter over the whole measurement record."""
    fac = _initial_plain_factors(instance)
    N, n, m, d = data.N, instance.n, instance.m, instance.B.shape[1]
    buf = _SvdTraceBuffers(N, n, m)
    x, prior = instance.x0.copy(), fac["Pi0"]
    buf.x_prior[0], buf.Q_prior[0], buf.D_prior_sqrt[0] = x, prior.Q, prior.D_sqrt
    for k in range(1, N + 1):
        try:
            mu = svd_measurement_update(x, prior, instance, data.measurements[k - 1], fac["R"])
            x, prior = svd_time_update(mu.x_post, mu.post, instance, _control(data, k, d), fac["Omega"])
        except FilterError as exc:
            raise exc.at(step=k) from None
        _check_finite(k, x, prior.Q, prior.D_sqrt, mu.x_post)
        buf.store_step(k, mu, x, prior)
    return SvdKfTrace(**buf.fields())


def diff_svd_kf_run(instance: ModelInstance, data: Trajectory, *, decouple_degenerate: bool = True) -> DiffSvdKfTrace:
    """Differentiated SVD-based Kalman filter.

    Every pre-array is passed with its ``p`` partials through ``differentiated_svd``,
    and the factor derivatives are read off its outputs.  With
    ``decouple_degenerate`` (the default) repeated singular values are tolerated
    when the derivative does not couple them (see ``solve_lbar2``).  Otherwise
    any repeated pair raises ``DegenerateSingularValuesError``.
    """
    F, B, G, H = instance.F, instance.B, instance.G, instance.H
    dF, dB, dG, dH = instance.dF, instance.dB, instance.dG, instance.dH
    N, n, m, p, d = data.N, instance.n, instance.m, instance.p, B.shape[1]
    try:
        fac: dict[str, FactorDerivs] = init_factors(instance)
    except FilterError as exc:
        raise exc.at(step=0, stage="initial factors") from None
    R_d, W_d = fac["R"], fac["Omega"]
    R_f, W_f = R_d.factors, W_d.factors
    dsvd = dict(decouple=decouple_degenerate, full=False)

    # theta-independent parts of the time-update derivative pre-array
    dA3_noise = _d_scaled(W_f.D_sqrt, W_f.Q, W_d.dD_sqrt, W_d.dQ, G, dG)

    buf = _SvdTraceBuffers(N, n, m)
    d_x_prior = np.empty((p, N + 1, n))
    d_x_post = np.empty((p, N, n))
    d_Q_prior = np.empty((p, N + 1, n, n))
    d_D_prior_sqrt = np.empty((p, N + 1, n))
    d_Q_post = np.empty((p, N, n, n))
    d_D_post_sqrt = np.empty((p, N, n))
    d_Q_innov = np.empty((p, N, m, m))
    d_D_innov_sqrt = np.empty((p, N, m))
    d_ebar = np.empty((p, N, m))
    d_Kbar = np.empty((p, N, n, m))

    x, prior = instance.x0.copy(), fac["Pi0"].factors
    dx, dQP, dDP = instance.dx0.copy(), fac["Pi0"].dQ, fac["Pi0"].dD_sqrt
    buf.x_prior[0], buf.Q_prior[0], buf.D_prior_sqrt[0] = x, prior.Q, prior.D_sqrt
    d_x_prior[:, 0], d_Q_prior[:, 0], d_D_prior_sqrt[:, 0] = dx, dQP, dDP

    for k in range(1, N + 1):
        stage = "MU1"
        try:
            # measurement update, first pre-array: innovation covariance factors
            A1 = _mu1_prearray(R_f, prior, H)
            dA1 = np.concatenate(
                [
                    _d_scaled(R_f.D_sqrt, R_f.Q, R_d.dD_sqrt, R_d.dQ),
                    _d_scaled(prior.D_sqrt, prior.Q, dDP, dQP, H, dH),
                ],
                axis=1,
            )
            r1 = differentiated_svd(A1, dA1, **dsvd)
            innov = SvdFactors(Q=r1.V, D_sqrt=r1.S)
            dQe, dSe = r1.V_prime, r1.S_prime
            _check_innovation_factor(innov.D_sqrt)

            # gains
            Kbar, K, D_inv = _gain_values(prior, innov, H)
            P = prior.covariance()
            DP2 = prior.D
            dDP2 = 2.0 * prior.D_sqrt * dDP
            dP_half = (dQP * DP2) @ prior.Q.T
            dP = dP_half + _T(dP_half) + (prior.Q * dDP2[:, None, :]) @ prior.Q.T
            dKbar = dP @ H.T @ innov.Q + P @ _T(dH) @ innov.Q + (P @ H.T) @ dQe
            dD_inv = -(2.0 * innov.D_sqrt * dSe) * D_inv**2
            dK = (dKbar * D_inv) @ innov.Q.T + (Kbar * dD_inv[:, None, :]) @ innov.Q.T + (Kbar * D_inv) @ _T(dQe)

            # measurement update, second pre-array: a posteriori covariance factors
            stage = "MU2"
            A2 = _mu2_prearray(R_f, prior, H, K)
            I_KH = np.eye(n) - K @ H
            dA2 = np.concatenate(
                [
                    _d_scaled(prior.D_sqrt, prior.Q, dDP, dQP, I_KH, -(dK @ H + K @ dH)),
                    _d_scaled(R_f.D_sqrt, R_f.Q, R_d.dD_sqrt, R_d.dQ, K, dK),
                ],
                axis=1,
            )
            r2 = differentiated_svd(A2, dA2, **dsvd)
            post = SvdFactors(Q=r2.V, D_sqrt=r2.S)

            e = data.measurements[k - 1] - H @ x
            ebar = innov.Q.T @ e
            x_post = x + Kbar @ (D_inv * ebar)
            de = -(dH @ x + dx @ H.T)
            debar = _T(dQe) @ e + de @ innov.Q
            dx_post = (
                dx
                + dKbar @ (D_inv * ebar)
                + (D_inv * debar) @ Kbar.T
                + (dD_inv * ebar) @ Kbar.T
            )

            # time update
            stage = "TU"
            A3 = _tu_prearray(post, W_f, F, G)
            dA3 = np.concatenate([_d_scaled(post.D_sqrt, post.Q, r2.S_prime, r2.V_prime, F, dF), dA3_noise], axis=1)
            r3 = differentiated_svd(A3, dA3, **dsvd)
            prior_next = SvdFactors(Q=r3.V, D_sqrt=r3.S)
            u = _control(data, k, d)
            x_next = F @ x_post + B @ u
            dx_next = dF @ x_post + dx_post @ F.T + dB @ u
        except FilterError as exc:
            raise exc.at(step=k, stage=stage) from None

        _check_finite(k, x_next, dx_next, r3.S_prime, r3.V_prime, debar)
        mu = MeasurementUpdate(x_post=x_post, post=post, innov=innov, Kbar=Kbar, K=K, rotated_innovation=ebar)
        buf.store_step(k, mu, x_next, prior_next)
        i = k - 1
        d_x_post[:, i] = dx_post
        d_Q_post[:, i], d_D_post_sqrt[:, i] = r2.V_prime, r2.S_prime
        d_Q_innov[:, i], d_D_innov_sqrt[:, i] = dQe, dSe
        d_ebar[:, i], d_Kbar[:, i] = debar, dKbar
        d_x_prior[:, k], d_Q_prior[:, k], d_D_prior_sqrt[:, k] = dx_next, r3.V_prime, r3.S_prime

        x, prior, dx, dQP, dDP = x_next, prior_next, dx_next, r3.V_prime, r3.S_prime

    return DiffSvdKfTrace(
        **buf.fields(),
        d_x_prior=d_x_prior, d_x_post=d_x_post,
        d_Q_prior=d_Q_prior, d_D_prior_sqrt=d_D_prior_sqrt,
        d_Q_post=d_Q_post, d_D_post_sqrt=d_D_post_sqrt,
        d_Q_innov=d_Q_innov, d_D_innov_sqrt=d_D_innov_sqrt,
        d_rotated_innovations=d_ebar, d_Kbar=d_Kbar,
    )


def write_trace_csv(trace: KfTrace | SvdKfTrace, path) -> None:
    """Per-step CSV: a priori and a posteriori estimates, innovation variances, log-det term."""
    if isinstance(trace, SvdKfTrace):
        variances = trace.D_innov_sqrt**2
        logdet = 2.0 * np.log(trace.D_innov_sqrt).sum(axis=1)
    else:
        variances = np.diagonal(trace.innovation_cov, axis1=1, axis2=2)
        logdet = np.linalg.slogdet(trace.innovation_cov)[1]
    n, m = trace.x_post.shape[1], variances.shape[1]
    header = (
        ["step"]
        + [f"x_prior_{j}" for j in range(n)]
        + [f"x_post_{j}" for j in range(n)]
        + [f"innov_var_{j}" for j in range(m)]
        + ["logdet_innov"]
    )
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(trace.N):
            row = [k + 1, *trace.x_prior[k], *trace.x_post[k], *variances[k], logdet[k]]
            writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
