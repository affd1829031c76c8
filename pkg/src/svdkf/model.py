"""Parametrized linear Gaussian state-space models.

    x_k = F x_{k-1} + B u_{k-1} + G w_{k-1},   w ~ N(0, Omega)
    z_k = H x_k + v_k,                         v ~ N(0, R)
    x_0 ~ N(x0, Pi0)

A model is a pair of generators: ``theta -> matrices`` and ``theta -> partials``,
the partials stacked along a leading axis of length ``p``.  Covariance factors
``{Q, D^{1/2}}`` of Omega, R and Pi0 (with derivatives) are either supplied in
closed form by the model or derived by the library.

Random sampling uses numpy's ``PCG64`` bit generator seeded with the integer
seed, drawing in a fixed order: ``x_0`` first, then for each ``k = 1..N`` the
process noise ``w_{k-1}`` followed by the measurement noise ``v_k``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import NotPDError, NotPSDError, RankDeficientError, ShapeMismatchError
from .svd_diff import SvdFactors, differentiated_svd, sym_spectral_factors

MATRIX_NAMES = ("F", "B", "G", "H", "Omega", "R", "Pi0", "x0")
COVARIANCE_NAMES = ("Omega", "R", "Pi0")


@dataclass(frozen=True)
class FactorDerivs:
    """Factors of one covariance and their partials, ``dQ`` is ``(p, n, n)`` and ``dD_sqrt`` is ``(p, n)``."""

    Q: np.ndarray
    D_sqrt: np.ndarray
    dQ: np.ndarray
    dD_sqrt: np.ndarray

    @property
    def factors(self) -> SvdFactors:
        return SvdFactors(self.Q, self.D_sqrt)

    def covariance(self) -> np.ndarray:
        return (self.Q * self.D_sqrt**2) @ self.Q.T

    def covariance_partials(self) -> np.ndarray:
        D = self.D_sqrt**2
        dD = 2.0 * self.D_sqrt * self.dD_sqrt
        left = (self.dQ * D) @ self.Q.T
        return left + np.swapaxes(left, -1, -2) + (self.Q * dD[:, None, :]) @ self.Q.T


FactorSupplier = Callable[[np.ndarray], Mapping[str, FactorDerivs]]


@dataclass(frozen=True)
class ParametrizedModel:
    """Dimensions plus generators for the system matrices and their partials.

    ``matrices(theta)`` returns a mapping with the keys in ``MATRIX_NAMES``;
    ``partials(theta)`` returns the same keys with a leading axis of length ``p``.
    ``factors``, when given, maps theta to closed-form ``FactorDerivs`` for any
    subset of ``Omega``, ``R`` and ``Pi0``; the rest are computed.
    """

    n: int
    m: int
    d: int
    q: int
    p: int
    matrices: Callable[[np.ndarray], Mapping[str, np.ndarray]]
    partials: Callable[[np.ndarray], Mapping[str, np.ndarray]]
    factors: FactorSupplier | None = None
    name: str = "model"

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        n, m, d, q = self.n, self.m, self.d, self.q
        return {
            "F": (n, n),
            "B": (n, d),
            "G": (n, q),
            "H": (m, n),
            "Omega": (q, q),
            "R": (m, m),
            "Pi0": (n, n),
            "x0": (n,),
        }


@dataclass(frozen=True)
class ModelInstance:
    """All matrices and partials of a model at one concrete theta."""

    theta: np.ndarray
    F: np.ndarray
    B: np.ndarray
    G: np.ndarray
    H: np.ndarray
    Omega: np.ndarray
    R: np.ndarray
    Pi0: np.ndarray
    x0: np.ndarray
    dF: np.ndarray
    dB: np.ndarray
    dG: np.ndarray
    dH: np.ndarray
    dOmega: np.ndarray
    dR: np.ndarray
    dPi0: np.ndarray
    dx0: np.ndarray
    analytic_factors: Mapping[str, FactorDerivs] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.F.shape[0]

    @property
    def m(self) -> int:
        return self.H.shape[0]

    @property
    def p(self) -> int:
        return self.theta.shape[0]


def _as_theta(theta) -> np.ndarray:
    return np.atleast_1d(np.asarray(theta, dtype=float)).reshape(-1)


def evaluate(model: ParametrizedModel, theta, *, check_pd: bool = True) -> ModelInstance:
    """Materialize every matrix and partial at ``theta`` with shape checks."""
    theta = _as_theta(theta)
    if theta.shape[0] != model.p:
        raise ShapeMismatchError(f"theta has {theta.shape[0]} entries, model expects {model.p}")
    mats = model.matrices(theta)
    parts = model.partials(theta)
    values = {}
    for name, shape in model.shapes.items():
        try:
            value = np.asarray(mats[name], dtype=float)
            deriv = np.asarray(parts[name], dtype=float)
        except KeyError:
            raise ShapeMismatchError(f"generator did not return '{name}'") from None
        if value.shape != shape:
            raise ShapeMismatchError(f"{name} has shape {value.shape}, expected {shape}")
        if deriv.shape != (model.p,) + shape:
            raise ShapeMismatchError(f"d{name} has shape {deriv.shape}, expected {(model.p,) + shape}")
        values[name] = value
        values["d" + name] = deriv
    if check_pd:
        try:
            np.linalg.cholesky(values["R"])
        except np.linalg.LinAlgError:
            raise NotPDError("measurement noise covariance R is not positive definite") from None
    analytic = dict(model.factors(theta)) if model.factors is not None else {}
    return ModelInstance(theta=theta, analytic_factors=analytic, **values)


def computed_factor_derivs(C: np.ndarray, dC: np.ndarray, tol: float = 1e-12) -> FactorDerivs:
    """Factors of a symmetric PSD matrix and their partials.

    A nonsingular ``C`` is used as its own pre-array: for SPD ``C = Q D Q^T`` the
    SVD gives ``S = D`` and ``V = Q``, hence ``D^{1/2} = sqrt(S)`` and
    ``(D^{1/2})' = S' / (2 sqrt(S))``.  A singular ``C`` (rank-deficient process
    noise, say) goes through its eigendecomposition instead.  Its null space must
    stay null to first order, i.e. ``q^T dC q = 0`` there, otherwise the square
    root is not differentiable and ``NotPSDError`` is raised.
    """
    try:
        res = differentiated_svd(C, dC)
    except RankDeficientError:
        return _singular_factor_derivs(C, dC, tol)
    D_sqrt = np.sqrt(res.S)
    return FactorDerivs(Q=res.V, D_sqrt=D_sqrt, dQ=res.V_prime, dD_sqrt=res.S_prime / (2.0 * D_sqrt))


def _singular_factor_derivs(C: np.ndarray, dC: np.ndarray, tol: float) -> FactorDerivs:
    f = sym_spectral_factors(C)
    Q, lam = f.Q, f.D
    n = lam.size
    scale = max(1.0, float(np.abs(C).max(initial=0.0)), float(np.abs(dC).max(initial=0.0)))
    null = lam <= tol * scale
    M = Q.T @ dC @ Q  # one slice per parameter
    M = 0.5 * (M + np.swapaxes(M, -1, -2))
    if np.abs(M[..., null, :][..., :, null]).max(initial=0.0) > 1e-10 * scale:
        raise NotPSDError("covariance leaves its null space to first order; square root is not differentiable")
    gap = lam[None, :] - lam[:, None]  # lambda_j - lambda_i
    distinct = np.abs(gap) > 1e-9 * max(float(lam.max(initial=0.0)), 1e-300)
    if np.abs(M[..., ~distinct & ~np.eye(n, dtype=bool) & ~(null[:, None] & null[None, :])]).max(initial=0.0) > 1e-10 * scale:
        raise NotPSDError("repeated eigenvalues with coupled derivative; factors are not differentiable")
    Lam = np.where(distinct, M / np.where(distinct, gap, 1.0), 0.0)
    dlam = np.diagonal(M, axis1=-2, axis2=-1)
    D_sqrt = np.where(null, 0.0, np.sqrt(lam))
    dD_sqrt = np.where(null, 0.0, dlam / np.where(null, 1.0, 2.0 * D_sqrt))
    return FactorDerivs(Q=Q, D_sqrt=D_sqrt, dQ=Q @ Lam, dD_sqrt=dD_sqrt)


def init_factors(instance: ModelInstance) -> dict[str, FactorDerivs]:
    """Factors and partials for Omega, R and Pi0, analytic where supplied."""
    out = {}
    for name in COVARIANCE_NAMES:
        if name in instance.analytic_factors:
            out[name] = instance.analytic_factors[name]
        else:
            out[name] = computed_factor_derivs(getattr(instance, name), getattr(instance, "d" + name))
    return out


@dataclass(frozen=True)
class Trajectory:
    """States ``x_0..x_N``, measurements ``z_1..z_N`` (row ``k - 1``) and controls ``u_0..u_{N-1}``."""

    states: np.ndarray
    measurements: np.ndarray
    controls: np.ndarray
    seed: int | None = None

    @property
    def N(self) -> int:
        return self.measurements.shape[0]


def _sqrt_cov(C: np.ndarray) -> np.ndarray:
    f = sym_spectral_factors(C)
    return f.Q * f.D_sqrt


def simulate(instance: ModelInstance, N: int, seed: int, u=None) -> Trajectory:
    if N < 1:
        raise ValueError("N must be at least 1")
    n, m = instance.n, instance.m
    d, q = instance.B.shape[1], instance.G.shape[1]
    if u is None:
        u = np.zeros((N, d))
    u = np.asarray(u, dtype=float).reshape(N, d)
    rng = np.random.Generator(np.random.PCG64(seed))
    L_pi, L_w, L_v = _sqrt_cov(instance.Pi0), _sqrt_cov(instance.Omega), _sqrt_cov(instance.R)

    x = np.empty((N + 1, n))
    z = np.empty((N, m))
    x[0] = instance.x0 + L_pi @ rng.standard_normal(n)
    for k in range(1, N + 1):
        w = L_w @ rng.standard_normal(q)
        v = L_v @ rng.standard_normal(m)
        x[k] = instance.F @ x[k - 1] + instance.B @ u[k - 1] + instance.G @ w
        z[k - 1] = instance.H @ x[k] + v
    return Trajectory(states=x, measurements=z, controls=u, seed=seed)


def constant_model(F, H, R, Pi0, *, Omega=None, G=None, B=None, x0=None, p: int = 1, name: str = "constant") -> ParametrizedModel:
    """A model whose matrices do not depend on theta (all partials zero)."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    n, m = F.shape[0], H.shape[0]
    G = np.eye(n) if G is None else np.atleast_2d(np.asarray(G, dtype=float))
    q = G.shape[1]
    Omega = np.zeros((q, q)) if Omega is None else np.atleast_2d(np.asarray(Omega, dtype=float))
    B = np.zeros((n, 1)) if B is None else np.atleast_2d(np.asarray(B, dtype=float))
    x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).reshape(n)
    mats = {
        "F": F,
        "B": B,
        "G": G,
        "H": H,
        "Omega": Omega,
        "R": np.atleast_2d(np.asarray(R, dtype=float)),
        "Pi0": np.atleast_2d(np.asarray(Pi0, dtype=float)),
        "x0": x0,
    }
    zeros = {k: np.zeros((p,) + v.shape) for k, v in mats.items()}
    return ParametrizedModel(
        n=n, m=m, d=B.shape[1], q=q, p=p,
        matrices=lambda theta: mats,
        partials=lambda theta: zeros,
        name=name,
    )


SATELLITE_F = np.array(
    [
        [1.0, 1.0, 0.5, 0.5],
        [0.0, 1.0, 1.0, 1.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 0.606],
    ]
)
SATELLITE_Q1 = 0.63e-2


def satellite_model(delta: float, q1: float = SATELLITE_Q1) -> ParametrizedModel:
    """In-track satellite motion with ill-conditioning parameter ``delta`` and scalar theta.

    ``R = theta^2 delta^2 I_2`` and ``Pi0 = theta^2 I_4`` have repeated eigenvalues,
    so closed-form factors are installed (identity eigenvectors, ``D^{1/2}``
    proportional to ``|theta|``).
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    H = np.array([[1.0, 1.0, 1.0, 1.0], [1.0, 1.0, 1.0, 1.0 + delta]])
    Omega = np.diag([0.0, 0.0, 0.0, q1])
    I2, I4 = np.eye(2), np.eye(4)

    def matrices(theta):
        t = theta[0]
        return {
            "F": SATELLITE_F,
            "B": np.zeros((4, 1)),
            "G": I4,
            "H": H,
            "Omega": Omega,
            "R": t * t * delta * delta * I2,
            "Pi0": t * t * I4,
            "x0": np.zeros(4),
        }

    def partials(theta):
        t = theta[0]
        return {
            "F": np.zeros((1, 4, 4)),
            "B": np.zeros((1, 4, 1)),
            "G": np.zeros((1, 4, 4)),
            "H": np.zeros((1, 2, 4)),
            "Omega": np.zeros((1, 4, 4)),
            "R": (2.0 * t * delta * delta * I2)[None],
            "Pi0": (2.0 * t * I4)[None],
            "x0": np.zeros((1, 4)),
        }

    def factors(theta):
        t = theta[0]
        sign = 1.0 if t >= 0 else -1.0
        return {
            "Omega": FactorDerivs(I4, np.array([0.0, 0.0, 0.0, np.sqrt(q1)]), np.zeros((1, 4, 4)), np.zeros((1, 4))),
            "R": FactorDerivs(I2, abs(t) * delta * np.ones(2), np.zeros((1, 2, 2)), sign * delta * np.ones((1, 2))),
            "Pi0": FactorDerivs(I4, abs(t) * np.ones(4), np.zeros((1, 4, 4)), sign * np.ones((1, 4))),
        }

    return ParametrizedModel(
        n=4, m=2, d=1, q=4, p=1,
        matrices=matrices, partials=partials, factors=factors,
        name=f"satellite(delta={delta:g})",
    )


def fd_matrix_oracle(model: ParametrizedModel, theta, h: float | None = None) -> dict[str, np.ndarray]:
    """Central-difference partials of every generator output, stacked ``(p, ...)``."""
    theta = _as_theta(theta)
    out = {name: np.zeros((model.p,) + shape) for name, shape in model.shapes.items()}
    for i in range(model.p):
        step = 1e-6 * (1.0 + abs(theta[i])) if h is None else h
        e = np.zeros_like(theta)
        e[i] = step
        plus, minus = model.matrices(theta + e), model.matrices(theta - e)
        for name in out:
            out[name][i] = (np.asarray(plus[name], dtype=float) - np.asarray(minus[name], dtype=float)) / (2.0 * step)
    return out
