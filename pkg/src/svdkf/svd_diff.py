"""SVD of array-algorithm pre-arrays and the derivatives of their post-array factors.

A pre-array ``A`` of shape ``(k + s, s)`` with full column rank factors as
``A = W [S; 0] V^T``.  Given ``dA/dtheta`` the derivatives of ``S`` and ``V`` follow
from the main ``s x s`` block of ``W^T A' V`` alone; ``W'`` is never needed.

Every factorization in this module is put on one deterministic branch:
singular values descending and, in each column of ``V``, the entry of largest
magnitude positive (first such entry on ties).  ``W`` columns are flipped together
with ``V`` so ``A = W Sigma V^T`` still holds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from .errors import (
    DegenerateSingularValuesError,
    NonFiniteStateError,
    NotPSDError,
    NotSymmetricError,
    RankDeficientError,
    ShapeMismatchError,
)

RANK_TOL = 1e-12
DEGENERACY_TOL = 1e-9
# Used only when degenerate pairs are decoupled, see ``solve_lbar2``.
COUPLING_TOL = 1e-8


@dataclass(frozen=True)
class SvdTriple:
    W: np.ndarray
    S: np.ndarray
    V: np.ndarray

    @property
    def Sigma(self) -> np.ndarray:
        """The rectangular ``(k + s, s)`` singular value array ``[S; 0]``."""
        rows, s = self.W.shape[0], self.S.shape[0]
        out = np.zeros((rows, s))
        out[:s] = np.diag(self.S)
        return out

    def reconstruct(self) -> np.ndarray:
        return self.W @ self.Sigma @ self.V.T


@dataclass(frozen=True)
class SvdFactors:
    """``{Q, D^{1/2}}`` with ``P = Q diag(D_sqrt**2) Q^T``."""

    Q: np.ndarray
    D_sqrt: np.ndarray

    @property
    def D(self) -> np.ndarray:
        return self.D_sqrt**2

    def covariance(self) -> np.ndarray:
        return (self.Q * self.D) @ self.Q.T


@dataclass(frozen=True)
class TriangularSplit:
    lower: np.ndarray
    diag: np.ndarray
    upper: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return self.lower + _diag_embed(self.diag) + self.upper


@dataclass(frozen=True)
class DiffSvdResult:
    """Post-array factors and their derivatives.

    With a stacked derivative input of shape ``(p, k + s, s)`` the derivative fields
    carry a leading axis of length ``p``; ``S`` and ``V`` never do.
    """

    S: np.ndarray
    V: np.ndarray
    S_prime: np.ndarray
    V_prime: np.ndarray
    W: np.ndarray
    WtApV: np.ndarray
    lbar2: np.ndarray

    @property
    def M(self) -> np.ndarray:
        """Main ``s x s`` block of ``W^T A' V``."""
        s = self.S.shape[0]
        return self.WtApV[..., :s, :]

    @property
    def Lambda(self) -> np.ndarray:
        return np.swapaxes(self.lbar2, -1, -2) - self.lbar2


def _diag_embed(d: np.ndarray) -> np.ndarray:
    out = np.zeros(d.shape + d.shape[-1:])
    idx = np.arange(d.shape[-1])
    out[..., idx, idx] = d
    return out


@lru_cache(maxsize=None)
def _masks(s: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    strict_lower = np.tri(s, s, -1, dtype=bool)
    strict_lower.setflags(write=False)
    upper = strict_lower.T.copy()
    upper.setflags(write=False)
    idx = np.arange(s)
    idx.setflags(write=False)
    return strict_lower, upper, idx


def _canonical_signs(V: np.ndarray) -> np.ndarray:
    pivot = V[abs(V).argmax(axis=0), _masks(V.shape[1])[2]]
    # pivots of orthonormal columns are never zero
    return np.copysign(1.0, pivot)


def svd_factorize(A, rank_tol: float = RANK_TOL, *, full: bool = True) -> SvdTriple:
    """SVD of a tall pre-array on the canonical branch.

    With ``full=False`` only the first ``s`` columns of ``W`` are formed, which is
    all the derivative formulas use.  Raises ``RankDeficientError`` when
    ``sigma_min <= rank_tol * sigma_max``.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] < A.shape[1] or A.shape[1] == 0:
        raise ShapeMismatchError(f"pre-array must be tall (k+s) x s, got shape {A.shape}")
    try:
        W, S, Vt = np.linalg.svd(A, full_matrices=full)
    except np.linalg.LinAlgError as exc:
        raise NonFiniteStateError(f"SVD failed: {exc}") from None
    if not math.isfinite(S.sum()):
        raise NonFiniteStateError("pre-array contains NaN or Inf")
    s = A.shape[1]
    V = Vt.T
    if (S[1:] > S[:-1]).any():
        order = np.argsort(-S, kind="stable")
        S, V = S[order], V[:, order]
        W[:, :s] = W[:, order]
    if S[0] == 0.0 or S[-1] <= rank_tol * S[0]:
        raise RankDeficientError(
            f"pre-array is numerically rank deficient (sigma_min={S[-1]:.3e}, sigma_max={S[0]:.3e})"
        )
    signs = _canonical_signs(V)
    V = V * signs
    W[:, :s] *= signs
    return SvdTriple(W=W, S=S, V=V)


def split_triangular(M) -> TriangularSplit:
    """Split (a stack of) square matrices into strict lower, diagonal and strict upper parts."""
    M = np.asarray(M, dtype=float)
    lower_mask, upper_mask, idx = _masks(M.shape[-1])
    return TriangularSplit(
        lower=M * lower_mask,
        diag=M[..., idx, idx],
        upper=M * upper_mask,
    )


def solve_lbar2(
    lower,
    upper,
    S,
    *,
    degeneracy_tol: float = DEGENERACY_TOL,
    decouple: bool = False,
    coupling_scale: float | None = None,
    coupling_tol: float = COUPLING_TOL,
) -> np.ndarray:
    """Strictly lower factor of the skew generator ``Lambda = L2^T - L2``.

    Entry ``(i, j)``, ``i > j``, is ``(u_ji s_j + l_ij s_i) / (s_i^2 - s_j^2)``.
    ``lower`` and ``upper`` may carry a leading batch axis; ``S`` is descending.

    A pair with ``|s_i - s_j| <= degeneracy_tol * s_max`` raises
    ``DegenerateSingularValuesError``.  With ``decouple=True`` such a pair is
    accepted when its numerator is negligible (below ``coupling_tol *
    coupling_scale``); its rotation is then set to zero.  The numerator is the
    off-diagonal entry of ``V^T (A^T A)' V``, so the Gram derivative is reproduced
    to within that tolerance; a non-negligible coupling still raises.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    S = np.asarray(S, dtype=float)
    s = S.shape[0]
    if lower.shape[-2:] != (s, s) or upper.shape != lower.shape:
        raise ShapeMismatchError("triangular parts must be s x s and of equal shape")
    if coupling_scale is None:
        coupling_scale = S.max(initial=0.0) * max(np.abs(lower).max(initial=0.0), np.abs(upper).max(initial=0.0))
    return _lbar2_from_block(
        lower + upper, S, degeneracy_tol=degeneracy_tol, decouple=decouple,
        coupling_scale=coupling_scale, coupling_tol=coupling_tol,
    )


def _lbar2_from_block(M, S, *, degeneracy_tol, decouple, coupling_scale, coupling_tol) -> np.ndarray:
    # Only the off-diagonal entries of M are read.
    s = S.shape[0]
    strict, _, idx = _masks(s)
    gap = S[:, None] - S[None, :]
    den = gap * (S[:, None] + S[None, :])
    num = np.swapaxes(M, -1, -2) * S + M * S[:, None]
    # Singular values carry absolute error of order eps * s_max, so the
    # distinctness test is on the gap itself, scaled by s_max.
    limit = degeneracy_tol * S[0]
    if s < 2 or (S[:-1] - S[1:]).min() > limit:
        den[idx, idx] = 1.0
        return (num / den) * strict

    near = strict & (np.abs(gap) <= limit)
    if not decouple:
        i, j = np.argwhere(near)[0]
        raise DegenerateSingularValuesError(
            f"singular values {j + 1} and {i + 1} are not distinct (sigma={S[j]:.6e}, {S[i]:.6e})"
        )
    if coupling_scale is None:
        coupling_scale = S[0] * np.abs(M).max(initial=0.0)
    coupling = np.abs(num[..., near]).max(initial=0.0)
    if coupling > coupling_tol * coupling_scale:
        raise DegenerateSingularValuesError(
            f"repeated singular values with non-negligible coupling {coupling:.3e}"
        )
    ok = strict & ~near
    return np.where(ok, num / np.where(ok, den, 1.0), 0.0)


def differentiated_svd(
    A,
    A_prime,
    *,
    rank_tol: float = RANK_TOL,
    degeneracy_tol: float = DEGENERACY_TOL,
    decouple: bool = False,
    coupling_tol: float = COUPLING_TOL,
    triple: SvdTriple | None = None,
    full: bool = True,
) -> DiffSvdResult:
    """Post-array factors of ``A`` and their derivatives given ``A' = dA/dtheta``.

    ``A_prime`` is either one matrix shaped like ``A`` or a stack ``(p, k + s, s)``,
    one slice per parameter.  Pass ``triple`` to reuse an existing factorization of
    ``A`` (it must be on the canonical branch).  ``full=False`` skips the trailing
    columns of ``W``, so ``WtApV`` then holds only the main block.
    """
    A = np.asarray(A, dtype=float)
    A_prime = np.asarray(A_prime, dtype=float)
    if A_prime.shape[-2:] != A.shape or A_prime.ndim not in (2, 3):
        raise ShapeMismatchError(f"derivative shape {A_prime.shape} does not match pre-array {A.shape}")
    if triple is None:
        triple = svd_factorize(A, rank_tol=rank_tol, full=full)
    W, S, V = triple.W, triple.S, triple.V
    s = S.shape[0]

    WtApV = W.T @ A_prime @ V
    M = WtApV[..., :s, :]
    lbar2 = _lbar2_from_block(
        M,
        S,
        degeneracy_tol=degeneracy_tol,
        decouple=decouple,
        coupling_scale=None,
        coupling_tol=coupling_tol,
    )
    Lam = np.swapaxes(lbar2, -1, -2) - lbar2
    idx = _masks(s)[2]
    return DiffSvdResult(
        S=S,
        V=V,
        S_prime=M[..., idx, idx],
        V_prime=V @ Lam,
        W=W,
        WtApV=WtApV,
        lbar2=lbar2,
    )


def sym_spectral_factors(P, sym_tol: float = 1e-10, psd_tol: float = 1e-10) -> SvdFactors:
    """Spectral factors ``{Q, D^{1/2}}`` of a symmetric PSD matrix.

    Tolerances are relative to ``max(1, max|P|)``.  Eigenvalues are sorted
    descending, round-off negatives are clamped to zero and ``Q`` is put on the
    same sign branch as ``svd_factorize`` uses for ``V``.
    """
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ShapeMismatchError(f"expected a square matrix, got shape {P.shape}")
    if not np.all(np.isfinite(P)):
        raise NonFiniteStateError("matrix contains NaN or Inf")
    scale = max(1.0, np.abs(P).max(initial=0.0))
    if np.abs(P - P.T).max(initial=0.0) > sym_tol * scale:
        raise NotSymmetricError("matrix is not symmetric")
    lam, Q = np.linalg.eigh(0.5 * (P + P.T))
    order = np.argsort(-lam, kind="stable")
    lam, Q = lam[order], Q[:, order]
    if lam.size and lam[-1] < -psd_tol * scale:
        raise NotPSDError(f"matrix has negative eigenvalue {lam[-1]:.3e}")
    lam = np.clip(lam, 0.0, None)
    Q = Q * _canonical_signs(Q)
    return SvdFactors(Q=Q, D_sqrt=np.sqrt(lam))


@dataclass(frozen=True)
class FdSvdDerivative:
    S_prime: np.ndarray
    V_prime: np.ndarray


def fd_svd_oracle(A_of_theta: Callable[[float], np.ndarray], theta: float, h: float | None = None) -> FdSvdDerivative:
    """Central differences of ``S`` and of the sign-aligned ``V`` of ``A(theta)``."""
    if h is None:
        h = 1e-6 * (1.0 + abs(theta))
    if h <= 0:
        raise ValueError("step h must be positive")
    base = svd_factorize(A_of_theta(theta))
    plus = svd_factorize(A_of_theta(theta + h))
    minus = svd_factorize(A_of_theta(theta - h))

    def aligned(V):
        flip = np.where(np.sum(V * base.V, axis=0) < 0.0, -1.0, 1.0)
        return V * flip

    return FdSvdDerivative(
        S_prime=(plus.S - minus.S) / (2.0 * h),
        V_prime=(aligned(plus.V) - aligned(minus.V)) / (2.0 * h),
    )


def gram_from_factors_derivative(result: DiffSvdResult) -> np.ndarray:
    """``(V Sigma^2 V^T)'`` expanded with the computed ``S'`` and ``V'``."""
    V, S = result.V, result.S
    S2 = S**2
    left = (result.V_prime * S2) @ V.T
    middle = (V * (2.0 * S * result.S_prime)[..., None, :]) @ V.T
    return left + np.swapaxes(left, -1, -2) + middle


def gram_derivative_gap(A, A_prime, result: DiffSvdResult | None = None) -> float:
    """``max |(A^T A)' - (V Sigma^2 V^T)'|`` with the left side from the product rule."""
    A = np.asarray(A, dtype=float)
    A_prime = np.asarray(A_prime, dtype=float)
    if result is None:
        result = differentiated_svd(A, A_prime)
    AtAp = np.swapaxes(A_prime, -1, -2) @ A
    exact = AtAp + np.swapaxes(AtAp, -1, -2)
    return float(np.abs(exact - gram_from_factors_derivative(result)).max())


def gram_derivative_gap_fd(
    A_of_theta: Callable[[float], np.ndarray],
    theta: float,
    A_prime,
    h: float = 1e-6,
) -> float:
    """Same audit with ``(A^T A)'`` taken by central differences instead."""
    plus, minus = A_of_theta(theta + h), A_of_theta(theta - h)
    fd = (plus.T @ plus - minus.T @ minus) / (2.0 * h)
    result = differentiated_svd(A_of_theta(theta), A_prime)
    return float(np.abs(fd - gram_from_factors_derivative(result)).max())
