"""Random well-conditioned models shared by the test modules."""

from __future__ import annotations

import numpy as np

from svdkf.model import ModelInstance, ParametrizedModel, Trajectory, evaluate, simulate


def _affine(base, slopes, theta):
    return base + np.tensordot(theta, slopes, axes=1)


def random_model(rng: np.random.Generator, n: int | None = None, m: int | None = None, p: int | None = None) -> ParametrizedModel:
    """Every matrix depends on theta; covariances are ``A(theta) A(theta)^T + c I``.

    F is scaled to spectral radius 0.9 at theta = 0 and only perturbed mildly,
    so the filters stay well conditioned for theta of order one.
    """
    n = int(rng.integers(1, 5)) if n is None else n
    m = int(rng.integers(1, 3)) if m is None else m
    p = int(rng.integers(1, 3)) if p is None else p
    q, d = n, 1

    F0 = rng.standard_normal((n, n))
    F0 *= 0.9 / max(np.abs(np.linalg.eigvals(F0)).max(), 1e-3)
    F1 = 0.05 * rng.standard_normal((p, n, n))
    H0 = rng.standard_normal((m, n))
    H1 = 0.2 * rng.standard_normal((p, m, n))
    B0 = rng.standard_normal((n, d))
    B1 = 0.2 * rng.standard_normal((p, n, d))
    G0 = np.eye(n) + 0.3 * rng.standard_normal((n, q))
    G1 = 0.1 * rng.standard_normal((p, n, q))
    x00 = rng.standard_normal(n)
    x01 = 0.3 * rng.standard_normal((p, n))
    roots = {}
    for name, size, scale in (("Omega", q, 0.3), ("R", m, 0.5), ("Pi0", n, 1.0)):
        roots[name] = (scale * rng.standard_normal((size, size)), 0.2 * scale * rng.standard_normal((p, size, size)), 0.1 * scale)

    def cov(name, theta):
        A0, A1, c = roots[name]
        A = _affine(A0, A1, theta)
        dA = A1
        C = A @ A.T + c * np.eye(A.shape[0])
        dC = dA @ A.T + A @ np.swapaxes(dA, -1, -2)
        return C, dC

    def matrices(theta):
        out = {
            "F": _affine(F0, F1, theta),
            "B": _affine(B0, B1, theta),
            "G": _affine(G0, G1, theta),
            "H": _affine(H0, H1, theta),
            "x0": _affine(x00, x01, theta),
        }
        for name in roots:
            out[name] = cov(name, theta)[0]
        return out

    def partials(theta):
        out = {"F": F1, "B": B1, "G": G1, "H": H1, "x0": x01}
        for name in roots:
            out[name] = cov(name, theta)[1]
        return out

    return ParametrizedModel(n=n, m=m, d=d, q=q, p=p, matrices=matrices, partials=partials, name="random")


def random_theta(rng: np.random.Generator, p: int) -> np.ndarray:
    return rng.uniform(0.5, 1.5, size=p)


def random_controls(rng: np.random.Generator, N: int, d: int = 1) -> np.ndarray:
    return rng.standard_normal((N, d))


def random_case(rng: np.random.Generator, N: int, max_radius: float = 0.95, **dims) -> tuple[ParametrizedModel, np.ndarray, ModelInstance, Trajectory]:
    """A random model, a theta at which F is stable, and simulated data with controls."""
    while True:
        model = random_model(rng, **dims)
        theta = random_theta(rng, model.p)
        inst = evaluate(model, theta)
        if np.abs(np.linalg.eigvals(inst.F)).max() <= max_radius:
            break
    data = simulate(inst, N, int(rng.integers(2**31)), u=random_controls(rng, N, model.d))
    return model, theta, inst, data
