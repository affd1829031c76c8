import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _models import random_case
from svdkf.errors import NonFiniteStateError, ZeroSingularValueError
from svdkf.estimation import (
    EstimateOptions,
    bfgs_minimize,
    estimate,
    evaluate_nll,
    fd_gradient_oracle,
    grad_nll_conventional,
    grad_nll_svd,
    nll_conventional,
    nll_svd,
)
from svdkf.filters import diff_kf_run, diff_svd_kf_run, kf_run, svd_kf_run
from svdkf.model import ParametrizedModel, Trajectory, constant_model, evaluate, satellite_model, simulate

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def one_step(z):
    return Trajectory(states=np.zeros((2, 1)), measurements=np.array([[z]]), controls=np.zeros((1, 1)))


def scalar_noise_model() -> ParametrizedModel:
    """F = H = 1, Pi0 = 1, R = theta, no process noise."""
    def matrices(theta):
        return {
            "F": np.eye(1), "B": np.zeros((1, 1)), "G": np.eye(1), "H": np.eye(1),
            "Omega": np.zeros((1, 1)), "R": np.array([[theta[0]]]), "Pi0": np.eye(1), "x0": np.zeros(1),
        }

    def partials(theta):
        out = {k: np.zeros((1,) + np.shape(v)) for k, v in matrices(theta).items()}
        out["R"] = np.ones((1, 1, 1))
        return out

    return ParametrizedModel(n=1, m=1, d=1, q=1, p=1, matrices=matrices, partials=partials, name="scalar")


@pytest.fixture(scope="module")
def random_cases():
    return [random_case(np.random.default_rng(900 + i), 40) for i in range(50)]


# --- objective --------------------------------------------------------------


def test_scalar_objective_by_hand():
    # one step, innovation 1, innovation variance 2
    inst = evaluate(constant_model(1.0, 1.0, 1.0, 1.0), [0.0])
    data = one_step(1.0)
    expected = HALF_LOG_2PI + 0.5 * (math.log(2.0) + 0.5)
    assert expected == pytest.approx(1.5155, abs=5e-5)
    assert nll_svd(svd_kf_run(inst, data)) == pytest.approx(expected, abs=1e-14)
    assert nll_conventional(kf_run(inst, data)) == pytest.approx(expected, abs=1e-14)


def test_zero_innovations_leave_log_det_only():
    inst = evaluate(constant_model(0.5, 1.0, 1.0, 1.0, Omega=[[0.2]]), [0.0])
    data = Trajectory(np.zeros((4, 1)), np.zeros((3, 1)), np.zeros((3, 1)))
    tr = svd_kf_run(inst, data)
    assert np.all(tr.rotated_innovations == 0.0)
    expected = 3 * HALF_LOG_2PI + np.log(tr.D_innov_sqrt).sum()
    assert nll_svd(tr) == pytest.approx(expected, abs=1e-14)


def test_objective_rejects_zero_innovation_factor():
    inst = evaluate(constant_model(1.0, 1.0, 1.0, 1.0), [0.0])
    tr = svd_kf_run(inst, one_step(1.0))
    broken = type(tr)(**{**tr.__dict__, "D_innov_sqrt": np.zeros_like(tr.D_innov_sqrt)})
    with pytest.raises(ZeroSingularValueError):
        nll_svd(broken)


def test_orthogonal_invariance_per_step(random_cases):
    for _, _, inst, data in random_cases:
        conv, svd = kf_run(inst, data), svd_kf_run(inst, data)
        logdet_conv = np.linalg.slogdet(conv.innovation_cov)[1]
        logdet_svd = 2.0 * np.log(svd.D_innov_sqrt).sum(axis=1)
        assert np.allclose(logdet_conv, logdet_svd, atol=1e-9, rtol=0)
        quad_conv = np.einsum("ki,ki->k", conv.innovations, np.linalg.solve(conv.innovation_cov, conv.innovations[..., None])[..., 0])
        quad_svd = ((svd.rotated_innovations / svd.D_innov_sqrt) ** 2).sum(axis=1)
        assert np.allclose(quad_conv, quad_svd, atol=1e-9, rtol=1e-9)
        assert nll_svd(svd) == pytest.approx(nll_conventional(conv), rel=1e-10, abs=1e-8)


# --- gradient ---------------------------------------------------------------


def test_scalar_gradient_closed_form():
    z = 0.7
    data = one_step(z)
    ev = evaluate_nll(scalar_noise_model(), data, [1.0])
    # d/dtheta of 1/2 [ln(1 + theta) + z^2 / (1 + theta)] at theta = 1
    expected = 0.5 * (1.0 / 2.0 - z * z / 4.0)
    assert ev.gradient[0] == pytest.approx(expected, abs=1e-14)
    assert evaluate_nll(scalar_noise_model(), data, [1.0], "diff_kf").gradient[0] == pytest.approx(expected, abs=1e-14)
    assert fd_gradient_oracle(scalar_noise_model(), data, [1.0])[0] == pytest.approx(expected, abs=1e-8)


def test_theta_free_model_has_zero_gradient():
    model = constant_model([[0.9, 0.1], [0.0, 0.7]], [[1.0, 0.3]], 0.5, np.diag([2.0, 1.0]), Omega=np.diag([0.1, 0.2]), p=2)
    data = simulate(evaluate(model, [0.0, 0.0]), 30, 1)
    for engine in ("diff_kf", "diff_svd_kf"):
        assert np.array_equal(evaluate_nll(model, data, [0.0, 0.0], engine).gradient, np.zeros(2))
    assert np.allclose(fd_gradient_oracle(model, data, [0.0, 0.0]), 0.0, atol=1e-12)


def test_satellite_gradient_matches_fd_and_other_engine():
    model = satellite_model(0.1)
    data = simulate(evaluate(model, [5.0]), 100, 0)
    svd = evaluate_nll(model, data, [5.0], "diff_svd_kf")
    conv = evaluate_nll(model, data, [5.0], "diff_kf")
    assert abs(svd.gradient[0] - conv.gradient[0]) <= 1e-6 * abs(conv.gradient[0])
    fd = fd_gradient_oracle(model, data, [5.0])
    assert abs(svd.gradient[0] - fd[0]) <= 1e-5 * abs(fd[0])


def test_gradient_correctness_random(random_cases):
    h = 1e-6
    for model, theta, _, data in random_cases:
        g = evaluate_nll(model, data, theta).gradient
        fd = fd_gradient_oracle(model, data, theta, h=h)
        rel = np.abs(g - fd).max() / max(np.abs(fd).max(), 1e-12)
        assert rel <= max(1e-5, 10 * h)


def test_engines_give_same_gradient(random_cases):
    for model, theta, inst, data in random_cases:
        a = grad_nll_conventional(diff_kf_run(inst, data))
        b = grad_nll_svd(diff_svd_kf_run(inst, data))
        assert np.abs(a - b).max() <= 1e-6 * max(1.0, np.abs(a).max())


def test_unknown_engine():
    with pytest.raises(ValueError):
        evaluate_nll(satellite_model(0.1), one_step(0.0), [1.0], engine="ud")


# --- optimizer --------------------------------------------------------------


def test_quadratic_bowl():
    rep = bfgs_minimize(lambda x: ((x[0] - 3.0) ** 2, np.array([2.0 * (x[0] - 3.0)])), [0.0])
    assert rep.converged and rep.iterations <= 30
    assert rep.theta[0] == pytest.approx(3.0, abs=1e-6)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 4))
def test_descent_on_random_convex_quadratics(seed, p):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((p, p))
    H = A @ A.T + 0.1 * np.eye(p)
    b = rng.standard_normal(p)

    def fun(x):
        return 0.5 * x @ H @ x - b @ x, H @ x - b

    rep = bfgs_minimize(fun, rng.standard_normal(p), EstimateOptions(max_iter=200))
    values = [r.value for r in rep.history]
    assert all(v1 <= v0 + 1e-12 * max(1.0, abs(v0)) for v0, v1 in zip(values, values[1:]))
    assert rep.converged
    assert np.allclose(rep.theta, np.linalg.solve(H, b), atol=1e-5 * max(1.0, np.abs(np.linalg.solve(H, b)).max()))


def test_failed_trials_shrink_the_step():
    def fun(x):
        if x[0] > 2.0:
            raise NonFiniteStateError("outside the domain")
        return (x[0] - 1.9) ** 2, np.array([2.0 * (x[0] - 1.9)])

    rep = bfgs_minimize(fun, [-10.0])
    assert rep.converged and rep.theta[0] == pytest.approx(1.9, abs=1e-6)


def test_iteration_limit_is_flagged():
    rep = bfgs_minimize(lambda x: (float(np.sum(np.cosh(x))), np.sinh(x)), [3.0, -2.0], EstimateOptions(max_iter=1))
    assert not rep.converged and rep.reason == "max_iter" and rep.iterations == 1


def test_failure_at_start_propagates():
    def fun(x):
        raise NonFiniteStateError("no")

    with pytest.raises(NonFiniteStateError):
        bfgs_minimize(fun, [0.0])


def test_satellite_estimate_and_engine_agreement(tmp_path):
    model = satellite_model(0.1)
    data = simulate(evaluate(model, [5.0]), 100, 0)
    a = estimate(model, data, [1.0], EstimateOptions(engine="diff_svd_kf"))
    b = estimate(model, data, [1.0], EstimateOptions(engine="diff_kf"))
    assert a.converged and b.converged
    assert 4.0 <= a.theta[0] <= 6.0
    assert abs(a.theta[0] - b.theta[0]) <= 1e-4
    values = [r.value for r in a.history]
    assert all(v1 <= v0 for v0, v1 in zip(values, values[1:]))
    a.write_csv(tmp_path / "opt.csv")
    rows = list(csv.reader((tmp_path / "opt.csv").open()))
    assert rows[0] == ["iter", "theta_0", "nll", "grad_norm", "step_length"]
    assert len(rows) == len(a.history) + 1
