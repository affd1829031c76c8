"""Acceptance checks, one test per criterion.

Each test prints a single ``[criterion N] PASS|FAIL ...`` line (visible even
without ``-s``) before asserting, so ``pytest -v`` output doubles as the
acceptance report.  Criteria 5 and 6 run Monte Carlo sweeps and take several
minutes each on a single core.
"""

import itertools
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from _models import random_case
from svdkf.bench import SweepConfig, cmd_example1, cmd_gradcheck, cmd_sweep, relative_error, summarize_estimates
from svdkf.estimation import evaluate_nll, fd_gradient_oracle, grad_nll_conventional, grad_nll_svd
from svdkf.filters import diff_kf_run, diff_svd_kf_run, kf_run, svd_kf_run
from svdkf.model import satellite_model
from svdkf.svd_diff import differentiated_svd, gram_derivative_gap, gram_derivative_gap_fd

TESTS = Path(__file__).parent


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {detail}")


# --- 1: worked example golden values -----------------------------------------

# printed to four decimals in the reference worked example
GOLDEN_S = np.array([1.7061, 0.8185])
GOLDEN_S_PRIME = np.array([2.2959, 0.5691])
GOLDEN_M = np.array([[2.2959, -1.6522], [1.1584, 0.5691]])
GOLDEN_LBAR2_21 = 0.8348
GOLDEN_V_PRIME = np.array([[0.0677, -0.8321], [0.8321, 0.0677]])


def _golden_gap(res, signs):
    """Largest deviation from the golden values after flipping V and W columns by ``signs``."""
    D = np.diag(signs)
    M = D @ res.M @ D
    lbar2 = D @ res.lbar2 @ D
    gaps = [
        np.abs(res.S - GOLDEN_S).max(),
        np.abs(res.S_prime - GOLDEN_S_PRIME).max(),
        np.abs(M - GOLDEN_M).max(),
        abs(lbar2[1, 0] - GOLDEN_LBAR2_21),
        np.abs(np.abs(res.V_prime) - np.abs(GOLDEN_V_PRIME)).max(),
    ]
    return max(gaps)


def test_criterion_1_worked_example(capsys):
    start = time.perf_counter()
    report_ = cmd_example1()
    res = differentiated_svd(report_.A, report_.A_prime)
    elapsed = time.perf_counter() - start
    gap, signs = min((_golden_gap(res, np.array(s)), s) for s in itertools.product((1.0, -1.0), repeat=2))
    ok = gap <= 5e-4 and elapsed < 1.0
    report(capsys, 1, ok, f"max deviation {gap:.2e} (column signs {signs}), runtime {elapsed:.3f} s")
    assert gap <= 5e-4
    assert elapsed < 1.0


# --- 2: Gram-derivative audit --------------------------------------------------


def unit_family(rng, rows=5, cols=2):
    """A0 + t A1 + t^2 A2 + sin(t) A3 with N(0, 1/4) coefficients, so entries have unit-order variance."""
    A0, A1, A2, A3 = (0.5 * rng.standard_normal((rows, cols)) for _ in range(4))

    def A(t):
        return A0 + t * A1 + t * t * A2 + math.sin(t) * A3

    def dA(t):
        return A1 + 2.0 * t * A2 + math.cos(t) * A3

    return A, dA


def test_criterion_2_gram_derivative(capsys):
    ex = cmd_example1()
    gaps = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        A, dA = unit_family(rng)
        t = float(rng.uniform(-1.0, 1.0))
        gaps.append(gram_derivative_gap_fd(A, t, dA(t), h=1e-6))
        # the exact left side must agree far more tightly
        assert gram_derivative_gap(A(t), dA(t)) <= 1e-12
    worst = max(gaps)
    ok = ex.linf_analytic <= 1e-10 and worst <= 1e-9
    report(capsys, 2, ok, f"worked example {ex.linf_analytic:.2e}, worst of 100 random families {worst:.2e}")
    assert ex.linf_analytic <= 1e-10
    assert worst <= 1e-9


# --- 3: engine equivalence -----------------------------------------------------


def test_criterion_3_engine_equivalence(capsys):
    worst_x = worst_P = worst_g = 0.0
    for i in range(25):
        _, _, inst, data = random_case(np.random.default_rng(3000 + i), 50)
        conv, svd = kf_run(inst, data), svd_kf_run(inst, data)
        worst_x = max(worst_x, np.abs(conv.x_prior - svd.x_prior).max(), np.abs(conv.x_post - svd.x_post).max())
        worst_P = max(worst_P, np.abs(conv.P_prior - svd.P_prior).max())
        ga = grad_nll_conventional(diff_kf_run(inst, data))
        gb = grad_nll_svd(diff_svd_kf_run(inst, data))
        worst_g = max(worst_g, relative_error(gb, ga))
    ok = worst_x <= 1e-8 and worst_P <= 1e-7 and worst_g <= 1e-6
    report(capsys, 3, ok, f"states {worst_x:.2e}, P {worst_P:.2e}, gradient rel {worst_g:.2e} over 25 models")
    assert worst_x <= 1e-8
    assert worst_P <= 1e-7
    assert worst_g <= 1e-6


# --- 4: gradient against central differences -----------------------------------


def test_criterion_4_gradient_fd(capsys):
    sat = cmd_gradcheck(satellite_model(0.1), [5.0], steps=100, seed=0, h=1e-6)
    worst = 0.0
    for i in range(50):
        model, theta, _, data = random_case(np.random.default_rng(4000 + i), 50)
        g = evaluate_nll(model, data, theta, "diff_svd_kf").gradient
        fd = fd_gradient_oracle(model, data, theta, h=1e-6)
        worst = max(worst, relative_error(g, fd))
    ok = sat.rel_error <= 1e-4 and worst <= 1e-4
    report(capsys, 4, ok, f"satellite {sat.rel_error:.2e}, worst of 50 random models {worst:.2e}")
    assert sat.rel_error <= 1e-4
    assert worst <= 1e-4


# --- 5 and 6: Monte Carlo sweeps ---------------------------------------------------


@pytest.mark.slow
def test_criterion_5_well_conditioned_sweep(capsys):
    config = SweepConfig(deltas=(0.1,), runs=100)
    start = time.perf_counter()
    summary = cmd_sweep(config)
    elapsed = time.perf_counter() - start
    rows = [summary.row(m, 0.1) for m in config.methods]
    ok = all(r.failures == 0 and abs(r.mean - 5.0046) <= 0.15 and 0.12 <= r.rmse <= 0.50 for r in rows)
    stats = "; ".join(f"{r.method} mean {r.mean:.4f} rmse {r.rmse:.4f} failures {r.failures}" for r in rows)
    report(capsys, 5, ok, f"delta 1e-1, M=100: {stats}")

    # the quick variant uses seeds 0..29, i.e. the first 30 runs of this sweep
    quick_ok = True
    for method in config.methods:
        first30 = [o.theta_hat for o in summary.outcomes if o.method == method and o.run < 30 and o.ok]
        mean = summarize_estimates(first30, 5.0)[0]
        quick_ok &= len(first30) == 30 and abs(mean - 5.0) <= 0.3
    full_estimate = elapsed * len(SweepConfig().deltas)
    with capsys.disabled():
        print(f"[criterion 5] quick-variant statistics {'PASS' if quick_ok else 'FAIL'}; "
              f"delta 1e-1 row took {elapsed:.0f} s, full 10-delta sweep on one worker is roughly {full_estimate:.0f} s")
    for r in rows:
        assert r.failures == 0
        assert abs(r.mean - 5.0046) <= 0.15
        assert 0.12 <= r.rmse <= 0.50
    assert quick_ok


@pytest.mark.slow
def test_criterion_6_ill_conditioning_separation(capsys):
    tried = []
    separated_at = None
    for delta in (1e-7, 1e-6, 1e-8):
        summary = cmd_sweep(SweepConfig(deltas=(delta,), runs=100))
        conv, svd = summary.row("diff_kf", delta), summary.row("diff_svd_kf", delta)
        conv_bad = conv.failed or conv.mape_pct > 50.0
        svd_good = svd.failures == 0 and svd.mape_pct < 10.0
        conv_text = "FAILED" if conv.failed else f"MAPE {conv.mape_pct:.2f}%"
        tried.append(f"delta {delta:.0e}: diff_kf {conv_text} ({conv.failures}/100), "
                     f"diff_svd_kf MAPE {svd.mape_pct:.2f}% ({svd.failures}/100 failed)")
        if conv_bad and svd_good:
            separated_at = delta
            break
    report(capsys, 6, separated_at is not None, "; ".join(tried))
    assert separated_at is not None


# --- 7: property suites ------------------------------------------------------------

PROPERTY_TESTS = [
    "test_svd_diff.py::test_factorize_properties",  # orthogonality, descending and nonnegative sigma
    "test_svd_diff.py::test_against_fd_oracle_and_invariants",  # skew-symmetry of V^T V'
    "test_svd_diff.py::test_spectral_factors_reconstruct",
    "test_filters.py::test_factor_invariants",  # factors along the filter, skew Q^T dQ
    "test_filters.py::test_rotated_innovation_norm",
    "test_estimation.py::test_orthogonal_invariance_per_step",  # nll_svd equals nll_conventional
    "test_estimation.py::test_descent_on_random_convex_quadratics",
]


def test_criterion_7_property_suites(capsys):
    cmd = [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", "--hypothesis-seed=0"]
    cmd += [str(TESTS / t) for t in PROPERTY_TESTS]
    proc = subprocess.run(cmd, capture_output=True, text=True, cwd=TESTS.parent, timeout=1800)
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr.strip()[-200:]
    report(capsys, 7, proc.returncode == 0, f"{len(PROPERTY_TESTS)} property tests: {tail}")
    assert proc.returncode == 0, proc.stdout[-3000:]
