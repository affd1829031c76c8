"""Analytic vs central-difference likelihood gradients on the satellite model across delta.

Prints one line per delta with both engines.  For small delta the central
differences themselves are dominated by roundoff in the likelihood, so a large
"rel" there says more about the reference than about the analytic gradient;
compare the analytic values across delta instead.
"""

import argparse

import numpy as np

from svdkf.bench import relative_error
from svdkf.errors import SvdKfError
from svdkf.estimation import ENGINES, evaluate_nll, fd_gradient_oracle
from svdkf.model import evaluate, satellite_model, simulate


def audit(delta, theta, steps, seed):
    model = satellite_model(delta)
    data = simulate(evaluate(model, [theta]), steps, seed)
    cells = []
    for engine in ENGINES:
        try:
            g = evaluate_nll(model, data, [theta], engine).gradient
            fd = fd_gradient_oracle(model, data, [theta], engine=engine)
            cells.append(f"{engine}: grad {g[0]: .6e} rel {relative_error(g, fd):.1e}")
        except SvdKfError as exc:
            cells.append(f"{engine}: {type(exc).__name__}")
    return "  ".join(cells)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--theta", type=float, default=5.0)
    parser.add_argument("--steps", type=int, default=100)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    for k in range(1, 11):
        delta = 10.0**-k
        print(f"delta {delta:.0e}  {audit(delta, args.theta, args.steps, args.seed)}")


if __name__ == "__main__":
    np.set_printoptions(precision=6)
    main()
