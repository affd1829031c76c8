"""Monte Carlo delta sweep on the satellite model, written as CSV.

Defaults mirror the full protocol (100 runs, deltas 1e-1 .. 1e-10).  On a
single core that takes about half an hour; pass ``--quick`` or ``--workers``
to cut it down.
"""

import argparse
import sys
from pathlib import Path

from svdkf.bench import QUICK_DELTAS, SweepConfig, cmd_sweep, with_overrides


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path, help="YAML with SweepConfig fields")
    parser.add_argument("--runs", type=int)
    parser.add_argument("--workers", type=int)
    parser.add_argument("--quick", action="store_true")
    parser.add_argument("--out", type=Path, default=Path("results/table2.csv"))
    args = parser.parse_args()

    config = SweepConfig.from_yaml(args.config) if args.config else SweepConfig()
    if args.quick:
        config = with_overrides(config, deltas=QUICK_DELTAS, runs=30)
    config = with_overrides(config, runs=args.runs, workers=args.workers)

    args.out.parent.mkdir(parents=True, exist_ok=True)
    summary = cmd_sweep(config, out=args.out, progress=lambda msg: print(msg, file=sys.stderr, flush=True))
    print(summary.render(), end="")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
