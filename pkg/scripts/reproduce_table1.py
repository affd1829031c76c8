"""Print the differentiated SVD of the 5x2 worked example at theta = 0.5."""

import argparse
from pathlib import Path

from svdkf.bench import cmd_example1


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=None)
    args = parser.parse_args()
    text = cmd_example1().render()
    print(text, end="")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)


if __name__ == "__main__":
    main()
