"""Print per-round bilevel loss curves from a run directory as aligned text."""

import csv
import sys
from pathlib import Path


def main(root: str, every: int = 25) -> None:
    for path in sorted(Path(root).rglob("loss_curve.csv")):
        print(path)
        with open(path) as fh:
            for row in csv.DictReader(fh):
                if int(row["step"]) % every == 0:
                    print(f"  {row['step']:>5}  lower {float(row['lower_loss']):.4f}  "
                          f"upper {float(row['upper_loss']):.4f}  kl {float(row['kl']):.4f}")


if __name__ == "__main__":
    main(sys.argv[1], *(int(a) for a in sys.argv[2:3]))
