"""Run both arms over several seeds and print the aggregated report.

    python3 scripts/run_experiment.py --config configs/desk.conf --seeds 0 1 2 --out-dir runs/desk
"""

import argparse
import json
import sys
import time

from bliss.config import load_config
from bliss.pipeline import run_experiment, set_threads


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/desk.conf")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out-dir", default="runs/desk")
    args = ap.parse_args()

    set_threads()
    cfg = load_config(args.config, {"out_dir": args.out_dir})
    start = time.perf_counter()
    report = run_experiment(cfg, args.seeds)
    print(json.dumps(report.summary(), indent=1))
    for s in args.seeds:
        b, r = report.rounds["bliss"][s][-1], report.rounds["random"][s][-1]
        print(f"seed {s}: clean {b['clean_fraction']:.3f} vs {r['clean_fraction']:.3f}, "
              f"held-out CE {b['heldout_ce']:.4f} vs {r['heldout_ce']:.4f}")
    print(f"elapsed {time.perf_counter() - start:.1f}s", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
