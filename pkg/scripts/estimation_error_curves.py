#!/usr/bin/env python3
"""Spectral estimation error curves on the reference instance.

For growing context-stream prefixes, reports the best-permutation Frobenius
errors of the estimated transition and emission matrices and the median l1
gap between estimated and exact beliefs over the back half of the prefix.

    python3 scripts/estimation_error_curves.py --checkpoints 1000 10000 100000
"""

import argparse
import sys
from dataclasses import replace
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

from hmmbandits import load_config  # noqa: E402
from hmmbandits.runner import estimation_curves, write_estimation_csv  # noqa: E402


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=str(ROOT / "configs" / "reference.ini"))
    parser.add_argument("--checkpoints", type=int, nargs="+",
                        default=[1000, 4000, 16000, 64000])
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--out", default="results/estimation_curves.csv")
    args = parser.parse_args()

    config = load_config(args.config)
    config = replace(
        config,
        run=replace(config.run, horizons=tuple(sorted(args.checkpoints)),
                    seeds=tuple(range(args.seeds))),
    )
    rows = estimation_curves(config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_estimation_csv(rows, str(out))
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
