"""Generate the desk-scale single-fin and five-fin datasets used by the acceptance suite."""

from __future__ import annotations

import argparse
import logging
import time

from finsurrogate.dataset import generate
from finsurrogate.experiments import DATASETS


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("which", choices=sorted(DATASETS), nargs="+")
    ap.add_argument("--out", default="artifacts/datasets")
    ap.add_argument("--workers", type=int, default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    for name in args.which:
        t0 = time.perf_counter()
        m = generate(DATASETS[name], f"{args.out}/{name}", workers=args.workers)
        print(f"{name}: {len(m)} records in {time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()
