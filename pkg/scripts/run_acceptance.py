"""Build every cached dataset and trained bundle the acceptance suite reads.

Already valid artifacts are reused, so rerunning after an interruption picks
up where it stopped. Prints the test-split scores of each bundle.
"""

from __future__ import annotations

import argparse
import logging

from finsurrogate import experiments as ex

RUNS = [("cnn", "single", s) for s in ex.SEEDS] + [("cnn", "multi", 0)] + [("xception", "single", s) for s in ex.SEEDS]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", default="artifacts/datasets")
    ap.add_argument("--models", default="artifacts/acceptance")
    ap.add_argument("--only", choices=("cnn", "xception"), default=None)
    ap.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    if args.verbose:
        logging.getLogger("finsurrogate.surrogate").setLevel(logging.DEBUG)
    for model, dataset, seed in RUNS:
        if args.only and model != args.only:
            continue
        trained = ex.ensure_model(model, dataset, seed, args.data, args.models)
        s = ex.score_on_test(trained, ex.ensure_dataset(dataset, args.data))
        print(
            f"{model:8s} {dataset:6s} seed {seed}: R2 {s.r2:.4f} MAE {s.mae:.4f} "
            f"n={s.n} epochs {s.epochs} ({s.seconds / 60:.1f} min)",
            flush=True,
        )


if __name__ == "__main__":
    main()
