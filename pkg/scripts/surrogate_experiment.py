"""Train and evaluate the detector on the synthetic desk-scale dataset.

    python scripts/surrogate_experiment.py --out runs/surrogate --ablations full,no_smash
"""

import argparse
import logging
import time
from pathlib import Path

from texforensics.surrogate import run_surrogate_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/surrogate")
    ap.add_argument("--ablations", default="full,no_smash")
    ap.add_argument("--n-train", type=int, default=400)
    ap.add_argument("--n-test", type=int, default=200)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    logging.getLogger("texforensics.texture").setLevel(logging.WARNING)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    results = run_surrogate_experiment(out / "data", tuple(args.ablations.split(",")), args.n_train, args.n_test,
                                       args.seed, args.size, workers=args.workers)
    print(f"{'ablation':<12} {'acc':>7} {'AP':>7} {'train+eval s':>13}")
    for name, (report, seconds) in results.items():
        report.write(out / f"{name}.csv")
        m = report.mean
        print(f"{name:<12} {m.accuracy:7.2f} {m.average_precision:7.2f} {seconds:13.0f}")
    print(f"total {time.perf_counter() - start:.0f} s; reports in {out}")


if __name__ == "__main__":
    main()
