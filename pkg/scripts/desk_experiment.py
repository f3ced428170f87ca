"""Run the desk-scale train/attack protocol on a directory of CIFAR-10 binary batches.

Prints one line per measurement and optionally writes everything as JSON.
"""
import argparse
import json
import logging
import time

from chromaflow.experiment import DeskConfig, default_data_dir, run_all


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data-dir", default=default_data_dir(), help="directory holding data_batch_*.bin / test_batch.bin")
    ap.add_argument("--train-count", type=int, default=10000)
    ap.add_argument("--test-count", type=int, default=2000)
    ap.add_argument("--attack-count", type=int, default=100)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--iters", type=int, default=1000)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="write the summary here")
    args = ap.parse_args()
    if not args.data_dir:
        ap.error("no --data-dir given and CHROMAFLOW_CIFAR_DIR is unset")
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = DeskConfig(
        data_dir=args.data_dir,
        train_count=args.train_count,
        test_count=args.test_count,
        attack_count=args.attack_count,
        epochs=args.epochs,
        iterations=args.iters,
        jobs=args.jobs,
        seed=args.seed,
    )
    start = time.perf_counter()
    summary = run_all(cfg)
    summary["total_seconds"] = time.perf_counter() - start
    for key, value in summary.items():
        print(f"{key}: {json.dumps(value)}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(summary, fh, indent=2)


if __name__ == "__main__":
    main()
