"""Write procedural demo images as CIFAR-10-format binary batches.

These are NOT CIFAR-10.  They let the train/attack/eval pipeline run end to
end when the real batches are unavailable; numbers measured on them say
nothing about natural images.
"""
import argparse
from pathlib import Path

from chromaflow.data import save_cifar10_bin
from chromaflow.synthetic import make_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="synthetic_cifar", help="output directory")
    ap.add_argument("--train", type=int, default=10000, help="training images")
    ap.add_argument("--test", type=int, default=2000, help="test images")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_cifar10_bin(make_dataset(args.train, args.seed, "synth_train"), out / "data_batch_1.bin")
    save_cifar10_bin(make_dataset(args.test, args.seed + 1, "synth_test"), out / "test_batch.bin")
    print(f"wrote {args.train} train / {args.test} test images to {out}")


if __name__ == "__main__":
    main()
