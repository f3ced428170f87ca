"""``chromaflow`` command line: train / attack / eval / inspect.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
Summary lines go to stdout, diagnostics to stderr.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import FLOW_MODES, AttackConfig, AttackResult, attack_batch
from .classifier import TrainConfig, load_weights, predict, save_weights, train
from .color import colorfulness
from .data import filter_colorful, load_any, read_image, stack, write_image
from .errors import ChromaflowError
from .evaluation import accuracy, build_report, dumps_report, grayscale_defense_eval
from .warp import FlowField, load_flow, save_flow

logger = logging.getLogger("chromaflow")

MODE_NAMES = {
    "subpixel": "chroma_subpixel",
    "unrestricted": "chroma_unrestricted",
    "stadv": "stadv",
    "fgsm": "fgsm",
    "pgd": "pgd",
}
REPORT_NAME = "report.txt"
# largest float32 below 1: keeps stored subpixel flows strictly inside (-1, 1)
_F32_BELOW_ONE = float(np.nextafter(np.float32(1), np.float32(0)))


def _fmt(value: float) -> str:
    return f"{value:.6g}"


def _default_jobs() -> int:
    env = os.environ.get("CHROMAFLOW_JOBS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            logger.warning("ignoring non-integer CHROMAFLOW_JOBS=%r", env)
    return os.cpu_count() or 1


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def _load_many(paths, limit=None):
    data = []
    for p in paths:
        data.extend(load_any(p))
    return data[:limit] if limit is not None else data


# -------------------------------------------------------------------------- train


def cmd_train(args) -> int:
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        adversarial=args.adv,
        epsilon=args.eps,
        pgd_steps=args.pgd_steps,
        flip=not args.no_flip,
        seed=args.seed,
    )
    train_x, train_y = stack(_load_many(args.data, args.train_limit))
    test = stack(_load_many(args.test, args.test_limit)) if args.test else None

    def show(rec):
        test_acc = _fmt(rec["test_acc"]) if "test_acc" in rec else "nan"
        print(f"epoch {rec['epoch']} train_acc {_fmt(rec['train_acc'])} test_acc {test_acc}", flush=True)

    result = train(train_x, train_y, cfg, test=test, on_epoch=show)
    save_weights(result.weights, args.out)
    logger.info("wrote %s", args.out)
    return 0


# ------------------------------------------------------------------------- attack

_worker_weights = None


def _init_worker(weights):
    global _worker_weights
    _worker_weights = weights


def _run_chunk(chunk, cfg):
    return attack_batch(chunk, _worker_weights, cfg)


def run_attacks(items, weights, cfg: AttackConfig, batch_size: int, jobs: int) -> list[AttackResult]:
    """Attack ``items`` in fixed-size chunks, optionally on a process pool.

    Chunking depends only on ``batch_size``, so results do not depend on ``jobs``.
    """
    chunks = [items[i : i + batch_size] for i in range(0, len(items), batch_size)]
    if jobs <= 1 or len(chunks) <= 1:
        out = []
        for n, chunk in enumerate(chunks, 1):
            out.extend(attack_batch(chunk, weights, cfg))
            logger.info("chunk %d/%d done", n, len(chunks))
        return out
    with ProcessPoolExecutor(max_workers=min(jobs, len(chunks)), initializer=_init_worker, initargs=(weights,)) as pool:
        parts = list(pool.map(_run_chunk, chunks, [cfg] * len(chunks)))
    return [r for part in parts for r in part]


def _write_artifacts(out: Path, results: list[AttackResult], subpixel: bool) -> None:
    for r in results:
        d = out / r.id
        d.mkdir(parents=True, exist_ok=True)
        write_image(r.image, d / "adv.ppm")
        if r.flow is not None:
            arr = r.flow.to_array()
            if subpixel:
                arr = np.clip(arr, -_F32_BELOW_ONE, _F32_BELOW_ONE)
            save_flow(FlowField.from_array(arr), d / "flow.cflw")


def cmd_attack(args) -> int:
    cfg = AttackConfig(
        mode=MODE_NAMES[args.mode],
        targeted=args.targeted,
        target_class=args.target_class,
        iterations=args.iters,
        learning_rate=args.lr,
        margin=args.margin,
        epsilon=args.eps,
        pgd_steps=args.pgd_steps,
        pgd_step_size=args.pgd_step_size,
        tv_weight=args.tv_weight,
        gamut=args.gamut,
        seed=args.seed,
    )
    weights = load_weights(args.weights)
    data = load_any(args.data, args.manifest)
    kept, excluded = filter_colorful(data, args.colorfulness_threshold)
    if args.only_correct and kept:
        x, y = stack(kept)
        hits = predict(weights, x) == y
        kept = [item for item, ok in zip(kept, hits) if ok]
    if args.limit is not None:
        kept = kept[: args.limit]
    if not kept:
        print("error: no images left to attack after filtering", file=sys.stderr)
        return 1
    logger.info("attacking %d images (%d excluded by colorfulness)", len(kept), len(excluded))

    results = run_attacks(kept, weights, cfg, args.batch_size, args.jobs)
    defense = grayscale_defense_eval(weights, results, kept)
    config = {
        "command": "attack",
        "weights": str(args.weights),
        "data": str(args.data),
        "manifest": None if args.manifest is None else str(args.manifest),
        "colorfulness_threshold": args.colorfulness_threshold,
        "only_correct": args.only_correct,
        "limit": args.limit,
        "batch_size": args.batch_size,
        "mode": cfg.mode,
        "targeted": cfg.targeted,
        "target_class": cfg.target_class,
        "iterations": cfg.iterations,
        "learning_rate": cfg.lr_for(kept[0].image.shape[0]),
        "margin": cfg.margin,
        "epsilon": cfg.epsilon,
        "pgd_steps": cfg.pgd_steps,
        "pgd_step_size": cfg.step_size,
        "tv_weight": cfg.tv_weight,
        "gamut": cfg.gamut,
        "init_noise": cfg.init_noise,
        "seed": cfg.seed,
    }
    report = build_report(config, results, len(kept), len(excluded), defense)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        _write_artifacts(out, results, cfg.mode == "chroma_subpixel")
        (out / REPORT_NAME).write_text(dumps_report(report))
    except OSError as exc:
        print(f"error: cannot write to {out}: {exc}", file=sys.stderr)
        return 1
    correct_only = report.fooling_rate_correct_only
    print(
        f"attacked {len(results)} excluded {len(excluded)} "
        f"fooling_rate_all {report.fooling_rate_all:.4f} "
        f"fooling_rate_correct_only {'nan' if correct_only is None else f'{correct_only:.4f}'}"
    )
    return 0


# --------------------------------------------------------------------------- eval


def _load_adv_dir(path: Path, data, weights) -> tuple[list[AttackResult], list]:
    if not path.is_dir():
        raise ChromaflowError(f"{path} is not a directory")
    by_id = {d.id: d for d in data}
    found = sorted(p.parent.name for p in path.glob("*/adv.ppm"))
    if not found:
        raise ChromaflowError(f"no <id>/adv.ppm artifacts under {path}")
    unknown = [i for i in found if i not in by_id]
    if unknown:
        raise ChromaflowError(f"adversarial ids not present in data: {unknown[:5]}")
    matched = [by_id[i] for i in found]
    adv = np.stack([read_image(path / i / "adv.ppm") for i in found])
    clean = predict(weights, stack(matched)[0])
    pred = predict(weights, adv)
    results = [
        AttackResult(
            id=item.id,
            image=adv[k],
            success=bool(pred[k] != item.label),
            predicted=int(pred[k]),
            true_label=item.label,
            clean_prediction=int(clean[k]),
        )
        for k, item in enumerate(matched)
    ]
    return results, matched


def cmd_eval(args) -> int:
    weights = load_weights(args.weights)
    data = load_any(args.data, args.manifest)
    if args.adv_dir is not None:
        results, matched = _load_adv_dir(Path(args.adv_dir), data, weights)
        defense = grayscale_defense_eval(weights, results, matched)
        print(f"images {len(results)}")
        for key, value in defense.items():
            print(f"{key} {value:.4f}")
        return 0
    color_acc = accuracy(weights, data)
    if args.grayscale:
        print(f"accuracy {accuracy(weights, data, grayscale=True):.4f}")
        print(f"color_accuracy {color_acc:.4f}")
    else:
        print(f"accuracy {color_acc:.4f}")
    return 0


# ------------------------------------------------------------------------ inspect


def _describe(arr: np.ndarray) -> list[str]:
    return [f"min {_fmt(arr.min())}", f"max {_fmt(arr.max())}", f"mean {_fmt(arr.mean())}"]


def cmd_inspect(args) -> int:
    lines: list[str] = []
    if args.flow:
        flow = load_flow(args.flow)
        h, w = flow.shape
        mag = flow.magnitude()
        lines += ["kind flow", f"height {h}", f"width {w}"] + _describe(flow.to_array())
        lines += [f"mean_magnitude {_fmt(mag.mean())}", f"max_magnitude {_fmt(mag.max())}"]
    elif args.weights:
        weights = load_weights(args.weights)
        total = sum(t.size for t in weights.tensors.values())
        lines += ["kind weights", f"tensors {len(weights.tensors)}", f"parameters {total}"]
        for name, t in weights.tensors.items():
            shape = "x".join(map(str, t.shape))
            lines.append(f"tensor {name} {shape} min {_fmt(t.min())} max {_fmt(t.max())} mean {_fmt(t.mean())}")
    else:
        img = read_image(args.image)
        h, w, _ = img.shape
        lines += ["kind image", f"height {h}", f"width {w}"] + _describe(img)
        lines.append(f"colorfulness {_fmt(colorfulness(img))}")
    print("\n".join(lines))
    return 0


# ------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chromaflow", description="Chroma-shift adversarial attacks on a small CNN.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{train,attack,eval,inspect}")

    p = sub.add_parser("train", help="train the classifier on CIFAR-10 binary batches")
    p.add_argument("--data", nargs="+", required=True, help="training batch files or PPM directories")
    p.add_argument("--test", nargs="*", default=[], help="held-out batches for per-epoch test accuracy")
    p.add_argument("--train-limit", type=_positive_int, help="use only the first N training images")
    p.add_argument("--test-limit", type=_positive_int, help="use only the first N test images")
    p.add_argument("--out", required=True, help="output CWGT weights file")
    p.add_argument("--epochs", type=_nonneg_int, default=20, help="default: 20")
    p.add_argument("--lr", type=float, default=0.01, help="initial SGD learning rate (default: 0.01)")
    p.add_argument("--momentum", type=float, default=0.9, help="default: 0.9")
    p.add_argument("--weight-decay", type=float, default=5e-4, help="default: 5e-4")
    p.add_argument("--batch-size", type=_positive_int, default=64, help="default: 64")
    p.add_argument("--adv", choices=("none", "fgsm", "pgd"), default="none", help="adversarial training mode")
    p.add_argument("--eps", type=float, default=8 / 255, help="adversarial training budget (default: 8/255)")
    p.add_argument("--pgd-steps", type=_positive_int, default=7, help="PGD steps for --adv pgd (default: 7)")
    p.add_argument("--no-flip", action="store_true", help="disable random horizontal flips")
    p.add_argument("--seed", type=int, default=0, help="default: 0")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="attack colorful images and write artifacts plus a report")
    p.add_argument("--weights", required=True, help="CWGT weights file")
    p.add_argument("--data", required=True, help="CIFAR-10 batch file or PPM directory")
    p.add_argument("--manifest", help="manifest CSV for a PPM directory (default: <data>/manifest.csv)")
    p.add_argument("--mode", choices=tuple(MODE_NAMES), default="subpixel", help="default: subpixel")
    p.add_argument("--targeted", action="store_true", help="targeted attack (targets from manifest, else next class)")
    p.add_argument("--target-class", type=int, choices=range(10), metavar="{0..9}", help="fixed target class")
    p.add_argument("--iters", type=_nonneg_int, default=1000, help="optimizer iterations (default: 1000)")
    p.add_argument("--lr", type=float, help="Adam step size (default: 0.005 for height <= 64, else 0.01)")
    p.add_argument("--margin", type=float, default=0.0, help="logit margin kappa (default: 0)")
    p.add_argument("--colorfulness-threshold", type=float, default=15.0, help="default: 15")
    p.add_argument("--gamut", choices=("clamp", "project"), default="clamp", help="default: clamp")
    p.add_argument("--eps", type=float, default=8 / 255, help="FGSM/PGD budget (default: 8/255)")
    p.add_argument("--pgd-steps", type=_positive_int, default=20, help="default: 20")
    p.add_argument("--pgd-step-size", type=float, help="PGD step (default: 2.5 * eps / steps)")
    p.add_argument("--tv-weight", type=float, default=0.05, help="stAdv smoothness weight (default: 0.05)")
    p.add_argument("--only-correct", action="store_true", help="attack only initially correctly classified images")
    p.add_argument("--limit", type=_positive_int, help="attack at most N images after filtering")
    p.add_argument("--batch-size", type=_positive_int, default=100, help="images per attack chunk (default: 100)")
    p.add_argument("--jobs", type=_positive_int, default=None, help="worker processes (default: CHROMAFLOW_JOBS or CPU count)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="default: 0")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="clean, grayscale and defense accuracy")
    p.add_argument("--weights", required=True, help="CWGT weights file")
    p.add_argument("--data", required=True, help="CIFAR-10 batch file or PPM directory")
    p.add_argument("--manifest", help="manifest CSV for a PPM directory")
    p.add_argument("--grayscale", action="store_true", help="report accuracy on grayscale inputs")
    p.add_argument("--adv-dir", help="attack output directory; prints the grayscale defense block")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="summarize a flow, weights or image file")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--flow", help="CFLW flow file")
    group.add_argument("--weights", help="CWGT weights file")
    group.add_argument("--image", help="PPM image")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "jobs", 0) is None:
        args.jobs = _default_jobs()
    try:
        return args.func(args)
    except (ChromaflowError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
