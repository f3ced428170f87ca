"""Desk-scale protocol: train on a CIFAR-10 subset, then compare attacks on one image set.

The stages are cached per process so several checks can share one trained model.
"""
from __future__ import annotations

import os
import time
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .attacks import AttackConfig
from .classifier import ClassifierWeights, TrainConfig, predict, train
from .data import LabeledImage, filter_colorful, load_cifar10_bin, stack
from .errors import DataError
from .evaluation import accuracy, fooling_rate, grayscale_defense_eval

CIFAR_ENV = "CHROMAFLOW_CIFAR_DIR"
TRAIN_FILES = tuple(f"data_batch_{k}.bin" for k in range(1, 6))
TEST_FILE = "test_batch.bin"


@dataclass(frozen=True)
class DeskConfig:
    data_dir: str
    train_count: int = 10000
    test_count: int = 2000
    attack_count: int = 100
    epochs: int = 20
    iterations: int = 1000
    attack_lr: float = 0.005
    epsilon: float = 8 / 255
    colorfulness_threshold: float = 15.0
    batch_size: int = 100
    jobs: int = 1
    seed: int = 0


def default_data_dir() -> str | None:
    return os.environ.get(CIFAR_ENV)


def load_subsets(cfg: DeskConfig) -> tuple[list[LabeledImage], list[LabeledImage]]:
    root = Path(cfg.data_dir)
    train_paths = [root / name for name in TRAIN_FILES if (root / name).is_file()]
    if not train_paths or not (root / TEST_FILE).is_file():
        raise DataError(
            f"CIFAR-10 binary batches not found in {root} "
            f"(need {TRAIN_FILES[0]} and {TEST_FILE}; set {CIFAR_ENV})"
        )
    train_items: list[LabeledImage] = []
    for path in train_paths:
        train_items.extend(load_cifar10_bin(path))
        if len(train_items) >= cfg.train_count:
            break
    test_items = load_cifar10_bin(root / TEST_FILE)[: cfg.test_count]
    return train_items[: cfg.train_count], test_items


@dataclass
class TrainedModel:
    weights: ClassifierWeights
    history: list
    seconds: float
    test_accuracy: float


@lru_cache(maxsize=None)
def _subsets(cfg: DeskConfig):
    return load_subsets(cfg)


@lru_cache(maxsize=None)
def trained_model(cfg: DeskConfig, adversarial: str = "none") -> TrainedModel:
    train_items, test_items = _subsets(cfg)
    x, y = stack(train_items)
    tx, ty = stack(test_items)
    tcfg = TrainConfig(epochs=cfg.epochs, adversarial=adversarial, epsilon=cfg.epsilon, seed=cfg.seed)
    start = time.perf_counter()
    result = train(x, y, tcfg, test=(tx, ty))
    seconds = time.perf_counter() - start
    return TrainedModel(result.weights, result.history, seconds, float((predict(result.weights, tx) == ty).mean()))


@lru_cache(maxsize=None)
def attack_set(cfg: DeskConfig, adversarial: str = "none") -> tuple[LabeledImage, ...]:
    """First ``attack_count`` colorful test images the model classifies correctly."""
    model = trained_model(cfg, adversarial)
    kept, _ = filter_colorful(_subsets(cfg)[1], cfg.colorfulness_threshold)
    if not kept:
        return ()
    x, y = stack(kept)
    hits = predict(model.weights, x) == y
    return tuple(item for item, ok in zip(kept, hits) if ok)[: cfg.attack_count]


@dataclass
class AttackOutcome:
    mode: str
    rate_all: float
    rate_correct_only: float
    count: int
    seconds: float
    results: list


@lru_cache(maxsize=None)
def attack_outcome(cfg: DeskConfig, mode: str, adversarial: str = "none", gamut: str = "clamp") -> AttackOutcome:
    from .cli import run_attacks

    items = list(attack_set(cfg, adversarial))
    if not items:
        raise DataError("no colorful, correctly classified test images to attack")
    weights = trained_model(cfg, adversarial).weights
    acfg = AttackConfig(
        mode=mode,
        iterations=cfg.iterations,
        learning_rate=cfg.attack_lr,
        epsilon=cfg.epsilon,
        pgd_steps=20,
        gamut=gamut,
        seed=cfg.seed,
    )
    start = time.perf_counter()
    results = run_attacks(items, weights, acfg, cfg.batch_size, cfg.jobs)
    seconds = time.perf_counter() - start
    return AttackOutcome(
        mode, fooling_rate(results, "all"), fooling_rate(results, "correct_only"), len(results), seconds, results
    )


def grayscale_summary(cfg: DeskConfig) -> dict:
    model = trained_model(cfg)
    test = _subsets(cfg)[1]
    out = {
        "color_accuracy": accuracy(model.weights, test),
        "grayscale_accuracy": accuracy(model.weights, test, grayscale=True),
    }
    projected = attack_outcome(cfg, "chroma_unrestricted", gamut="project")
    block = grayscale_defense_eval(model.weights, projected.results, list(attack_set(cfg)))
    out["restored_to_clean"] = block["restored_to_clean"]
    out["defense_success"] = block["defense_success"]
    return out


def run_all(cfg: DeskConfig) -> dict:
    """Every desk-scale measurement, as a flat JSON-friendly dict."""
    summary: dict = {"config": asdict(cfg)}
    for adv in ("none", "fgsm"):
        m = trained_model(cfg, adv)
        summary[f"model_{adv}"] = {"test_accuracy": m.test_accuracy, "train_seconds": m.seconds,
                                   "attack_set": len(attack_set(cfg, adv))}
    for mode in ("chroma_unrestricted", "chroma_subpixel", "stadv", "fgsm", "pgd"):
        o = attack_outcome(cfg, mode)
        summary[f"attack_{mode}"] = {"rate": o.rate_correct_only, "seconds": o.seconds, "count": o.count}
    for mode in ("fgsm", "chroma_unrestricted"):
        o = attack_outcome(cfg, mode, "fgsm")
        summary[f"robust_attack_{mode}"] = {"rate": o.rate_correct_only, "seconds": o.seconds, "count": o.count}
    summary["grayscale"] = grayscale_summary(cfg)
    return summary

