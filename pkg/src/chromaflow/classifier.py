"""Small 3-block CNN for 32x32 RGB inputs, its training loop and weight files."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError, FormatError, IoError, ShapeError

logger = logging.getLogger(__name__)

INPUT_SIZE = 32
NUM_CLASSES = 10
WEIGHT_MAGIC = b"CWGT"
WEIGHT_VERSION = 1

LAYOUT: dict[str, tuple[int, ...]] = {
    "conv1.weight": (32, 3, 3, 3),
    "conv1.bias": (32,),
    "conv2.weight": (64, 32, 3, 3),
    "conv2.bias": (64,),
    "conv3.weight": (128, 64, 3, 3),
    "conv3.bias": (128,),
    "fc.weight": (NUM_CLASSES, 2048),
    "fc.bias": (NUM_CLASSES,),
}


@dataclass
class ClassifierWeights:
    tensors: dict[str, np.ndarray]
    input_size: int = INPUT_SIZE
    num_classes: int = NUM_CLASSES
    normalization: str = "none"

    def __post_init__(self):
        for name, shape in LAYOUT.items():
            if name not in self.tensors:
                raise ShapeError(f"missing weight tensor {name}")
            if self.tensors[name].shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {self.tensors[name].shape}")
            if not np.isfinite(self.tensors[name]).all():
                raise ValueError(f"{name} has non-finite entries")

    @classmethod
    def initialize(cls, seed: int = 0, dtype=np.float32) -> ClassifierWeights:
        """He-normal kernels, zero biases."""
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in LAYOUT.items():
            if name.endswith("bias"):
                tensors[name] = np.zeros(shape, dtype=dtype)
            else:
                fan_in = int(np.prod(shape[1:]))
                tensors[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        return cls(tensors)

    @property
    def dtype(self):
        return self.tensors["fc.weight"].dtype

    def astype(self, dtype) -> ClassifierWeights:
        return ClassifierWeights({k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> ClassifierWeights:
        return ClassifierWeights({k: v.copy() for k, v in self.tensors.items()})

    def equals(self, other: ClassifierWeights) -> bool:
        return all(
            self.tensors[k].dtype == other.tensors[k].dtype and np.array_equal(self.tensors[k], other.tensors[k])
            for k in LAYOUT
        )


def forward(weights: ClassifierWeights, img, params: dict[str, ad.Tensor] | None = None) -> ad.Tensor:
    """Logits for one image [32,32,3] (-> [10]) or a batch [N,32,32,3] (-> [N,10]).

    ``params`` overrides the weight tensors, e.g. with leaves that require grad.
    """
    x = img if isinstance(img, ad.Tensor) else ad.Tensor(np.asarray(img))
    size = weights.input_size
    if x.ndim not in (3, 4) or x.shape[-3:] != (size, size, 3):
        raise ShapeError(f"classifier expects [{size},{size},3] images, got {x.shape}")
    p = params or {k: ad.Tensor(v) for k, v in weights.tensors.items()}
    x = ad.astype(x, weights.dtype)
    batched = x.ndim == 4
    for block in ("conv1", "conv2", "conv3"):
        x = ad.conv2d(x, p[f"{block}.weight"], p[f"{block}.bias"], stride=1, padding=1, channels_last=True)
        x = ad.maxpool2(ad.relu(x), channels_last=True)
    # flatten in channel-major (C, H, W) order
    x = ad.transpose(x, (0, 3, 1, 2) if batched else (2, 0, 1))
    x = ad.reshape(x, (x.shape[0], -1) if batched else (-1,))
    return ad.dense(x, p["fc.weight"], p["fc.bias"])


def predict(weights: ClassifierWeights, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim == 3:
        return predict(weights, images[None], batch_size)[0]
    out = [
        np.argmax(forward(weights, images[i : i + batch_size]).data, axis=1)
        for i in range(0, len(images), batch_size)
    ]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.intp)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    adversarial: str = "none"
    epsilon: float = 8 / 255
    pgd_steps: int = 7
    flip: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.adversarial not in ("none", "fgsm", "pgd"):
            raise ConfigError(f"unknown adversarial mode {self.adversarial!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.pgd_steps < 1:
            raise ConfigError("pgd_steps must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class TrainResult:
    weights: ClassifierWeights
    history: list[dict] = field(default_factory=list)


def _loss_and_grads(weights: ClassifierWeights, x: np.ndarray, y: np.ndarray):
    params = {k: ad.Tensor(v, requires_grad=True) for k, v in weights.tensors.items()}
    logits = forward(weights, x, params)
    loss = ad.softmax_cross_entropy(logits, y)
    ad.backward(loss)
    correct = int((np.argmax(logits.data, axis=1) == y).sum())
    return loss.item(), correct, {k: t.grad for k, t in params.items()}


def train(
    images: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    test: tuple[np.ndarray, np.ndarray] | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Mini-batch SGD with momentum on softmax cross-entropy.

    In ``fgsm`` / ``pgd`` mode each batch is swapped for its adversarial
    counterpart (budget ``cfg.epsilon``) against the current weights before
    the update.  Learning rate follows a cosine decay over all steps.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise DataError("training set is empty")
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    if labels.min() < 0 or labels.max() >= NUM_CLASSES:
        raise DataError("labels must lie in [0, 10)")

    rng = np.random.default_rng(cfg.seed)
    weights = ClassifierWeights.initialize(int(rng.integers(2**31)))
    velocity = {k: np.zeros_like(v) for k, v in weights.tensors.items()}
    steps_per_epoch = -(-len(images) // cfg.batch_size)
    total_steps = max(cfg.epochs * steps_per_epoch, 1)
    history: list[dict] = []
    step = 0

    if cfg.adversarial != "none":
        from .attacks import fgsm_perturb, pgd_perturb

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(images))
        seen = correct = 0
        loss_sum = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x = images[idx]
            y = labels[idx]
            if cfg.flip:
                flip = rng.random(len(idx)) < 0.5
                x = np.where(flip[:, None, None, None], x[:, :, ::-1, :], x)
            if cfg.adversarial == "fgsm":
                x = fgsm_perturb(weights, x, y, cfg.epsilon).astype(np.float32)
            elif cfg.adversarial == "pgd":
                alpha = 2.5 * cfg.epsilon / cfg.pgd_steps
                x = pgd_perturb(weights, x, y, cfg.epsilon, alpha, cfg.pgd_steps, rng).astype(np.float32)
            loss, hits, grads = _loss_and_grads(weights, x, y)
            lr = cfg.learning_rate * 0.5 * (1.0 + np.cos(np.pi * step / total_steps))
            for k, w in weights.tensors.items():
                g = grads[k] + cfg.weight_decay * w
                velocity[k] = cfg.momentum * velocity[k] + g
                w -= (lr * velocity[k]).astype(w.dtype)
            step += 1
            seen += len(idx)
            correct += hits
            loss_sum += loss * len(idx)
        record = {"epoch": epoch, "train_loss": loss_sum / seen, "train_acc": correct / seen}
        if test is not None and len(test[0]):
            record["test_acc"] = float((predict(weights, test[0]) == np.asarray(test[1])).mean())
        logger.info("epoch %d %s", epoch, record)
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return TrainResult(weights, history)


def dataset_loss(weights: ClassifierWeights, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    total = 0.0
    for i in range(0, len(images), batch_size):
        logits = forward(weights, images[i : i + batch_size])
        total += ad.softmax_cross_entropy(logits, np.asarray(labels[i : i + batch_size]), "sum").item()
    return total / len(images)


def save_weights(weights: ClassifierWeights, path) -> None:
    """``CWGT`` v1: magic, u32 version, u32 count, then per tensor
    u32 name length, UTF-8 name, u32 rank, u32 dims, little-endian f32 data."""
    parts = [WEIGHT_MAGIC, struct.pack("<II", WEIGHT_VERSION, len(weights.tensors))]
    for name, arr in weights.tensors.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)) + encoded)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    try:
        Path(path).write_bytes(b"".join(parts))
    except OSError as exc:
        raise IoError(f"cannot write weights {path}: {exc}") from exc


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated at byte {self.pos}")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_weights(path) -> ClassifierWeights:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read weights {path}: {exc}") from exc
    r = _Reader(raw, path)
    if r.take(4) != WEIGHT_MAGIC:
        raise FormatError(f"{path}: bad magic")
    version = r.u32()
    if version != WEIGHT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(dims)) if dims else 1
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - r.pos} trailing bytes")
    try:
        return ClassifierWeights(tensors)
    except (ShapeError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
