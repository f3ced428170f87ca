"""CIFAR-10 binary batches, PPM (P6) image directories and the colorfulness filter."""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .color import colorfulness
from .errors import DataError, FormatError, IoError

CIFAR_RECORD = 1 + 3 * 32 * 32
NUM_CLASSES = 10


@dataclass
class LabeledImage:
    image: np.ndarray  # H x W x 3 in [0, 1]
    label: int
    id: str
    target: int | None = None


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def load_cifar10_bin(path) -> list[LabeledImage]:
    """Records of 1 label byte + 3072 pixel bytes (planar R, G, B; 32x32 row-major)."""
    raw = _read(path)
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise FormatError(f"{path}: length {len(raw)} is not a positive multiple of {CIFAR_RECORD}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(int)
    if labels.max() >= NUM_CLASSES:
        bad = int(np.argmax(labels >= NUM_CLASSES))
        raise FormatError(f"{path}: record {bad} has label byte {labels[bad]}")
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1) / 255.0
    stem = Path(path).stem
    return [LabeledImage(pixels[i], int(labels[i]), f"{stem}_{i:05d}") for i in range(len(records))]


def save_cifar10_bin(data: Sequence[LabeledImage], path) -> None:
    """Inverse of :func:`load_cifar10_bin`; pixels are rounded to bytes."""
    out = bytearray()
    for item in data:
        planes = np.rint(np.clip(item.image, 0, 1) * 255).astype(np.uint8).transpose(2, 0, 1)
        out.append(item.label)
        out += planes.tobytes()
    try:
        Path(path).write_bytes(bytes(out))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def decode_ppm(raw: bytes, name: str = "<ppm>") -> np.ndarray:
    """Binary PPM with maxval 255 -> H x W x 3 float array in [0, 1]."""
    if raw[:2] != b"P6" or not raw[2:3].isspace():
        raise FormatError(f"{name}: not a binary PPM (P6) file")
    pos = 2
    fields = []
    for _ in range(3):
        m = _TOKEN.match(raw, pos)
        if m is None or not m.group(1).isdigit():
            raise FormatError(f"{name}: malformed header")
        fields.append(int(m.group(1)))
        pos = m.end()
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"{name}: maxval {maxval} unsupported (only 255)")
    if width < 1 or height < 1:
        raise FormatError(f"{name}: empty image {width}x{height}")
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise FormatError(f"{name}: header must end with a single whitespace byte")
    payload = raw[pos + 1 :]
    if len(payload) != width * height * 3:
        raise FormatError(f"{name}: expected {width * height * 3} pixel bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3) / 255.0


def encode_ppm(img: np.ndarray) -> bytes:
    pixels = np.rint(np.clip(np.asarray(img, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
    h, w = pixels.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def read_image(path) -> np.ndarray:
    return decode_ppm(_read(path), str(path))


def write_image(img: np.ndarray, path) -> None:
    """Write a P6 PPM, each value rounded from ``v * 255`` to the nearest integer."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got {img.shape}")
    try:
        Path(path).write_bytes(encode_ppm(img))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_manifest(path) -> list[tuple[str, int, int | None]]:
    """Rows of ``filename,true_label[,target_label]`` after a header row."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoError(f"cannot read manifest {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: empty manifest")
    out = []
    for n, row in enumerate(rows[1:], start=2):
        if not row or not "".join(row).strip():
            continue
        try:
            name, label = row[0].strip(), int(row[1])
            target = int(row[2]) if len(row) > 2 and row[2].strip() else None
        except (IndexError, ValueError) as exc:
            raise DataError(f"{path}:{n}: bad manifest row {row!r}") from exc
        if not 0 <= label < NUM_CLASSES or (target is not None and not 0 <= target < NUM_CLASSES):
            raise DataError(f"{path}:{n}: label out of range")
        out.append((name, label, target))
    return out


def load_image_dir(path, manifest=None) -> list[LabeledImage]:
    """Decode every ``*.ppm`` in ``path``; labels come from the manifest CSV
    (default ``<path>/manifest.csv``), in manifest order."""
    root = Path(path)
    if not root.is_dir():
        raise IoError(f"{root} is not a directory")
    rows = read_manifest(manifest if manifest is not None else root / "manifest.csv")
    files = {p.name for p in root.iterdir() if p.suffix.lower() == ".ppm"}
    listed = {name for name, _, _ in rows}
    if files - listed:
        raise DataError(f"images not in manifest: {sorted(files - listed)}")
    if listed - files:
        raise DataError(f"manifest lists missing files: {sorted(listed - files)}")
    if len(listed) != len(rows):
        raise DataError("manifest lists a file more than once")
    return [LabeledImage(read_image(root / name), label, name, target) for name, label, target in rows]


def load_any(path, manifest=None) -> list[LabeledImage]:
    """A directory of PPMs or a CIFAR-10 binary batch, by path type."""
    return load_image_dir(path, manifest) if Path(path).is_dir() else load_cifar10_bin(path)


def filter_colorful(data: Sequence[LabeledImage], threshold: float = 15.0):
    """Split into ``(kept, excluded)`` by ``colorfulness >= threshold``, order preserved."""
    kept, excluded = [], []
    for item in data:
        (kept if colorfulness(item.image) >= threshold else excluded).append(item)
    return kept, excluded


def stack(data: Sequence[LabeledImage]) -> tuple[np.ndarray, np.ndarray]:
    if not data:
        return np.zeros((0, 32, 32, 3)), np.zeros(0, dtype=np.int64)
    return np.stack([d.image for d in data]), np.array([d.label for d in data], dtype=np.int64)
