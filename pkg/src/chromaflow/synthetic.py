"""Procedural 32x32 ten-class demo images (a stand-in when CIFAR-10 is absent).

Class = shape (5 kinds) x chroma scheme (2 kinds).  The two schemes use
foreground colours of matched luma, so shape is visible in grayscale but the
scheme is not: grayscale accuracy drops toward half, by construction.
"""
from __future__ import annotations

import numpy as np

from .color import RGB_TO_YUV
from .data import LabeledImage

SHAPES = ("disc", "square", "ring", "hstripes", "cross")


def _mask(shape: str, rng: np.random.Generator) -> np.ndarray:
    ii, jj = np.mgrid[0:32, 0:32].astype(np.float64)
    ci, cj = rng.uniform(12, 20, size=2)
    r = rng.uniform(7, 11)
    if shape == "disc":
        return (ii - ci) ** 2 + (jj - cj) ** 2 <= r * r
    if shape == "square":
        return (np.abs(ii - ci) <= r * 0.8) & (np.abs(jj - cj) <= r * 0.8)
    if shape == "ring":
        d = np.sqrt((ii - ci) ** 2 + (jj - cj) ** 2)
        return (d <= r) & (d >= r * 0.55)
    if shape == "hstripes":
        period = rng.integers(5, 8)
        return ((ii + rng.integers(0, period)) % period) < period / 2
    w = r * 0.35
    return ((np.abs(ii - ci) <= w) & (np.abs(jj - cj) <= r)) | ((np.abs(jj - cj) <= w) & (np.abs(ii - ci) <= r))


def _color_with_luma(luma: float, u: float, v: float) -> np.ndarray:
    rgb = np.linalg.solve(RGB_TO_YUV, np.array([luma, u, v]))
    return np.clip(rgb, 0, 1)


def make_image(label: int, rng: np.random.Generator) -> np.ndarray:
    shape = SHAPES[label % 5]
    warm = label < 5
    luma = rng.uniform(0.45, 0.6)
    sat = rng.uniform(0.12, 0.2)
    angle = rng.uniform(-0.5, 0.5) + (0.3 if warm else np.pi + 0.3)
    fg = _color_with_luma(luma, sat * np.cos(angle), sat * np.sin(angle))
    bg_luma = luma + rng.choice([-1, 1]) * rng.uniform(0.2, 0.3)
    bg_angle = rng.uniform(0, 2 * np.pi)
    bg = _color_with_luma(bg_luma, 0.06 * np.cos(bg_angle), 0.06 * np.sin(bg_angle))
    mask = _mask(shape, rng)[..., None]
    img = np.where(mask, fg, bg) + rng.normal(0, 0.03, size=(32, 32, 3))
    return np.clip(img, 0, 1)


def make_dataset(count: int, seed: int = 0, prefix: str = "synth") -> list[LabeledImage]:
    """Balanced classes, round-robin labels."""
    rng = np.random.default_rng(seed)
    return [LabeledImage(make_image(i % 10, rng), i % 10, f"{prefix}_{i:05d}") for i in range(count)]
