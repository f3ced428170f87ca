"""RGB/YUV conversion (BT.470 System M), grayscale, gamut handling, colorfulness.

Images are ``(..., 3)`` arrays in [0, 1].  Functions taking images accept
either numpy arrays or :class:`~chromaflow.autodiff.Tensor` and stay on the
graph in the latter case.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

RGB_TO_YUV = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.14713, -0.28886, 0.436],
        [0.615, -0.51499, -0.10001],
    ]
)
YUV_TO_RGB = np.linalg.inv(RGB_TO_YUV)

# Chroma of a neutral gray pixel (g, g, g) is (NEUTRAL_U * g, 0): the U row sums to 1e-5.
NEUTRAL_U = float(RGB_TO_YUV[1].sum())


@dataclass
class YuvImage:
    y: np.ndarray
    u: np.ndarray
    v: np.ndarray

    @classmethod
    def from_stack(cls, yuv: np.ndarray) -> YuvImage:
        return cls(yuv[..., 0], yuv[..., 1], yuv[..., 2])

    def stack(self) -> np.ndarray:
        return np.stack([self.y, self.u, self.v], axis=-1)

    @property
    def shape(self) -> tuple[int, ...]:
        return np.shape(self.y)


def _apply_matrix(img, matrix: np.ndarray):
    if isinstance(img, ad.Tensor):
        shape = img.shape
        flat = ad.reshape(img, (-1, 3))
        m = ad.Tensor(matrix.T.astype(img.dtype))
        return ad.reshape(ad.matmul(flat, m), shape)
    return np.asarray(img, dtype=np.float64) @ matrix.T


def rgb_to_yuv_stack(img):
    """Same as :func:`rgb_to_yuv` but keeps Y, U, V stacked on the last axis."""
    return _apply_matrix(img, RGB_TO_YUV)


def yuv_stack_to_rgb(yuv):
    return _apply_matrix(yuv, YUV_TO_RGB)


def rgb_to_yuv(img: np.ndarray) -> YuvImage:
    return YuvImage.from_stack(rgb_to_yuv_stack(img))


def yuv_to_rgb(img: YuvImage) -> np.ndarray:
    """Inverse transform; the result is not clamped."""
    return yuv_stack_to_rgb(img.stack())


def to_grayscale(img):
    """Luma replicated into all three channels, so classifier input shape is kept."""
    if isinstance(img, ad.Tensor):
        y = _apply_matrix(img, np.repeat(RGB_TO_YUV[:1], 3, axis=0))
        return y
    y = np.asarray(img, dtype=np.float64) @ RGB_TO_YUV[0]
    return np.repeat(y[..., None], 3, axis=-1)


GAMUT_TOL = 1e-12


def _chroma_scale(y: np.ndarray, offset: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Largest s in [0, 1] keeping ``y + s * offset`` inside [0, 1] per channel.

    Returns ``(s, active)`` where ``active`` is the binding channel or -1.
    """
    y = y[..., None]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ratio = np.where(offset > 0, (1.0 - y) / offset, np.where(offset < 0, -y / offset, np.inf))
    ratio = np.maximum(ratio, 0.0)
    active = np.argmin(ratio, axis=-1)
    s = np.take_along_axis(ratio, active[..., None], axis=-1)[..., 0]
    # pixels within rounding distance of the cube count as inside, so projecting twice is a no-op
    rgb = y + offset
    inside = ((rgb >= -GAMUT_TOL) & (rgb <= 1.0 + GAMUT_TOL)).all(axis=-1)
    active = np.where(inside, -1, active)
    return np.where(active >= 0, s, 1.0), active


def _gray_offset(yuv: np.ndarray) -> np.ndarray:
    """RGB displacement of each pixel from the gray pixel of the same luma."""
    chroma = np.stack([np.zeros_like(yuv[..., 0]), yuv[..., 1] - NEUTRAL_U * yuv[..., 0], yuv[..., 2]], -1)
    return chroma @ YUV_TO_RGB.T


def gamut_project(img: YuvImage) -> YuvImage:
    """Pull out-of-gamut chroma toward neutral until RGB fits in [0, 1].

    (U, V) is scaled about the gray point of the pixel's own luma by the largest
    factor that keeps every RGB channel in range, so Y is untouched.
    """
    yuv = img.stack().astype(np.float64)
    s, active = _chroma_scale(yuv[..., 0], _gray_offset(yuv))
    inside = active < 0
    nu = NEUTRAL_U * yuv[..., 0]
    u = np.where(inside, yuv[..., 1], nu + s * (yuv[..., 1] - nu))
    v = np.where(inside, yuv[..., 2], s * yuv[..., 2])
    return YuvImage(np.array(img.y, copy=True), u, v)


def gamut_project_rgb(y: np.ndarray, rgb: ad.Tensor) -> ad.Tensor:
    """Differentiable RGB-space form of :func:`gamut_project`.

    ``rgb`` is the unclamped inverse transform of a YUV image with luma ``y``.
    Output is ``y + s * (rgb - y)`` (clipped for rounding); the gradient includes the dependence of
    the scale on the binding channel.
    """
    offset = rgb.data - y[..., None]
    s, active = _chroma_scale(y, offset)
    ad.note_kink(active)
    # clip only removes rounding dust; the binding channel sits on the bound already
    out = np.clip(y[..., None] + s[..., None] * offset, 0.0, 1.0)
    binding = active >= 0
    safe = np.where(binding, active, 0)

    def grad(g):
        gw = g * s[..., None]
        w_b = np.take_along_axis(offset, safe[..., None], axis=-1)[..., 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            ds = np.where(binding, -s / w_b, 0.0)
        coupling = (g * offset).sum(axis=-1) * ds
        extra = np.zeros_like(offset)
        np.put_along_axis(extra, safe[..., None], coupling[..., None], axis=-1)
        return (gw + extra,)

    return ad.make(out.astype(rgb.dtype), (rgb,), grad, "gamut_project")


def colorfulness(img: np.ndarray) -> float:
    """Opponent-channel colorfulness on the 0-255 scale (whole-image statistics).

    ``rg = R - G``, ``yb = (R + G) / 2 - B``;
    ``M = sqrt(var_rg + var_yb) + 0.3 * sqrt(mean_rg^2 + mean_yb^2)``.
    """
    x = np.asarray(img, dtype=np.float64) * 255.0
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    rg = r - g
    yb = 0.5 * (r + g) - b
    spread = np.sqrt(rg.var() + yb.var())
    centre = np.sqrt(rg.mean() ** 2 + yb.mean() ** 2)
    return float(spread + 0.3 * centre)
