"""Flow fields and differentiable bilinear resampling.

Output pixel (i, j) samples the source at (i + di, j + dj).  The source
location is clamped to the image (replicate-edge) and the four integer
neighbours are blended with weights ``(1 - |i' - y|)(1 - |j' - x|)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import FormatError, IoError, ShapeError
from .gradcheck import GradCheck, check_gradient

FLOW_MAGIC = b"CFLW"


@dataclass
class FlowField:
    di: np.ndarray
    dj: np.ndarray

    def __post_init__(self):
        if np.shape(self.di) != np.shape(self.dj):
            raise ShapeError(f"flow components differ in shape: {np.shape(self.di)} vs {np.shape(self.dj)}")

    @classmethod
    def zeros(cls, h: int, w: int) -> FlowField:
        return cls(np.zeros((h, w)), np.zeros((h, w)))

    @classmethod
    def from_array(cls, arr: np.ndarray) -> FlowField:
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[-1] != 2:
            raise ShapeError(f"flow array must be HxWx2, got {arr.shape}")
        return cls(arr[..., 0], arr[..., 1])

    def to_array(self) -> np.ndarray:
        return np.stack([self.di, self.dj], axis=-1)

    @property
    def shape(self) -> tuple[int, int]:
        return np.shape(self.di)

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.di, self.dj)


def _flow_tensor(flow) -> ad.Tensor:
    if isinstance(flow, ad.Tensor):
        return flow
    if isinstance(flow, FlowField):
        return ad.Tensor(flow.to_array())
    return ad.Tensor(np.asarray(flow, dtype=np.float64))


def warp(planes: ad.Tensor, flow: ad.Tensor) -> ad.Tensor:
    """Differentiable core: planes [..., P, H, W], flow [..., H, W, 2] with matching lead dims."""
    if planes.ndim < 2 or flow.ndim < 3 or flow.shape[-1] != 2:
        raise ShapeError(f"cannot warp planes {planes.shape} with flow {flow.shape}")
    squeeze_p = planes.ndim == flow.ndim - 1
    p4 = planes.data[..., None, :, :] if squeeze_p else planes.data
    if p4.shape[:-3] != flow.shape[:-3] or p4.shape[-2:] != flow.shape[-3:-1]:
        raise ShapeError(f"planes {planes.shape} do not match flow {flow.shape}")
    lead = p4.shape[:-3]
    n_planes, h, w = p4.shape[-3:]
    pf = p4.reshape(-1, n_planes, h * w)
    ff = flow.data.reshape(-1, h, w, 2)
    batch = len(pf)

    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    yr = ii + ff[..., 0]
    xr = jj + ff[..., 1]
    y = np.clip(yr, 0, h - 1)
    x = np.clip(xr, 0, w - 1)
    y_free = (yr > 0) & (yr < h - 1)
    x_free = (xr > 0) & (xr < w - 1)
    i0 = np.floor(y).astype(np.intp)
    j0 = np.floor(x).astype(np.intp)
    ad.note_kink(np.stack([i0, j0, y_free, x_free]))
    fy = y - i0
    fx = x - j0
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)

    corners = [(i0, j0), (i0, j1), (i1, j0), (i1, j1)]
    flat_idx = [(a * w + b).reshape(batch, 1, h * w) for a, b in corners]
    vals = [np.take_along_axis(pf, np.broadcast_to(k, (batch, n_planes, h * w)), axis=2) for k in flat_idx]
    wy = [1.0 - fy, fy]
    wx = [1.0 - fx, fx]
    weights = [(wy[0] * wx[0]), (wy[0] * wx[1]), (wy[1] * wx[0]), (wy[1] * wx[1])]
    weights = [wt.reshape(batch, 1, h * w) for wt in weights]
    out = vals[0] * weights[0] + vals[1] * weights[1] + vals[2] * weights[2] + vals[3] * weights[3]
    out_shape = lead + ((h, w) if squeeze_p else (n_planes, h, w))

    def grad(g):
        gf = g.reshape(batch, n_planes, h * w)
        g_planes = None
        if planes.requires_grad:
            offsets = (np.arange(batch) * (n_planes * h * w))[:, None, None] + (np.arange(n_planes) * h * w)[
                None, :, None
            ]
            acc = np.zeros(batch * n_planes * h * w, dtype=gf.dtype)
            for k, wt in zip(flat_idx, weights):
                acc += np.bincount((k + offsets).reshape(-1), (gf * wt).reshape(-1), minlength=acc.size)
            g_planes = acc.reshape(planes.shape)
        g_flow = None
        if flow.requires_grad:
            wx0, wx1 = wx[0].reshape(batch, 1, -1), wx[1].reshape(batch, 1, -1)
            wy0, wy1 = wy[0].reshape(batch, 1, -1), wy[1].reshape(batch, 1, -1)
            d_y = (vals[2] - vals[0]) * wx0 + (vals[3] - vals[1]) * wx1
            d_x = (vals[1] - vals[0]) * wy0 + (vals[3] - vals[2]) * wy1
            gy = (gf * d_y).sum(axis=1).reshape(batch, h, w) * y_free
            gx = (gf * d_x).sum(axis=1).reshape(batch, h, w) * x_free
            g_flow = np.stack([gy, gx], axis=-1).reshape(flow.shape)
        return (g_planes, g_flow)

    return ad.make(out.reshape(out_shape), (planes, flow), grad, "warp")


def warp_bilinear(planes, flow):
    """Warp one plane [H,W] or several [P,H,W] with a single shared flow.

    Accepts numpy arrays, :class:`FlowField` or tensors; returns the same kind
    (numpy in, numpy out).
    """
    as_numpy = not isinstance(planes, ad.Tensor) and not isinstance(flow, ad.Tensor)
    if isinstance(planes, (list, tuple)):
        planes = np.stack([np.asarray(p, dtype=np.float64) for p in planes])
    pt = planes if isinstance(planes, ad.Tensor) else ad.Tensor(np.asarray(planes, dtype=np.float64))
    ft = _flow_tensor(flow)
    if pt.shape[-2:] != ft.shape[-3:-1]:
        raise ShapeError(f"planes {pt.shape} do not match flow {ft.shape}")
    out = warp(pt, ft)
    return out.data if as_numpy else out


def subpixel_flow(raw):
    """Flow bounded to (-1, 1) per component: ``tanh`` of the raw parameters."""
    if isinstance(raw, ad.Tensor):
        return ad.tanh(raw)
    return FlowField.from_array(np.tanh(np.asarray(raw, dtype=np.float64)))


def flow_gradient_check(flow: FlowField, plane: np.ndarray, step: float = 1e-3) -> GradCheck:
    """Autodiff vs central differences for ``d sum(warp(plane, flow)) / d flow``."""
    plane = np.asarray(plane, dtype=np.float64)
    const = ad.Tensor(plane)

    def fn(f):
        return ad.tensor_sum(warp(const, f))

    return check_gradient(fn, flow.to_array(), step=step)


def save_flow(flow: FlowField, path) -> None:
    """``CFLW`` record: magic, u32 H, u32 W, then row-major little-endian f32 (di, dj) pairs."""
    h, w = flow.shape
    payload = flow.to_array().astype("<f4").tobytes()
    try:
        Path(path).write_bytes(FLOW_MAGIC + struct.pack("<II", h, w) + payload)
    except OSError as exc:
        raise IoError(f"cannot write flow {path}: {exc}") from exc


def load_flow(path) -> FlowField:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read flow {path}: {exc}") from exc
    if raw[:4] != FLOW_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    h, w = struct.unpack("<II", raw[4:12])
    if len(raw) != 12 + 8 * h * w:
        raise FormatError(f"{path}: expected {12 + 8 * h * w} bytes, got {len(raw)}")
    arr = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float32)
    return FlowField.from_array(arr)
