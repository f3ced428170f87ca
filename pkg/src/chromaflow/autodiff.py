"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers its
inputs and a closure mapping the upstream gradient to input gradients.  The
graph is rebuilt on every forward pass; :func:`backward` walks it once in
reverse topological order.

Subgradient conventions: ``relu'(0) = 0``, ``clamp01'`` is 0 at and outside the
interval ends, max-style reductions route the gradient to the first maximal
element in row-major order.
"""
from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import AccumulationError, ShapeError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

# Set to False to skip the per-op NaN/Inf scan (measurably faster on big batches).
CHECK_FINITE = True

_kink_log: contextvars.ContextVar[list | None] = contextvars.ContextVar("kink_log", default=None)


@contextlib.contextmanager
def record_kinks():
    """Collect the branch pattern (relu signs, argmax cells, ...) of every op.

    Two forward passes whose logs compare equal under :func:`same_kinks` went
    through the same linear pieces of every non-smooth op.
    """
    log: list = []
    token = _kink_log.set(log)
    try:
        yield log
    finally:
        _kink_log.reset(token)


def note_kink(pattern: np.ndarray) -> None:
    log = _kink_log.get()
    if log is not None:
        log.append(np.array(pattern, copy=True))


def same_kinks(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self):
        return mean(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None and np.ndim(x) == 0:
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


def make(data: np.ndarray, parents: Iterable[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap an op result; records the node only when some input needs a gradient."""
    parents = tuple(parents)
    if CHECK_FINITE and not np.isfinite(data).all():
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def topological_order(out: Tensor) -> list[Tensor]:
    """Nodes reachable from ``out`` that need gradients, inputs before consumers."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    for node in order:
        if node.is_leaf and node.grad is not None:
            raise AccumulationError("leaf already holds a gradient; call zero_grad() first")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = np.asarray(g, dtype=node.dtype).reshape(node.shape)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        b = as_tensor(b, like=a)
    elif isinstance(b, Tensor):
        a = as_tensor(a, like=b)
    else:
        a, b = Tensor(a), Tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    note_kink(mask)
    return make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def clamp01(x: Tensor) -> Tensor:
    inside = (x.data > 0) & (x.data < 1)
    note_kink(np.sign(x.data - 0.0) + np.sign(x.data - 1.0))
    return make(np.clip(x.data, 0, 1), (x,), lambda g: (g * inside,), "clamp01")


def square(x: Tensor) -> Tensor:
    return make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return make(y, (x,), lambda g: (g * 0.5 / y,), "sqrt")


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch by name; binary ops take ``b``."""
    binary = {"add": add, "sub": sub, "mul": mul}
    unary = {"tanh": tanh, "relu": relu, "clamp01": clamp01, "square": square, "sqrt": sqrt}
    if op in binary:
        if b is None:
            raise ShapeError(f"{op} needs two operands")
        return binary[op](a, b)
    if op in unary:
        return unary[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# ------------------------------------------------------------------ structure


def astype(x: Tensor, dtype) -> Tensor:
    dtype = np.dtype(dtype)
    if x.dtype == dtype:
        return x
    src = x.dtype
    return make(x.data.astype(dtype), (x,), lambda g: (g.astype(src),), "astype")


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return make(y, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make(y, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, index) -> Tensor:
    y = x.data[index]
    basic = _is_basic_index(index)

    def grad(g):
        out = np.zeros_like(x.data)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return make(np.array(y, copy=True), (x,), grad, "getitem")


def tensor_sum(x: Tensor, axis=None) -> Tensor:
    y = np.asarray(x.data.sum(axis=axis))

    def grad(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return make(y, (x,), grad, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size
    return make(
        np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),), "mean"
    )


def max_reduce(x: Tensor, axis: int = -1) -> Tensor:
    """Maximum along ``axis``; ties send the gradient to the first maximal entry."""
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    note_kink(idx)
    y = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def grad(g):
        out = np.zeros_like(x.data)
        np.put_along_axis(out, idx, np.expand_dims(g, axis), axis=axis)
        return (out,)

    return make(y, (x,), grad, "max")


# ------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs [M,K]x[K,N], got {a.shape} x {b.shape}")
    return make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape [K] or [N, K]."""
    single = x.ndim == 1
    xd = x.data[None] if single else x.data
    if xd.ndim != 2 or weight.ndim != 2 or xd.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense input {x.shape} does not match weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense bias {bias.shape} does not match weight {weight.shape}")
    y = xd @ weight.data.T + bias.data

    def grad(g):
        g2 = g[None] if single else g
        gx = g2 @ weight.data
        gw = g2.T @ xd if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return (gx[0] if single else gx, gw, gb)

    return make(y[0] if single else y, (x, weight, bias), grad, "dense")


def conv2d(
    x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0, channels_last: bool = False
) -> Tensor:
    """Zero-padded cross-correlation.

    ``x`` is [C,H,W] or batched [N,C,H,W]; with ``channels_last`` it is
    [H,W,C] / [N,H,W,C] and so is the output.  Kernels are always [F,C,k,k].
    """
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d input {x.shape} / kernels {kernels.shape}")
    if not channels_last:
        xd = xd.transpose(0, 2, 3, 1)
    n, h, w, c = xd.shape
    f, kc, k, k2 = kernels.shape
    if kc != c or k != k2 or bias.shape != (f,):
        raise ShapeError(f"conv2d kernels {kernels.shape} / bias {bias.shape} vs input {x.shape}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if k > hp or k > wp or (hp - k) % stride or (wp - k) % stride:
        raise ShapeError(f"conv2d output size not integral for input {x.shape}, k={k}, stride={stride}")
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xd
    cols = np.empty((n, ho, wo, k, k, c), dtype=xd.dtype)
    for di in range(k):
        for dj in range(k):
            cols[:, :, :, di, dj, :] = xp[:, di : di + stride * ho : stride, dj : dj + stride * wo : stride, :]
    cols = cols.reshape(n * ho * wo, k * k * c)
    kmat = kernels.data.transpose(0, 2, 3, 1).reshape(f, k * k * c)
    y = (cols @ kmat.T + bias.data).reshape(n, ho, wo, f)
    if not channels_last:
        y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))

    def grad(g):
        gm = g[None] if single else g
        if not channels_last:
            gm = gm.transpose(0, 2, 3, 1)
        gm = gm.reshape(-1, f)
        gb = gm.sum(axis=0) if bias.requires_grad else None
        gk = None
        if kernels.requires_grad:
            gk = (gm.T @ cols).reshape(f, k, k, c).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            dcols = (gm @ kmat).reshape(n, ho, wo, k, k, c)
            dxp = np.zeros((n, hp, wp, c), dtype=dcols.dtype)
            for di in range(k):
                for dj in range(k):
                    dxp[:, di : di + stride * ho : stride, dj : dj + stride * wo : stride, :] += dcols[
                        :, :, :, di, dj, :
                    ]
            gx = dxp[:, padding : padding + h, padding : padding + w, :]
            if not channels_last:
                gx = gx.transpose(0, 3, 1, 2)
            gx = gx[0] if single else gx
        return (gx, gk, gb)

    return make(y[0] if single else y, (x, kernels, bias), grad, "conv2d")


def maxpool2(x: Tensor, channels_last: bool = False) -> Tensor:
    """2x2 non-overlapping max pool over the spatial axes.

    Layout is [C,H,W] / [N,C,H,W], or [H,W,C] / [N,H,W,C] with ``channels_last``.
    Ties go to the first cell of the window in row-major order.
    """
    if x.ndim not in (3, 4):
        raise ShapeError(f"maxpool2 needs a 3-d or 4-d input, got {x.shape}")
    xd = x.data[None] if x.ndim == 3 else x.data
    if not channels_last:
        xd = xd.transpose(0, 2, 3, 1)
    n, h, w, c = xd.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even height and width, got {h}x{w}")
    blocks = xd.reshape(n, h // 2, 2, w // 2, 2, c)
    cells = [blocks[:, :, a, :, b, :] for a in (0, 1) for b in (0, 1)]
    best = np.maximum(np.maximum(cells[0], cells[1]), np.maximum(cells[2], cells[3]))

    def first_argmax():
        idx = np.full(best.shape, 3, dtype=np.int8)
        for k in (2, 1, 0):
            idx[cells[k] == best] = k
        return idx

    if _kink_log.get() is not None:
        note_kink(first_argmax())
    y = best
    if not channels_last:
        y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
    y = y[0] if x.ndim == 3 else y

    def grad(g):
        gd = g[None] if x.ndim == 3 else g
        if not channels_last:
            gd = gd.transpose(0, 2, 3, 1)
        idx = first_argmax()
        gb = np.zeros((n, h // 2, 2, w // 2, 2, c), dtype=gd.dtype)
        for k in range(4):
            gb[:, :, k // 2, :, k % 2, :] = np.where(idx == k, gd, 0)
        gx = gb.reshape(n, h, w, c)
        if not channels_last:
            gx = gx.transpose(0, 3, 1, 2)
        return (gx.reshape(x.shape),)

    return make(y, (x,), grad, "maxpool2")


def softmax_cross_entropy(logits: Tensor, label, reduction: str = "mean") -> Tensor:
    """Cross-entropy of ``logits`` ([C] or [N,C]) against integer labels.

    The max logit is subtracted before exponentiation and its own term is kept
    out of the ``log1p`` sum, so tiny losses keep full relative precision.
    """
    single = logits.ndim == 1
    z = logits.data[None] if single else logits.data
    if z.ndim != 2:
        raise ShapeError(f"logits must be [C] or [N,C], got {logits.shape}")
    labels = np.atleast_1d(np.asarray(label))
    if not np.issubdtype(labels.dtype, np.integer):
        raise IndexError(f"labels must be integers, got {labels.dtype}")
    if labels.shape != (z.shape[0],):
        raise ShapeError(f"{labels.shape[0]} labels for {z.shape[0]} logit rows")
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise IndexError(f"label out of range [0, {z.shape[1]})")
    top = np.argmax(z, axis=1)
    shifted = z - z[np.arange(len(z)), top][:, None]
    e = np.exp(shifted)
    others = e.copy()
    others[np.arange(len(z)), top] = 0
    lse = np.log1p(others.sum(axis=1))
    per_row = lse - shifted[np.arange(len(z)), labels]
    probs = e / e.sum(axis=1, keepdims=True)
    scale = 1.0 / len(z) if reduction == "mean" else 1.0
    loss = per_row.mean() if reduction == "mean" else per_row.sum()

    def grad(g):
        d = probs.copy()
        d[np.arange(len(z)), labels] -= 1.0
        d *= g * scale
        return (d[0] if single else d,)

    return make(np.asarray(loss, dtype=z.dtype), (logits,), grad, "softmax_cross_entropy")
