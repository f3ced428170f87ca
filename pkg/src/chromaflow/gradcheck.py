"""Central finite-difference checks for autodiff gradients.

Non-smooth ops log their branch pattern (see :func:`autodiff.record_kinks`).
A coordinate is excluded from comparison when the +h / -h evaluations do not
both stay on the branch of the base point, i.e. the probe straddles a kink.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad


def relative_error(a, b, floor: float = 1e-6) -> np.ndarray:
    """``|a - b| / max(|a|, |b|, floor)`` elementwise."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@dataclass
class GradCheck:
    indices: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    excluded: np.ndarray
    rel_err: np.ndarray = field(init=False)

    def __post_init__(self):
        self.rel_err = relative_error(self.analytic, self.numeric)

    @property
    def checked(self) -> int:
        return int((~self.excluded).sum())

    @property
    def max_rel_err(self) -> float:
        kept = self.rel_err[~self.excluded]
        return float(kept.max()) if kept.size else 0.0


def check_gradient(
    fn: Callable[[ad.Tensor], ad.Tensor],
    x: np.ndarray,
    step: float = 1e-3,
    indices=None,
) -> GradCheck:
    """Compare ``d fn / d x`` from :func:`autodiff.backward` with central differences.

    ``fn`` maps a leaf tensor to a scalar tensor.  ``indices`` selects flat
    coordinates of ``x`` to probe (all by default).
    """
    x = np.array(x, dtype=np.float64)
    leaf = ad.Tensor(x.copy(), requires_grad=True)
    with ad.record_kinks() as base_kinks:
        out = fn(leaf)
    ad.backward(out)
    analytic_full = leaf.grad.reshape(-1) if leaf.grad is not None else np.zeros(x.size)
    idx = np.arange(x.size) if indices is None else np.asarray(indices).reshape(-1)
    numeric = np.empty(len(idx))
    excluded = np.zeros(len(idx), dtype=bool)
    flat = x.reshape(-1)
    for n, i in enumerate(idx):
        values = []
        for sign in (1.0, -1.0):
            probe = flat.copy()
            probe[i] += sign * step
            with ad.record_kinks() as kinks:
                values.append(fn(ad.Tensor(probe.reshape(x.shape))).item())
            if not ad.same_kinks(kinks, base_kinks):
                excluded[n] = True
        numeric[n] = (values[0] - values[1]) / (2 * step)
    return GradCheck(idx, analytic_full[idx], numeric, excluded)
