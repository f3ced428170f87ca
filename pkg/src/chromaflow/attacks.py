"""Chroma-shift flow attack plus stAdv, FGSM and PGD baselines.

All attacks run batched: one graph holds every image of a chunk, losses are
summed, and because images never interact the per-image gradients (and the
elementwise Adam updates) are the same as for separate runs.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .classifier import ClassifierWeights, forward, predict
from .color import gamut_project_rgb, rgb_to_yuv_stack, yuv_stack_to_rgb
from .data import LabeledImage
from .errors import ConfigError, ShapeError
from .evaluation import distortion_stats
from .warp import FlowField, warp

MODES = ("chroma_unrestricted", "chroma_subpixel", "stadv", "fgsm", "pgd")
FLOW_MODES = ("chroma_unrestricted", "chroma_subpixel", "stadv")
GAMUT_MODES = ("clamp", "project")

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
TV_EPS = 1e-10


@dataclass
class AttackConfig:
    mode: str = "chroma_subpixel"
    targeted: bool = False
    target_class: int | None = None
    iterations: int = 1000
    learning_rate: float | None = None  # None: 0.005 up to 64 px tall, else 0.01
    margin: float = 0.0
    epsilon: float = 8 / 255
    pgd_steps: int = 20
    pgd_step_size: float | None = None  # None: 2.5 * epsilon / pgd_steps
    pgd_random_start: bool = True
    tv_weight: float = 0.05
    gamut: str = "clamp"
    init_noise: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown attack mode {self.mode!r}; expected one of {MODES}")
        if self.gamut not in GAMUT_MODES:
            raise ConfigError(f"unknown gamut mode {self.gamut!r}")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.pgd_steps < 1:
            raise ConfigError("pgd_steps must be >= 1")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError("epsilon must lie in [0, 1]")
        if self.margin < 0 or self.tv_weight < 0 or self.init_noise < 0:
            raise ConfigError("margin, tv_weight and init_noise must be non-negative")

    def lr_for(self, height: int) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return 0.005 if height <= 64 else 0.01

    @property
    def step_size(self) -> float:
        return self.pgd_step_size if self.pgd_step_size is not None else 2.5 * self.epsilon / self.pgd_steps


@dataclass
class AttackResult:
    id: str
    image: np.ndarray
    success: bool
    predicted: int
    true_label: int
    clean_prediction: int
    target_class: int | None = None
    first_fool_iteration: int | None = None
    flow: FlowField | None = None
    stats: dict = field(default_factory=dict)

    @property
    def initially_correct(self) -> bool:
        return self.clean_prediction == self.true_label


# --------------------------------------------------------------- differentiable parts


def apply_chroma_flow(img, raw_flow, subpixel: bool = False, gamut: str = "clamp"):
    """Warp only the U and V planes of ``img`` by a shared flow and rebuild RGB.

    ``img`` is [H,W,3] or [N,H,W,3]; ``raw_flow`` matches with a trailing 2.
    The original Y plane is reused unchanged.  Returns a tensor when
    ``raw_flow`` is one (differentiable w.r.t. the flow), else a numpy array.
    """
    img = np.asarray(img, dtype=np.float64)
    as_numpy = not isinstance(raw_flow, ad.Tensor)
    flow = raw_flow if not as_numpy else ad.Tensor(np.asarray(raw_flow, dtype=np.float64))
    if flow.shape != img.shape[:-1] + (2,):
        raise ShapeError(f"flow {flow.shape} does not match image {img.shape}")
    if gamut not in GAMUT_MODES:
        raise ConfigError(f"unknown gamut mode {gamut!r}")
    yuv = rgb_to_yuv_stack(img)
    luma = yuv[..., 0]
    chroma = ad.Tensor(np.moveaxis(yuv[..., 1:], -1, -3))
    if subpixel:
        flow = ad.tanh(flow)
    shifted = warp(chroma, flow)
    planes = ad.concat([ad.Tensor(luma[..., None, :, :]), shifted], axis=-3)
    lead = tuple(range(planes.ndim - 3))
    nd = planes.ndim
    yuv_adv = ad.transpose(planes, lead + (nd - 2, nd - 1, nd - 3))
    rgb = yuv_stack_to_rgb(yuv_adv)
    out = gamut_project_rgb(luma, rgb) if gamut == "project" else ad.clamp01(rgb)
    return out.data if as_numpy else out


def _class_gather(logits: ad.Tensor, classes: np.ndarray) -> tuple[ad.Tensor, ad.Tensor]:
    """``(z[c], max_{i != c} z[i])`` per row."""
    n, k = logits.shape
    rows = np.arange(n)
    picked = ad.getitem(logits, (rows, classes))
    others = np.array([[i for i in range(k) if i != c] for c in classes])
    rest = ad.max_reduce(ad.getitem(logits, (rows[:, None], others)), axis=-1)
    return picked, rest


def adversarial_loss(logits: ad.Tensor, true_label, targeted: bool = False, target_class=None, kappa: float = 0.0):
    """Margin loss, summed over a batch.

    untargeted: ``max(z_true - max_{i != true} z_i, -kappa)``
    targeted:   ``max(max_{i != t} z_i - z_t, -kappa)``
    """
    z = logits if logits.ndim == 2 else ad.reshape(logits, (1, -1))
    if targeted:
        if target_class is None:
            raise ConfigError("targeted loss needs a target class")
        picked, rest = _class_gather(z, np.atleast_1d(np.asarray(target_class, dtype=np.intp)))
        margin = ad.sub(rest, picked)
    else:
        picked, rest = _class_gather(z, np.atleast_1d(np.asarray(true_label, dtype=np.intp)))
        margin = ad.sub(picked, rest)
    clipped = ad.sub(ad.relu(ad.add(margin, kappa)), kappa)
    return ad.tensor_sum(clipped)


def total_variation(flow: ad.Tensor) -> ad.Tensor:
    """Sum over pixels p and 4-neighbours q of ``sqrt(|f_p - f_q|^2 + 1e-10)``.

    Every unordered neighbour pair appears twice in that sum.
    """
    nd = flow.ndim
    terms = []
    for axis in (nd - 3, nd - 2):
        size = flow.shape[axis]
        if size < 2:
            continue
        head = [slice(None)] * nd
        tail = [slice(None)] * nd
        head[axis] = slice(1, None)
        tail[axis] = slice(0, size - 1)
        diff = ad.sub(ad.getitem(flow, tuple(head)), ad.getitem(flow, tuple(tail)))
        sq = ad.tensor_sum(ad.square(diff), axis=-1)
        terms.append(ad.tensor_sum(ad.sqrt(ad.add(sq, TV_EPS))))
    if not terms:
        return ad.Tensor(0.0)
    total = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
    return ad.mul(total, 2.0)


def _stadv_image(img: np.ndarray, flow: ad.Tensor) -> ad.Tensor:
    planes = ad.Tensor(np.moveaxis(img, -1, -3))
    warped = warp(planes, flow)
    nd = warped.ndim
    lead = tuple(range(nd - 3))
    return ad.transpose(warped, lead + (nd - 2, nd - 1, nd - 3))


# ----------------------------------------------------------------------- helpers


def image_seed(seed: int, image_id: str) -> np.random.Generator:
    """Per-image generator, independent of batch composition."""
    return np.random.default_rng([seed, zlib.crc32(image_id.encode("utf-8"))])


def resolve_target(item: LabeledImage, cfg: AttackConfig) -> int | None:
    if not cfg.targeted:
        return None
    if item.target is not None:
        target = item.target
    elif cfg.target_class is not None:
        target = cfg.target_class
    else:
        target = (item.label + 1) % 10
    if target == item.label:
        raise ConfigError(f"{item.id}: target class equals the true label {item.label}")
    return int(target)


def _goal(pred: np.ndarray, labels: np.ndarray, targets: np.ndarray | None) -> np.ndarray:
    return pred == targets if targets is not None else pred != labels


def _input_gradient(weights, x: np.ndarray, classes: np.ndarray) -> np.ndarray:
    leaf = ad.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    loss = ad.softmax_cross_entropy(forward(weights, leaf), classes, reduction="sum")
    ad.backward(loss)
    return leaf.grad


def fgsm_perturb(weights, x, labels, epsilon: float, targets=None) -> np.ndarray:
    """One signed-gradient step of size ``epsilon`` on the cross-entropy, clamped to [0, 1].

    With ``targets`` the step descends the loss toward the target classes.
    """
    x = np.asarray(x, dtype=np.float64)
    if targets is None:
        step = epsilon * np.sign(_input_gradient(weights, x, np.asarray(labels)))
    else:
        step = -epsilon * np.sign(_input_gradient(weights, x, np.asarray(targets)))
    return np.clip(x + step, 0.0, 1.0)


def pgd_perturb(weights, x, labels, epsilon, step_size, steps, rng=None, targets=None, on_step=None, start=None):
    """``steps`` signed-gradient steps, each projected on the L-inf ball and [0, 1].

    The walk starts at ``x + start`` if an offset is given, at a uniform random
    point of the ball if ``rng`` is given, else at ``x``.
    """
    x0 = np.asarray(x, dtype=np.float64)
    adv = x0.copy()
    if start is None and rng is not None:
        start = rng.uniform(-epsilon, epsilon, size=adv.shape)
    if start is not None:
        adv = np.clip(adv + start, 0.0, 1.0)
    lo, hi = x0 - epsilon, x0 + epsilon
    for s in range(steps):
        if targets is None:
            adv = adv + step_size * np.sign(_input_gradient(weights, adv, np.asarray(labels)))
        else:
            adv = adv - step_size * np.sign(_input_gradient(weights, adv, np.asarray(targets)))
        adv = np.clip(np.clip(adv, lo, hi), 0.0, 1.0)
        if on_step is not None:
            on_step(s + 1, adv)
    return adv


def _adam_step(param, grad, m, v, t, lr):
    b1, b2 = ADAM_BETAS
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * grad * grad
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    param -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


# ------------------------------------------------------------------------ attacks


def _flow_attack(items: Sequence[LabeledImage], weights: ClassifierWeights, cfg: AttackConfig):
    images = np.stack([np.asarray(it.image, dtype=np.float64) for it in items])
    labels = np.array([it.label for it in items])
    targets = np.array([resolve_target(it, cfg) for it in items]) if cfg.targeted else None
    n, h, w, _ = images.shape
    raw = np.stack([image_seed(cfg.seed, it.id).uniform(-cfg.init_noise, cfg.init_noise, (h, w, 2)) for it in items])
    m = np.zeros_like(raw)
    v = np.zeros_like(raw)
    lr = cfg.lr_for(h)
    subpixel = cfg.mode == "chroma_subpixel"

    best_img = np.empty_like(images)
    best_flow = np.empty_like(raw)
    first = np.full(n, -1)
    clean_pred = predict(weights, images)

    for t in range(cfg.iterations + 1):
        leaf = ad.Tensor(raw.copy(), requires_grad=t < cfg.iterations)
        if cfg.mode == "stadv":
            flow = leaf
            adv = _stadv_image(images, flow)
        else:
            flow = ad.tanh(leaf) if subpixel else leaf
            adv = apply_chroma_flow(images, flow, subpixel=False, gamut=cfg.gamut)
        logits = forward(weights, adv)
        hit = _goal(np.argmax(logits.data, axis=1), labels, targets)
        best_img[hit] = adv.data[hit]
        best_flow[hit] = flow.data[hit]
        first[hit & (first < 0)] = t
        if t == cfg.iterations:
            never = first < 0
            best_img[never] = adv.data[never]
            best_flow[never] = flow.data[never]
            break
        loss = adversarial_loss(logits, labels, cfg.targeted, targets, cfg.margin)
        if cfg.mode == "stadv" and cfg.tv_weight > 0:
            loss = ad.add(loss, ad.mul(total_variation(flow), cfg.tv_weight))
        ad.backward(loss)
        _adam_step(raw, leaf.grad, m, v, t + 1, lr)

    best_img = np.clip(best_img, 0.0, 1.0)
    return _finish(items, weights, images, best_img, clean_pred, labels, targets, first, best_flow)


def _finish(items, weights, images, adv, clean_pred, labels, targets, first, flows=None):
    final_pred = predict(weights, adv)
    ok = _goal(final_pred, labels, targets)
    results = []
    for i, it in enumerate(items):
        flow = FlowField.from_array(flows[i]) if flows is not None else None
        stats = distortion_stats(images[i], adv[i])
        if flow is not None:
            mag = flow.magnitude()
            stats["flow_mean_magnitude"] = math.fsum(mag.ravel().tolist()) / mag.size
            stats["flow_max_magnitude"] = float(mag.max())
        results.append(
            AttackResult(
                id=it.id,
                image=adv[i],
                success=bool(ok[i]),
                predicted=int(final_pred[i]),
                true_label=int(labels[i]),
                clean_prediction=int(clean_pred[i]),
                target_class=None if targets is None else int(targets[i]),
                first_fool_iteration=int(first[i]) if ok[i] and first[i] >= 0 else None,
                flow=flow,
                stats=stats,
            )
        )
    return results


def _pixel_attack(items: Sequence[LabeledImage], weights: ClassifierWeights, cfg: AttackConfig):
    images = np.stack([np.asarray(it.image, dtype=np.float64) for it in items])
    labels = np.array([it.label for it in items])
    targets = np.array([resolve_target(it, cfg) for it in items]) if cfg.targeted else None
    clean_pred = predict(weights, images)
    first = np.where(_goal(clean_pred, labels, targets), 0, -1)
    if cfg.mode == "fgsm":
        adv = fgsm_perturb(weights, images, labels, cfg.epsilon, targets)
        first[(first < 0) & _goal(predict(weights, adv), labels, targets)] = 1
    else:
        # one generator per image keeps random starts independent of batching
        start = np.stack(
            [image_seed(cfg.seed, it.id).uniform(-cfg.epsilon, cfg.epsilon, images.shape[1:]) for it in items]
        )

        def track(step, x):
            first[(first < 0) & _goal(predict(weights, x), labels, targets)] = step

        adv = pgd_perturb(
            weights, images, labels, cfg.epsilon, cfg.step_size, cfg.pgd_steps,
            targets=targets, on_step=track, start=start if cfg.pgd_random_start else None,
        )
    return _finish(items, weights, images, adv, clean_pred, labels, targets, first)


def attack_batch(items: Sequence[LabeledImage], weights: ClassifierWeights, cfg: AttackConfig) -> list[AttackResult]:
    """Attack every item with ``cfg.mode``; results follow input order."""
    if not items:
        return []
    shapes = {np.shape(it.image) for it in items}
    if len(shapes) != 1:
        raise ShapeError(f"a batch needs equally sized images, got {sorted(shapes)}")
    if cfg.mode in FLOW_MODES:
        return _flow_attack(items, weights, cfg)
    return _pixel_attack(items, weights, cfg)


def _single(item, weights, cfg, allowed):
    if cfg.mode not in allowed:
        raise ConfigError(f"mode {cfg.mode!r} not handled here (expected {allowed})")
    return attack_batch([item], weights, cfg)[0]


def chroma_shift_attack(item: LabeledImage, weights: ClassifierWeights, cfg: AttackConfig) -> AttackResult:
    """Adam on a U/V flow field for ``cfg.iterations`` steps, no early stop.

    The returned image is the last iterate that met the attack goal, else the
    final iterate with ``success=False``.
    """
    return _single(item, weights, cfg, ("chroma_unrestricted", "chroma_subpixel"))


def stadv_attack(item: LabeledImage, weights: ClassifierWeights, cfg: AttackConfig) -> AttackResult:
    return _single(item, weights, cfg, ("stadv",))


def fgsm_attack(item: LabeledImage, weights: ClassifierWeights, cfg: AttackConfig) -> AttackResult:
    return _single(item, weights, cfg, ("fgsm",))


def pgd_attack(item: LabeledImage, weights: ClassifierWeights, cfg: AttackConfig) -> AttackResult:
    return _single(item, weights, cfg, ("pgd",))
