"""Fooling rates, distortion statistics, grayscale-defense evaluation and reports.

Report files use a small indentation-based text format (schema v1)::

    schema_version: 1
    config:
      mode: "chroma_subpixel"
    images:
      -
        id: "test_batch_00000"
        success: true

Keys keep insertion order, strings are always double-quoted, floats are
written with ``repr`` (lossless) except rate fields, which carry 4 decimals
and are rounded to 4 decimals when the report is built.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .color import rgb_to_yuv_stack, to_grayscale
from .errors import DataError, FormatError, IoError, ShapeError

if TYPE_CHECKING:
    from .attacks import AttackResult
    from .classifier import ClassifierWeights
    from .data import LabeledImage

SCHEMA_VERSION = 1
RATE_KEYS = frozenset(
    {
        "clean_accuracy",
        "fooling_rate_all",
        "fooling_rate_correct_only",
        "color_accuracy",
        "grayscale_accuracy",
        "adversarial_accuracy",
        "defense_success",
        "restored_to_clean",
        "agrees_with_color_prediction",
        "net_effect",
    }
)


def accuracy(weights: ClassifierWeights, data: Sequence[LabeledImage], grayscale: bool = False) -> float:
    from .classifier import predict

    if not data:
        raise DataError("accuracy of an empty dataset is undefined")
    images = np.stack([d.image for d in data])
    if grayscale:
        images = to_grayscale(images)
    labels = np.array([d.label for d in data])
    return float((predict(weights, images) == labels).mean())


def fooling_rate(results: Sequence[AttackResult], convention: str = "all", clean_predictions=None) -> float:
    """``all``: successes / attacked.  ``correct_only``: successes among images
    the model classified correctly before the attack."""
    if not results:
        raise DataError("no attack results")
    success = np.array([r.success for r in results])
    if convention == "all":
        return float(success.mean())
    if convention != "correct_only":
        raise ValueError(f"unknown convention {convention!r}")
    clean = (
        np.array([r.clean_prediction for r in results]) if clean_predictions is None else np.asarray(clean_predictions)
    )
    correct = clean == np.array([r.true_label for r in results])
    if not correct.any():
        raise DataError("no initially-correct images; correct_only rate is undefined")
    return float(success[correct].mean())


def _l2(d: np.ndarray) -> float:
    # fsum is exactly rounded, so the value does not depend on memory alignment
    return math.sqrt(math.fsum((d * d).ravel().tolist()))


def distortion_stats(original: np.ndarray, adversarial: np.ndarray) -> dict:
    """Per-plane L2 / L-inf differences in YUV, plus RGB, in double precision."""
    a = np.asarray(original, dtype=np.float64)
    b = np.asarray(adversarial, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    diff_yuv = rgb_to_yuv_stack(a) - rgb_to_yuv_stack(b)
    out = {}
    for k, name in enumerate("yuv"):
        d = diff_yuv[..., k]
        out[f"{name}_l2"] = _l2(d)
        out[f"{name}_linf"] = float(np.abs(d).max()) if d.size else 0.0
    d = a - b
    out["rgb_l2"] = _l2(d)
    out["rgb_linf"] = float(np.abs(d).max()) if d.size else 0.0
    return out


def grayscale_defense_eval(weights: ClassifierWeights, results: Sequence[AttackResult], data: Sequence[LabeledImage]):
    """Clean color vs grayscale accuracy and how grayscaling treats the adversarial images.

    ``defense_success`` is the share of adversarial images whose grayscale
    version is classified as the true label.  ``restored_to_clean`` is the
    share where the defended pipeline (grayscale, then classify) predicts the
    same class for the adversarial image as for its clean original;
    ``agrees_with_color_prediction`` compares against the undefended color
    prediction of the original instead.
    ``net_effect`` is the defense's accuracy gain on adversarial inputs minus
    its clean-accuracy loss.
    """
    from .classifier import predict

    if not results:
        raise DataError("no attack results to evaluate")
    by_id = {d.id: d for d in data}
    missing = [r.id for r in results if r.id not in by_id]
    if missing:
        raise DataError(f"results not aligned with data: {missing[:5]}")
    color_acc = accuracy(weights, data)
    gray_acc = accuracy(weights, data, grayscale=True)
    adv = np.stack([r.image for r in results])
    labels = np.array([r.true_label for r in results])
    clean = np.array([r.clean_prediction for r in results])
    originals = np.stack([np.asarray(by_id[r.id].image, dtype=np.float64) for r in results])
    gray_pred = predict(weights, to_grayscale(adv))
    gray_clean = predict(weights, to_grayscale(originals))
    adv_pred = predict(weights, adv)
    defense_success = float((gray_pred == labels).mean())
    adversarial_accuracy = float((adv_pred == labels).mean())
    return {
        "color_accuracy": color_acc,
        "grayscale_accuracy": gray_acc,
        "adversarial_accuracy": adversarial_accuracy,
        "defense_success": defense_success,
        "restored_to_clean": float((gray_pred == gray_clean).mean()),
        "agrees_with_color_prediction": float((gray_pred == clean).mean()),
        "net_effect": (defense_success - adversarial_accuracy) - (color_acc - gray_acc),
    }


def _summary(values: list[float]) -> dict:
    if not values:
        return {"count": 0}
    arr = np.asarray(values, dtype=np.float64)
    return {
        "count": len(values),
        "mean": math.fsum(values) / len(values),
        "p50": float(np.percentile(arr, 50)),
        "p95": float(np.percentile(arr, 95)),
        "max": float(arr.max()),
    }


def _round_rates(obj):
    if isinstance(obj, dict):
        return {k: (round(v, 4) if k in RATE_KEYS and isinstance(v, float) else _round_rates(v)) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_round_rates(v) for v in obj]
    return obj


@dataclass
class EvaluationReport:
    config: dict
    dataset: dict
    clean_accuracy: float | None
    fooling_rate_all: float
    fooling_rate_correct_only: float | None
    distortion: dict
    images: list[dict]
    defense: dict | None = None
    schema_version: int = SCHEMA_VERSION
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "schema_version": self.schema_version,
            "config": self.config,
            "dataset": self.dataset,
            "clean_accuracy": self.clean_accuracy,
            "fooling_rate_all": self.fooling_rate_all,
            "fooling_rate_correct_only": self.fooling_rate_correct_only,
            "distortion": self.distortion,
            "defense": self.defense,
            "images": self.images,
        }
        out.update(self.extra)
        return _round_rates(out)

    @classmethod
    def from_dict(cls, d: dict) -> EvaluationReport:
        known = {
            "schema_version",
            "config",
            "dataset",
            "clean_accuracy",
            "fooling_rate_all",
            "fooling_rate_correct_only",
            "distortion",
            "defense",
            "images",
        }
        return cls(
            config=d["config"],
            dataset=d["dataset"],
            clean_accuracy=d["clean_accuracy"],
            fooling_rate_all=d["fooling_rate_all"],
            fooling_rate_correct_only=d["fooling_rate_correct_only"],
            distortion=d["distortion"],
            images=d["images"],
            defense=d["defense"],
            schema_version=d["schema_version"],
            extra={k: v for k, v in d.items() if k not in known},
        )


def build_report(
    config: dict,
    results: Sequence[AttackResult],
    kept: int,
    excluded: int,
    defense: dict | None = None,
) -> EvaluationReport:
    if not results:
        raise DataError("no attack results")
    correct = [r for r in results if r.initially_correct]
    fooled = [r for r in results if r.success]
    stat_keys = list(results[0].stats)
    distortion = {"restricted_to": "fooled"}
    distortion.update({k: _summary([r.stats[k] for r in fooled]) for k in stat_keys})
    rows = []
    for r in results:
        rows.append(
            {
                "id": r.id,
                "true_label": r.true_label,
                "clean_prediction": r.clean_prediction,
                "target_class": r.target_class,
                "predicted": r.predicted,
                "success": r.success,
                "first_fool_iteration": r.first_fool_iteration,
                "stats": dict(r.stats),
            }
        )
    return EvaluationReport(
        config=dict(config),
        dataset={"kept": kept, "excluded": excluded, "attacked": len(results)},
        clean_accuracy=len(correct) / len(results),
        fooling_rate_all=fooling_rate(results, "all"),
        fooling_rate_correct_only=fooling_rate(results, "correct_only") if correct else None,
        distortion=distortion,
        images=rows,
        defense=defense,
    )


# ------------------------------------------------------------------ text format

_KEY = re.compile(r"^[A-Za-z0-9_.\-]+$")
_INT = re.compile(r"^-?\d+$")


def _scalar(key, value) -> str:
    if value is None:
        return "null"
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        if key in RATE_KEYS and np.isfinite(value):
            return f"{float(value):.4f}"
        return repr(float(value))
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    raise TypeError(f"cannot serialize {type(value).__name__} for key {key!r}")


def _emit(obj, indent: int, lines: list[str], key=None) -> None:
    pad = "  " * indent
    if isinstance(obj, dict):
        for k, v in obj.items():
            if not _KEY.match(str(k)):
                raise ValueError(f"invalid report key {k!r}")
            if isinstance(v, (dict, list)) and v:
                lines.append(f"{pad}{k}:")
                _emit(v, indent + 1, lines, k)
            elif isinstance(v, dict):
                lines.append(f"{pad}{k}: {{}}")
            elif isinstance(v, list):
                lines.append(f"{pad}{k}: []")
            else:
                lines.append(f"{pad}{k}: {_scalar(k, v)}")
    else:
        for v in obj:
            if isinstance(v, (dict, list)) and v:
                lines.append(f"{pad}-")
                _emit(v, indent + 1, lines, key)
            elif isinstance(v, dict):
                lines.append(f"{pad}- {{}}")
            elif isinstance(v, list):
                lines.append(f"{pad}- []")
            else:
                lines.append(f"{pad}- {_scalar(key, v)}")


def dumps_report(report: EvaluationReport | dict) -> str:
    d = report.to_dict() if isinstance(report, EvaluationReport) else report
    lines: list[str] = []
    _emit(d, 0, lines)
    return "\n".join(lines) + "\n"


def emit_report(report: EvaluationReport | dict, path) -> None:
    try:
        Path(path).write_text(dumps_report(report), encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write report {path}: {exc}") from exc


def _parse_scalar(text: str):
    if text == "null":
        return None
    if text in ("true", "false"):
        return text == "true"
    if text == "{}":
        return {}
    if text == "[]":
        return []
    if text.startswith('"'):
        return json.loads(text)
    if _INT.match(text):
        return int(text)
    try:
        return float(text)
    except ValueError:
        raise FormatError(f"unrecognised value {text!r}") from None


def _parse_block(lines: list[tuple[int, str]], pos: int, indent: int):
    if pos >= len(lines) or lines[pos][0] != indent:
        raise FormatError("empty nested block")
    is_list = lines[pos][1].startswith("-")
    out: dict | list = [] if is_list else {}
    while pos < len(lines) and lines[pos][0] == indent:
        text = lines[pos][1]
        if is_list:
            if not text.startswith("-"):
                raise FormatError(f"expected list item, got {text!r}")
            rest = text[1:].strip()
            if rest:
                out.append(_parse_scalar(rest))
                pos += 1
            else:
                value, pos = _parse_block(lines, pos + 1, indent + 1)
                out.append(value)
        else:
            key, sep, rest = text.partition(":")
            if not sep or not _KEY.match(key):
                raise FormatError(f"malformed line {text!r}")
            rest = rest.strip()
            if rest:
                out[key] = _parse_scalar(rest)
                pos += 1
            else:
                out[key], pos = _parse_block(lines, pos + 1, indent + 1)
    if pos < len(lines) and lines[pos][0] > indent:
        raise FormatError(f"unexpected indentation at {lines[pos][1]!r}")
    return out, pos


def parse_report(text: str) -> dict:
    lines = []
    # only "\n" separates lines; str.splitlines would also split on U+0085 etc. inside values
    for raw in text.split("\n"):
        raw = raw.rstrip("\r")
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        stripped = raw.lstrip(" ")
        width = len(raw) - len(stripped)
        if width % 2:
            raise FormatError(f"odd indentation in {raw!r}")
        lines.append((width // 2, stripped))
    if not lines:
        raise FormatError("empty report")
    d, pos = _parse_block(lines, 0, 0)
    if not isinstance(d, dict) or pos != len(lines):
        raise FormatError("report must be a single top-level mapping")
    if d.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"unsupported schema_version {d.get('schema_version')!r}")
    return d


def load_report(path) -> EvaluationReport:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read report {path}: {exc}") from exc
    return EvaluationReport.from_dict(parse_report(text))
