"""Fine-tuning a pre-trained encoder and scoring it on target classification tasks."""
from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .matchnet import FitConfig, HeadConfig, MatchModel, as_pixels, fit


class FinetuneMode(str, enum.Enum):
    FIXED_ENCODER = "fixed"
    FULL = "full"


def _as_batch(images) -> np.ndarray:
    if isinstance(images, np.ndarray):
        return images.astype(np.float32, copy=False)
    return np.stack([as_pixels(img) for img in images]).astype(np.float32)


def finetune(pretrained: MatchModel, images, labels: Sequence[int], num_classes: int,
             mode: FinetuneMode | str = FinetuneMode.FIXED_ENCODER, config: FitConfig | None = None,
             head_seed: int | None = None) -> MatchModel:
    """Attach a fresh softmax head and train it (alone, or with the encoder)."""
    mode = FinetuneMode(mode)
    config = config or FitConfig(epochs=20, learning_rate=1e-3, batch_size=32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("labeled set is empty")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError("labels outside the target label space")
    model = pretrained.with_head(HeadConfig("classify", num_classes),
                                 seed=config.seed if head_seed is None else head_seed)
    before = model.encoder_hash()
    names = model.head_names() if mode is FinetuneMode.FIXED_ENCODER else list(model.params)
    fit(model, _as_batch(images), labels, config, param_names=names)
    if mode is FinetuneMode.FIXED_ENCODER and model.encoder_hash() != before:
        raise AssertionError("encoder parameters changed during fixed-encoder fine-tuning")
    return model


# ---------------------------------------------------------------------------
# Inference


def predict_single(model, img) -> int:
    """Most probable class for one image; ties go to the lowest index."""
    batch = _as_batch([img])
    return int(np.argmax(model.predict_proba(batch)[0]))


@dataclass
class TemporalGroup:
    area_id: str
    images: list
    label: int

    def __post_init__(self):
        if not self.images:
            raise ValueError("a temporal group needs at least one image")
        shapes = {np.shape(as_pixels(img)) for img in self.images}
        if len(shapes) != 1:
            raise ValueError("all images of a temporal group must share dimensions")


def temporal_scores(model, group: TemporalGroup) -> np.ndarray:
    return model.predict_proba(_as_batch(group.images)).mean(axis=0)


def predict_temporal(model, group: TemporalGroup) -> int:
    """Argmax of the per-image softmax vectors averaged over the group."""
    return int(np.argmax(temporal_scores(model, group)))


# ---------------------------------------------------------------------------
# Metrics


def topk_accuracy(scores, labels, k: int) -> float:
    """Fraction of samples whose label is among the top ``k`` scores.

    Classes are ranked by descending score with ties resolved toward the
    lower class index (stable sort).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or len(scores) != len(labels):
        raise ValueError("scores must be (n_samples, n_classes) and match labels in length")
    if not 1 <= k <= scores.shape[1]:
        raise ValueError(f"k must lie in [1, {scores.shape[1]}]")
    if len(labels) == 0:
        raise ValueError("no samples")
    true = scores[np.arange(len(labels)), labels][:, None]
    idx = np.arange(scores.shape[1])[None, :]
    rank = np.sum((scores > true) | ((scores == true) & (idx < labels[:, None])), axis=1)
    return float(np.mean(rank < k))


@dataclass
class ClassScore:
    label: int
    precision: float
    recall: float
    f1: float
    support: int
    predicted: int
    flagged: bool = False  # neither predicted nor present; scored 0 by convention


def f1_score(pred, true, num_classes: int | None = None) -> tuple[float, list[ClassScore]]:
    """Macro F1 and per-class scores.

    The label space is ``range(num_classes)`` when given, else every label
    seen in either input. Zero denominators give 0 precision/recall/F1.
    """
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if len(pred) != len(true):
        raise ValueError("prediction and truth lengths differ")
    if len(true) == 0:
        raise ValueError("empty input")
    classes = range(num_classes) if num_classes is not None else sorted(set(pred.tolist()) | set(true.tolist()))
    per_class = []
    for c in classes:
        tp = int(np.sum((pred == c) & (true == c)))
        n_pred = int(np.sum(pred == c))
        n_true = int(np.sum(true == c))
        precision = tp / n_pred if n_pred else 0.0
        recall = tp / n_true if n_true else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class.append(ClassScore(int(c), precision, recall, f1, n_true, n_pred, n_pred == 0 and n_true == 0))
    return float(np.mean([s.f1 for s in per_class])), per_class


def iou(pred_mask, true_mask) -> float:
    """Intersection over union of two binary masks; two empty masks score 1."""
    pred_mask = np.asarray(pred_mask).astype(bool)
    true_mask = np.asarray(true_mask).astype(bool)
    if pred_mask.shape != true_mask.shape:
        raise ValueError(f"mask shapes differ: {pred_mask.shape} vs {true_mask.shape}")
    union = int(np.sum(pred_mask | true_mask))
    if union == 0:
        return 1.0
    return int(np.sum(pred_mask & true_mask)) / union


@dataclass
class MetricReport:
    top1: float
    top5: float
    f1_macro: float
    per_class: list[ClassScore]
    n_samples: int
    mode: str
    iou: float | None = None
    meta: dict = field(default_factory=lambda: {"f1_average": "macro", "tie_break": "lowest index"})

    def to_json(self) -> dict:
        out = {
            "top1": round(self.top1, 10),
            "top5": round(self.top5, 10),
            "f1_macro": round(self.f1_macro, 10),
            "per_class": [
                {"label": s.label, "precision": round(s.precision, 10), "recall": round(s.recall, 10),
                 "f1": round(s.f1, 10), "support": s.support, "predicted": s.predicted, "flagged": s.flagged}
                for s in self.per_class
            ],
            "n_samples": self.n_samples,
            "mode": self.mode,
            "meta": self.meta,
        }
        if self.iou is not None:
            out["iou"] = self.iou
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def csv(self, names: Sequence[str] | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["label", "name", "precision", "recall", "f1", "support", "predicted"])
        for s in self.per_class:
            name = names[s.label] if names is not None and s.label < len(names) else str(s.label)
            writer.writerow([s.label, name, f"{s.precision:.6f}", f"{s.recall:.6f}", f"{s.f1:.6f}",
                             s.support, s.predicted])
        return buf.getvalue()


def report_from_scores(scores, labels, mode: str, num_classes: int | None = None) -> MetricReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = scores.shape[1]
    pred = scores.argmax(axis=1)
    f1, per_class = f1_score(pred, labels, num_classes if num_classes is not None else n_classes)
    top1 = topk_accuracy(scores, labels, 1)
    top5 = topk_accuracy(scores, labels, min(5, n_classes))
    return MetricReport(top1, top5, f1, per_class, len(labels), mode)


def evaluate(model, images=None, labels=None, groups: Sequence[TemporalGroup] | None = None,
             batch_size: int = 256) -> MetricReport:
    """Score single images (``images``/``labels``) or temporal groups.

    ``model`` needs only a ``predict_proba(batch) -> (n, classes)`` method.
    """
    if groups is not None:
        scores = np.stack([temporal_scores(model, g) for g in groups])
        return report_from_scores(scores, [g.label for g in groups], "temporal")
    batch = _as_batch(images)
    scores = np.concatenate([model.predict_proba(batch[i:i + batch_size])
                             for i in range(0, len(batch), batch_size)])
    return report_from_scores(scores, labels, "single")
