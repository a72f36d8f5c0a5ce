"""Intersection-over-union metrics for label maps and boxes.

Mask mIoU follows the usual segmentation convention: per-class IoU over
pixels, background (id 0) excluded, classes absent from both maps excluded,
arithmetic mean over the rest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import ValidationError
from .types import Box, LabelMap


@dataclass(frozen=True)
class IoUReport:
    per_class: tuple[tuple[int, float], ...]
    mean: float
    classes_evaluated: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "per_class": [{"class_id": c, "iou": v} for c, v in self.per_class],
                "mean": self.mean,
                "classes_evaluated": self.classes_evaluated,
            },
            indent=2,
        )


def mask_miou(pred: LabelMap, truth: LabelMap) -> IoUReport:
    """Per-class pixel IoU between two label maps."""
    if pred.ids.shape != truth.ids.shape:
        raise ValidationError(
            f"label maps disagree: {pred.width}x{pred.height} vs {truth.width}x{truth.height}"
        )
    classes = sorted(set(pred.class_ids()) | set(truth.class_ids()))
    per_class = []
    for class_id in classes:
        p = pred.ids == class_id
        t = truth.ids == class_id
        union = int((p | t).sum())
        if union == 0:
            continue
        inter = int((p & t).sum())
        per_class.append((class_id, inter / union))
    mean = sum(v for _, v in per_class) / len(per_class) if per_class else 0.0
    return IoUReport(per_class=tuple(per_class), mean=mean, classes_evaluated=len(per_class))


def box_iou(a: Box, b: Box) -> float:
    """Intersection area over union area."""
    ix = max(0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union


def box_set_miou(preds: list[Box], truths: list[Box]) -> float:
    """Greedy one-to-one matching by descending IoU; unmatched boxes count 0;
    mean over max(|preds|, |truths|). Two empty sets score 1.0 (vacuously
    perfect)."""
    if not preds and not truths:
        return 1.0
    if not preds or not truths:
        return 0.0
    pairs = sorted(
        ((box_iou(p, t), i, j) for i, p in enumerate(preds) for j, t in enumerate(truths)),
        key=lambda x: (-x[0], x[1], x[2]),
    )
    used_p: set[int] = set()
    used_t: set[int] = set()
    total = 0.0
    for iou, i, j in pairs:
        if i in used_p or j in used_t:
            continue
        used_p.add(i)
        used_t.add(j)
        total += iou
    return total / max(len(preds), len(truths))


def box_set_miou_report(preds: list[Box], truths: list[Box]) -> dict:
    return {
        "miou": box_set_miou(preds, truths),
        "predictions": len(preds),
        "truths": len(truths),
    }
