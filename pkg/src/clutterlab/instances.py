"""Instance detection from a semantic label map plus a class-agnostic box
predictor.

For each class present, the image is masked to black outside that class and
handed to the box predictor; each returned box becomes one instance whose
mask is the class pixels inside it. A class pixel claimed by several boxes of
the same class goes to the box with the nearest center (ties to the earlier
box in (y_min, x_min) order); instances left with no pixels are dropped.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .adapters import BoxPredictor
from .errors import ValidationError
from .types import BinaryMask, Box, LabelMap, RgbImage


@dataclass(frozen=True, eq=False)
class InstanceDetection:
    class_id: int
    box: Box
    mask: BinaryMask
    score: float | None = None


def per_class_masked_images(image: RgbImage, labels: LabelMap) -> list[tuple[int, RgbImage]]:
    """One (class_id, image) pair per class present; pixels outside the class
    are black."""
    if (image.height, image.width) != (labels.height, labels.width):
        raise ValidationError(
            f"image {image.width}x{image.height} and labels "
            f"{labels.width}x{labels.height} disagree"
        )
    out = []
    for class_id in labels.class_ids():
        masked = np.zeros_like(image.data)
        sel = labels.ids == class_id
        masked[sel] = image.data[sel]
        out.append((class_id, RgbImage(masked)))
    return out


def detect_instances(
    image: RgbImage, labels: LabelMap, box_predictor: BoxPredictor
) -> list[InstanceDetection]:
    detections: list[InstanceDetection] = []
    for class_id, masked in per_class_masked_images(image, labels):
        try:
            boxes = box_predictor.predict_boxes(masked)
        except Exception as exc:
            raise RuntimeError(f"box predictor failed for class {class_id}: {exc}") from exc
        boxes = sorted(boxes, key=lambda b: (b.y_min, b.x_min, b.x_max, b.y_max))
        if not boxes:
            continue
        class_sel = labels.ids == class_id
        ys, xs = np.nonzero(class_sel)
        if ys.size == 0:
            continue
        # Distance to each containing box center; non-containing boxes get inf.
        dist = np.full((ys.size, len(boxes)), np.inf)
        for k, box in enumerate(boxes):
            inside = (
                (xs >= box.x_min) & (xs < box.x_max) & (ys >= box.y_min) & (ys < box.y_max)
            )
            cx, cy = box.center()
            dist[inside, k] = (xs[inside] - cx) ** 2 + (ys[inside] - cy) ** 2
        owner = np.argmin(dist, axis=1)  # ties resolve to the earlier box
        owner[~np.isfinite(dist[np.arange(ys.size), owner])] = -1

        for k, box in enumerate(boxes):
            take = owner == k
            if not take.any():
                continue
            mask = np.zeros(labels.ids.shape, dtype=bool)
            mask[ys[take], xs[take]] = True
            detections.append(InstanceDetection(class_id=class_id, box=box, mask=BinaryMask(mask)))
    return detections


def encode_rle(mask: BinaryMask) -> str:
    """Row-major run lengths, alternating zero/one runs, starting with zeros."""
    flat = mask.bits.ravel()
    if flat.size == 0:
        return ""
    changes = np.nonzero(np.diff(flat))[0] + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return " ".join(str(r) for r in runs)


def decode_rle(text: str, width: int, height: int) -> BinaryMask:
    total = width * height
    flat = np.zeros(total, dtype=bool)
    pos = 0
    value = False
    for token in text.split():
        run = int(token)
        if run < 0 or pos + run > total:
            raise ValidationError("run-length data does not fit the mask dimensions")
        flat[pos : pos + run] = value
        pos += run
        value = not value
    if pos != total:
        raise ValidationError(f"run-length data covers {pos} of {total} pixels")
    return BinaryMask(flat.reshape(height, width))


def detection_to_dict(det: InstanceDetection) -> dict:
    out = {
        "class_id": det.class_id,
        "box": list(det.box.as_tuple()),
        "mask_rle": encode_rle(det.mask),
        "width": det.mask.width,
        "height": det.mask.height,
    }
    if det.score is not None:
        out["score"] = det.score
    return out


def detection_from_dict(payload: dict) -> InstanceDetection:
    box = Box(*(int(v) for v in payload["box"]))
    mask = decode_rle(payload["mask_rle"], int(payload["width"]), int(payload["height"]))
    return InstanceDetection(
        class_id=int(payload["class_id"]),
        box=box,
        mask=mask,
        score=payload.get("score"),
    )


def detections_to_jsonl(detections: list[InstanceDetection]) -> str:
    return "".join(
        json.dumps(detection_to_dict(d), separators=(",", ":")) + "\n" for d in detections
    )
