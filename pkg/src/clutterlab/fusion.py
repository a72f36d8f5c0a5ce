"""Combine a class-agnostic predicted mask and predicted box into one annotation.

The combination is governed by a priority pair: with the mask priority below
the box priority the box wins outright, above it the mask's own bounding box
wins, and at equal priority the result is the intersection of the two boxes.
The dense output mask is the predicted mask clipped to the winning region,
falling back to the filled region when the two do not overlap at all (weak
masks on transparent objects still yield a usable annotation that way).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyFusionError, EmptyMaskError, UnregisteredClassError, ValidationError
from .types import BinaryMask, Box, ClassRegistry, LabelMap

RULE_BOX_ONLY = "box_only"
RULE_INTERSECTION = "intersection"
RULE_MASK_ONLY = "mask_only"


@dataclass(frozen=True)
class FusionPolicy:
    """Priority pair; only the ordering of the two values is meaningful."""

    priority_mask: int
    priority_box: int

    def __post_init__(self):
        if self.priority_mask < 0 or self.priority_box < 0:
            raise ValidationError("priorities must be non-negative")

    @classmethod
    def parse(cls, text: str) -> "FusionPolicy":
        """Parse 'pm,pb' (e.g. '1,1')."""
        try:
            pm, pb = (int(part) for part in text.split(","))
        except ValueError as exc:
            raise ValidationError(f"policy must look like 'pm,pb', got {text!r}") from exc
        return cls(pm, pb)


@dataclass(frozen=True, eq=False)
class FusedAnnotation:
    final_box: Box
    final_mask: BinaryMask
    rule_applied: str

    def __post_init__(self):
        outside = self.final_mask.bits.copy()
        outside[self.final_box.y_min : self.final_box.y_max,
                self.final_box.x_min : self.final_box.x_max] = False
        if outside.any():
            raise ValidationError("final mask has true pixels outside final box")


def box_from_mask(mask: BinaryMask) -> Box:
    """Tightest box containing all true pixels."""
    ys, xs = np.nonzero(mask.bits)
    if ys.size == 0:
        raise EmptyMaskError("cannot take the bounding box of an empty mask")
    return Box(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def intersect_boxes(a: Box, b: Box) -> Box | None:
    """Coordinate-wise intersection; None when the boxes do not overlap."""
    x_min = max(a.x_min, b.x_min)
    y_min = max(a.y_min, b.y_min)
    x_max = min(a.x_max, b.x_max)
    y_max = min(a.y_max, b.y_max)
    if x_min >= x_max or y_min >= y_max:
        return None
    return Box(x_min, y_min, x_max, y_max)


def fuse(mask: BinaryMask, box: Box, policy: FusionPolicy) -> FusedAnnotation:
    """Apply the priority rules to produce the final region and dense mask."""
    pm, pb = policy.priority_mask, policy.priority_box
    if pm < pb:
        final_box = box
        rule = RULE_BOX_ONLY
    elif pm == pb:
        box_m = box_from_mask(mask)
        final_box = intersect_boxes(box_m, box)
        if final_box is None:
            raise EmptyFusionError(
                f"mask box {box_m} and predicted box {box} do not overlap"
            )
        rule = RULE_INTERSECTION
    else:
        final_box = box_from_mask(mask)
        rule = RULE_MASK_ONLY

    clipped = np.zeros_like(mask.bits)
    sl = np.s_[final_box.y_min : final_box.y_max, final_box.x_min : final_box.x_max]
    clipped[sl] = mask.bits[sl]
    if not clipped.any():
        # No predicted-mask support inside the region: fill the region.
        clipped[sl] = True
    return FusedAnnotation(final_box=final_box, final_mask=BinaryMask(clipped), rule_applied=rule)


def assign_label(
    fused: FusedAnnotation, class_id: int, registry: ClassRegistry
) -> tuple[LabelMap, tuple[int, Box]]:
    """Fill the fused mask with a registered class id.

    Returns the label-map fragment (same dims as the mask) and the box record.
    """
    if not registry.contains(class_id):
        raise UnregisteredClassError(f"class id {class_id} not registered")
    if not fused.final_mask.bits.any():
        raise EmptyFusionError("refusing to emit an empty label fragment")
    ids = np.zeros(fused.final_mask.bits.shape, dtype=np.uint16)
    ids[fused.final_mask.bits] = np.uint16(class_id)
    return LabelMap(ids), (class_id, fused.final_box)
