"""Seedable image/label augmentations for training-time variety.

Photometric jitter touches only the image; geometric ops (mirror, scale,
rotate, crop) transform image and labels identically, with nearest-neighbor
resampling for labels so class ids are never interpolated. The operation
order is fixed (color -> mirror -> scale -> rotate -> blur -> crop) to keep a
given seed reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .types import AnnotatedSample, Box, LabelMap, RgbImage


@dataclass(frozen=True)
class AugmentSpec:
    color_jitter_prob: float = 0.5
    hue_range: float = 0.1          # fraction of the full hue circle
    saturation_range: float = 0.1   # multiplicative, 1 +- range
    brightness_range: float = 0.1
    contrast_range: float = 0.1
    rotation_range: float = 10.0    # degrees, uniform in [-range, +range]
    blur_sigma: float = 3.0         # pixels; 0 disables
    mirror_prob: float = 0.5
    scale_range: tuple[float, float] = (1.0, 1.0)
    crop: tuple[int, int] | None = (512, 512)  # (width, height); None disables
    seed: int = 0

    def __post_init__(self):
        for name in ("color_jitter_prob", "mirror_prob"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"{name} must be in [0, 1], got {v}")
        if self.blur_sigma < 0:
            raise ValidationError("blur_sigma must be >= 0")
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ValidationError(f"bad scale_range {self.scale_range}")
        if self.crop is not None:
            object.__setattr__(self, "crop", tuple(self.crop))
        object.__setattr__(self, "scale_range", tuple(self.scale_range))

    def to_json(self) -> str:
        payload = {
            "color_jitter_prob": self.color_jitter_prob,
            "hue_range": self.hue_range,
            "saturation_range": self.saturation_range,
            "brightness_range": self.brightness_range,
            "contrast_range": self.contrast_range,
            "rotation_range": self.rotation_range,
            "blur_sigma": self.blur_sigma,
            "mirror_prob": self.mirror_prob,
            "scale_range": list(self.scale_range),
            "crop": list(self.crop) if self.crop else None,
            "seed": self.seed,
        }
        return json.dumps(payload, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "AugmentSpec":
        payload = json.loads(text)
        crop = payload.get("crop")
        return cls(
            color_jitter_prob=float(payload.get("color_jitter_prob", 0.5)),
            hue_range=float(payload.get("hue_range", 0.1)),
            saturation_range=float(payload.get("saturation_range", 0.1)),
            brightness_range=float(payload.get("brightness_range", 0.1)),
            contrast_range=float(payload.get("contrast_range", 0.1)),
            rotation_range=float(payload.get("rotation_range", 10.0)),
            blur_sigma=float(payload.get("blur_sigma", 3.0)),
            mirror_prob=float(payload.get("mirror_prob", 0.5)),
            scale_range=tuple(payload.get("scale_range", (1.0, 1.0))),
            crop=tuple(crop) if crop else None,
            seed=int(payload.get("seed", 0)),
        )


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    import matplotlib.colors as mcolors

    return mcolors.rgb_to_hsv(rgb / 255.0)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    import matplotlib.colors as mcolors

    return np.clip(mcolors.hsv_to_rgb(hsv) * 255.0 + 0.5, 0, 255).astype(np.uint8)


def color_jitter(image: RgbImage, spec: AugmentSpec, rng: np.random.Generator) -> RgbImage:
    """Hue/saturation/brightness/contrast, each applied with the configured
    selection probability."""
    apply_flags = rng.random(4) < spec.color_jitter_prob
    deltas = rng.uniform(-1.0, 1.0, 4)
    if not apply_flags.any():
        return image

    out = image.data.astype(np.float64)
    if apply_flags[0] or apply_flags[1]:
        hsv = _rgb_to_hsv(out)
        if apply_flags[0]:
            hsv[..., 0] = (hsv[..., 0] + deltas[0] * spec.hue_range) % 1.0
        if apply_flags[1]:
            hsv[..., 1] = np.clip(hsv[..., 1] * (1.0 + deltas[1] * spec.saturation_range), 0, 1)
        out = _hsv_to_rgb(hsv).astype(np.float64)
    if apply_flags[2]:
        out = out * (1.0 + deltas[2] * spec.brightness_range)
    if apply_flags[3]:
        mean = out.mean()
        out = (out - mean) * (1.0 + deltas[3] * spec.contrast_range) + mean
    return RgbImage(np.clip(out + 0.5, 0, 255).astype(np.uint8))


def mirror(image: RgbImage, labels: LabelMap) -> tuple[RgbImage, LabelMap]:
    return (
        RgbImage(np.ascontiguousarray(image.data[:, ::-1])),
        LabelMap(np.ascontiguousarray(labels.ids[:, ::-1])),
    )


def scale(image: RgbImage, labels: LabelMap, factor: float) -> tuple[RgbImage, LabelMap]:
    if factor == 1.0:
        return image, labels
    img = ndimage.zoom(image.data, (factor, factor, 1.0), order=1, mode="nearest")
    lab = ndimage.zoom(labels.ids, (factor, factor), order=0, mode="nearest")
    return RgbImage(np.clip(img, 0, 255).astype(np.uint8)), LabelMap(lab.astype(np.uint16))


def rotate(image: RgbImage, labels: LabelMap, degrees: float) -> tuple[RgbImage, LabelMap]:
    """Rotation about the image center; bilinear pixels, nearest labels,
    out-of-frame filled with background."""
    if abs(degrees) > 45.0:
        raise ValidationError(f"rotation limited to +-45 degrees, got {degrees}")
    if degrees == 0.0:
        return image, labels
    img = ndimage.rotate(
        image.data, degrees, axes=(1, 0), reshape=False, order=1, mode="constant", cval=0
    )
    lab = ndimage.rotate(
        labels.ids, degrees, axes=(1, 0), reshape=False, order=0, mode="constant", cval=0
    )
    return RgbImage(np.clip(img, 0, 255).astype(np.uint8)), LabelMap(lab.astype(np.uint16))


def gaussian_blur(image: RgbImage, sigma: float) -> RgbImage:
    """Separable Gaussian with kernel radius ceil(3*sigma), edge-clamped."""
    if sigma < 0:
        raise ValidationError("sigma must be >= 0")
    if sigma == 0:
        return RgbImage(image.data.copy())
    radius = int(np.ceil(3.0 * sigma))
    out = np.empty_like(image.data)
    for c in range(3):
        blurred = ndimage.gaussian_filter(
            image.data[..., c].astype(np.float64), sigma=sigma, mode="nearest", radius=radius
        )
        out[..., c] = np.clip(blurred + 0.5, 0, 255).astype(np.uint8)
    return RgbImage(out)


def crop(
    image: RgbImage, labels: LabelMap, size: tuple[int, int], origin: tuple[int, int]
) -> tuple[RgbImage, LabelMap]:
    cw, ch = size
    ox, oy = origin
    if cw > image.width or ch > image.height:
        raise ValidationError(
            f"crop {cw}x{ch} larger than image {image.width}x{image.height}"
        )
    if ox < 0 or oy < 0 or ox + cw > image.width or oy + ch > image.height:
        raise ValidationError("crop origin out of bounds")
    return (
        RgbImage(np.ascontiguousarray(image.data[oy : oy + ch, ox : ox + cw])),
        LabelMap(np.ascontiguousarray(labels.ids[oy : oy + ch, ox : ox + cw])),
    )


def _boxes_from_labels(labels: LabelMap) -> tuple[tuple[int, Box], ...]:
    boxes = []
    for class_id in labels.class_ids():
        ys, xs = np.nonzero(labels.ids == class_id)
        boxes.append(
            (class_id, Box(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1))
        )
    return tuple(boxes)


def apply(
    sample: AnnotatedSample, spec: AugmentSpec, rng: np.random.Generator | None = None
) -> AnnotatedSample:
    """Run the augmentation chain; boxes are recomputed per class from the
    transformed labels (classes cropped away lose their box)."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)

    image, labels = sample.image, sample.labels
    image = color_jitter(image, spec, rng)

    if rng.random() < spec.mirror_prob:
        image, labels = mirror(image, labels)

    lo, hi = spec.scale_range
    factor = float(rng.uniform(lo, hi)) if (lo, hi) != (1.0, 1.0) else 1.0
    if factor != 1.0:
        image, labels = scale(image, labels, factor)

    if spec.rotation_range > 0:
        degrees = float(rng.uniform(-spec.rotation_range, spec.rotation_range))
        image, labels = rotate(image, labels, degrees)

    if spec.blur_sigma > 0:
        image = gaussian_blur(image, spec.blur_sigma)

    if spec.crop is not None:
        cw, ch = spec.crop
        if cw > image.width or ch > image.height:
            raise ValidationError(
                f"crop {cw}x{ch} larger than image {image.width}x{image.height} after scaling"
            )
        ox = int(rng.integers(0, image.width - cw + 1))
        oy = int(rng.integers(0, image.height - ch + 1))
        image, labels = crop(image, labels, (cw, ch), (ox, oy))

    return AnnotatedSample(
        image=image,
        labels=labels,
        boxes=_boxes_from_labels(labels),
        source=sample.source,
        seed=sample.seed,
    )
