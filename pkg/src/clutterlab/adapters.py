"""Predictor and consumer contracts plus deterministic test doubles.

The labeling stage only ever talks to a MaskPredictor and a BoxPredictor,
and the training stage to a ChildConsumer. Conforming mocks here let every
pipeline path run end to end without any trained network; a real inference
backend slots in behind the same contracts.
"""

from __future__ import annotations

import hashlib
import threading
import time
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ValidationError
from .types import AnnotatedSample, BinaryMask, Box, RgbImage


@runtime_checkable
class MaskPredictor(Protocol):
    """Class-agnostic foreground mask for one image; output dims = input dims."""

    def predict_mask(self, image: RgbImage) -> BinaryMask: ...


@runtime_checkable
class BoxPredictor(Protocol):
    """Class-agnostic instance boxes, all within image bounds."""

    def predict_boxes(self, image: RgbImage) -> list[Box]: ...


@runtime_checkable
class ChildConsumer(Protocol):
    """Accepts batches of samples; must not block producers beyond the
    pipeline's bounded-queue backpressure."""

    def consume(self, batch: Sequence[AnnotatedSample]) -> None: ...


def chroma_oracle_mask(
    image: RgbImage, background_color: tuple[int, int, int], tolerance: int = 0
) -> BinaryMask:
    """Foreground = pixels whose max channel deviation from the background
    color exceeds the tolerance. Exact on fixtures with flat backgrounds."""
    bg = np.asarray(background_color, dtype=np.int16)
    deviation = np.abs(image.data.astype(np.int16) - bg).max(axis=2)
    return BinaryMask(deviation > tolerance)


def connected_component_boxes(mask: BinaryMask, min_area: int = 20) -> list[Box]:
    """One tight box per 4-connected component with area >= min_area,
    sorted by (y_min, x_min)."""
    labeled, count = ndimage.label(mask.bits)  # default structure = 4-connectivity
    if count == 0:
        return []
    areas = np.bincount(labeled.ravel())
    boxes = []
    for comp, sl in enumerate(ndimage.find_objects(labeled), start=1):
        if sl is None or areas[comp] < min_area:
            continue
        boxes.append(Box(sl[1].start, sl[0].start, sl[1].stop, sl[0].stop))
    boxes.sort(key=lambda b: (b.y_min, b.x_min))
    return boxes


class ChromaOraclePredictor:
    """Mask + box predictor for fixtures shot against a known flat background."""

    shareable = True

    def __init__(self, background_color: tuple[int, int, int] = (0, 0, 0), tolerance: int = 0,
                 min_area: int = 20):
        self.background_color = tuple(background_color)
        self.tolerance = tolerance
        self.min_area = min_area

    def predict_mask(self, image: RgbImage) -> BinaryMask:
        return chroma_oracle_mask(image, self.background_color, self.tolerance)

    def predict_boxes(self, image: RgbImage) -> list[Box]:
        return connected_component_boxes(self.predict_mask(image), self.min_area)


class ConnectedComponentsPredictor:
    """Box predictor over non-background pixels; the default instance-detection
    test double (images it sees are masked to black outside the class)."""

    shareable = True

    def __init__(self, min_area: int = 20, background_color: tuple[int, int, int] = (0, 0, 0),
                 tolerance: int = 0):
        self.min_area = min_area
        self.background_color = tuple(background_color)
        self.tolerance = tolerance

    def predict_mask(self, image: RgbImage) -> BinaryMask:
        return chroma_oracle_mask(image, self.background_color, self.tolerance)

    def predict_boxes(self, image: RgbImage) -> list[Box]:
        return connected_component_boxes(self.predict_mask(image), self.min_area)


class StoredFixturePredictor:
    """Replays stored ground truth, keyed by image content.

    Built from a dataset directory: each sample's image bytes hash to its
    stored mask and boxes, so the predictor stays a pure image -> annotation
    function while replaying exact fixtures.
    """

    shareable = True

    def __init__(self, provider_or_dir):
        from .dataset_io import DiskSampleStore

        provider = (
            DiskSampleStore(provider_or_dir)
            if isinstance(provider_or_dir, (str, bytes)) or hasattr(provider_or_dir, "__fspath__")
            else provider_or_dir
        )
        self._masks: dict[bytes, BinaryMask] = {}
        self._boxes: dict[bytes, list[Box]] = {}
        for sample_id in provider.sample_ids():
            sample = provider.get(sample_id)
            key = self._key(sample.image)
            self._masks[key] = BinaryMask(sample.labels.ids != 0)
            self._boxes[key] = [box for _, box in sample.boxes]

    @staticmethod
    def _key(image: RgbImage) -> bytes:
        return hashlib.sha256(image.data.tobytes()).digest()

    def predict_mask(self, image: RgbImage) -> BinaryMask:
        try:
            return self._masks[self._key(image)]
        except KeyError:
            raise ValidationError("image not among the stored fixtures") from None

    def predict_boxes(self, image: RgbImage) -> list[Box]:
        try:
            return self._boxes[self._key(image)]
        except KeyError:
            raise ValidationError("image not among the stored fixtures") from None


class RecordingChild:
    """Consumer that counts samples, re-checks their invariants, and measures
    its own consumption rate. ``service_time`` simulates per-sample training
    cost (seconds)."""

    def __init__(self, service_time: float = 0.0):
        self.service_time = service_time
        self._lock = threading.Lock()
        self.consumed = 0
        self.defects = 0
        self.defect_messages: list[str] = []
        self._started: float | None = None
        self._last: float | None = None

    def consume(self, batch: Sequence[AnnotatedSample]) -> None:
        now = time.perf_counter()
        with self._lock:
            if self._started is None:
                self._started = now
        for sample in batch:
            problem = self._check(sample)
            with self._lock:
                self.consumed += 1
                if problem:
                    self.defects += 1
                    if len(self.defect_messages) < 100:
                        self.defect_messages.append(problem)
        if self.service_time > 0:
            time.sleep(self.service_time * len(batch))
        with self._lock:
            self._last = time.perf_counter()

    @staticmethod
    def _check(sample: AnnotatedSample) -> str | None:
        if (sample.image.height, sample.image.width) != (sample.labels.height, sample.labels.width):
            return "image/label dimension mismatch"
        ids = sample.labels.ids
        for class_id, box in sample.boxes:
            if box.x_max > sample.width or box.y_max > sample.height:
                return f"box {box} out of bounds"
            if not (ids[box.y_min : box.y_max, box.x_min : box.x_max] == class_id).any():
                return f"box {box} has no pixel of class {class_id}"
        return None

    def rate(self) -> float:
        """Samples per second over the consuming interval."""
        with self._lock:
            if self._started is None or self._last is None or self._last <= self._started:
                return 0.0
            return self.consumed / (self._last - self._started)


def recording_child(service_time: float = 0.0) -> RecordingChild:
    return RecordingChild(service_time=service_time)


PREDICTOR_NAMES = ("chroma_oracle", "stored_fixture", "connected_components")


def make_predictor(name: str, **options):
    """Instantiate a predictor by its registered name.

    chroma_oracle / connected_components accept background_color, tolerance,
    min_area; stored_fixture needs fixture_dir (or provider).
    """
    if name == "chroma_oracle":
        return ChromaOraclePredictor(
            background_color=tuple(options.get("background_color", (0, 0, 0))),
            tolerance=int(options.get("tolerance", 0)),
            min_area=int(options.get("min_area", 20)),
        )
    if name == "connected_components":
        return ConnectedComponentsPredictor(
            min_area=int(options.get("min_area", 20)),
            background_color=tuple(options.get("background_color", (0, 0, 0))),
            tolerance=int(options.get("tolerance", 0)),
        )
    if name == "stored_fixture":
        target = options.get("provider") or options.get("fixture_dir")
        if target is None:
            raise ConfigError("stored_fixture predictor needs fixture_dir")
        return StoredFixturePredictor(target)
    raise ConfigError(f"unknown predictor {name!r}; known: {', '.join(PREDICTOR_NAMES)}")
