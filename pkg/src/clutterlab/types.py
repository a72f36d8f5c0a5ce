"""Core raster and annotation types.

Everything downstream (fusion, synthesis, the pipeline) flows through these
types. Arrays are row-major numpy buffers; instances are treated as immutable
after construction and are safe to share across threads. Boxes use half-open
integer pixel coordinates: (x_min, y_min) inclusive, (x_max, y_max) exclusive.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DuplicateClassError,
    UnregisteredClassError,
    ValidationError,
)

SAMPLE_SOURCES = ("acquired", "synthesized", "fixture")


@dataclass(frozen=True, eq=False)
class Box:
    """Axis-aligned half-open pixel rectangle."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if not (0 <= self.x_min < self.x_max and 0 <= self.y_min < self.y_max):
            raise ValidationError(
                f"degenerate box ({self.x_min},{self.y_min},{self.x_max},{self.y_max})"
            )

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> int:
        return self.width * self.height

    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def contains(self, x: int, y: int) -> bool:
        return self.x_min <= x < self.x_max and self.y_min <= y < self.y_max

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Box):
            return NotImplemented
        return self.as_tuple() == other.as_tuple()

    def __hash__(self) -> int:
        return hash(self.as_tuple())

    def __repr__(self) -> str:
        return f"Box({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"


@dataclass(frozen=True, eq=False)
class RgbImage:
    """8-bit RGB raster, shape (height, width, 3), dtype uint8."""

    data: np.ndarray

    def __post_init__(self):
        a = self.data
        if not isinstance(a, np.ndarray) or a.ndim != 3 or a.shape[2] != 3:
            raise ValidationError("RgbImage.data must be an (h, w, 3) array")
        if a.dtype != np.uint8:
            raise ValidationError(f"RgbImage.data must be uint8, got {a.dtype}")
        if a.shape[0] < 1 or a.shape[1] < 1:
            raise ValidationError("RgbImage must be at least 1x1")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-pixel class ids, shape (height, width), dtype uint16. 0 = background."""

    ids: np.ndarray

    def __post_init__(self):
        a = self.ids
        if not isinstance(a, np.ndarray) or a.ndim != 2:
            raise ValidationError("LabelMap.ids must be an (h, w) array")
        if a.dtype != np.uint16:
            raise ValidationError(f"LabelMap.ids must be uint16, got {a.dtype}")

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    def class_ids(self) -> list[int]:
        """Nonzero ids present, ascending."""
        present = np.unique(self.ids)
        return [int(c) for c in present if c != 0]


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Class-agnostic foreground mask, shape (height, width), dtype bool."""

    bits: np.ndarray

    def __post_init__(self):
        a = self.bits
        if not isinstance(a, np.ndarray) or a.ndim != 2:
            raise ValidationError("BinaryMask.bits must be an (h, w) array")
        if a.dtype != np.bool_:
            raise ValidationError(f"BinaryMask.bits must be bool, got {a.dtype}")

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    def count(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class ClassEntry:
    class_id: int
    name: str
    image_ids: tuple[str, ...]

    @property
    def image_count(self) -> int:
        return len(self.image_ids)


@dataclass(frozen=True)
class RegistrySnapshot:
    """Immutable view of the registry, safe to plan scenes from."""

    entries: tuple[ClassEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def class_ids(self) -> tuple[int, ...]:
        return tuple(e.class_id for e in self.entries)

    def get(self, class_id: int) -> ClassEntry:
        for e in self.entries:
            if e.class_id == class_id:
                return e
        raise UnregisteredClassError(f"class id {class_id} not registered")

    def all_image_ids(self) -> tuple[str, ...]:
        out: list[str] = []
        for e in self.entries:
            out.extend(e.image_ids)
        return tuple(out)


class ClassRegistry:
    """Thread-safe class id/name registry with per-class source-image lists.

    A single writer registers classes and appends source image ids while any
    number of planners read atomic snapshots. Ids are nonzero 16-bit values
    allocated sequentially and never reused.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._names: dict[int, str] = {}
        self._by_name: dict[str, int] = {}
        self._images: dict[int, list[str]] = {}
        self._next_id = 1

    def register(self, name: str) -> int:
        if not name:
            raise ValidationError("class name must be nonempty")
        with self._lock:
            if name in self._by_name:
                raise DuplicateClassError(f"class name {name!r} already registered")
            class_id = self._next_id
            if class_id > 0xFFFF:
                raise ValidationError("class id space exhausted (16-bit)")
            self._next_id += 1
            self._names[class_id] = name
            self._by_name[name] = class_id
            self._images[class_id] = []
            return class_id

    def ensure(self, name: str) -> int:
        """Return the id for ``name``, registering it if new."""
        with self._lock:
            existing = self._by_name.get(name)
        if existing is not None:
            return existing
        try:
            return self.register(name)
        except DuplicateClassError:
            # Lost a race with another registration of the same name.
            with self._lock:
                return self._by_name[name]

    def add_source(self, class_id: int, sample_id: str) -> None:
        with self._lock:
            if class_id not in self._names:
                raise UnregisteredClassError(f"class id {class_id} not registered")
            self._images[class_id].append(sample_id)

    def contains(self, class_id: int) -> bool:
        with self._lock:
            return class_id in self._names

    def name_of(self, class_id: int) -> str:
        with self._lock:
            try:
                return self._names[class_id]
            except KeyError:
                raise UnregisteredClassError(f"class id {class_id} not registered") from None

    def id_of(self, name: str) -> int:
        with self._lock:
            try:
                return self._by_name[name]
            except KeyError:
                raise UnregisteredClassError(f"class name {name!r} not registered") from None

    def image_count(self, class_id: int) -> int:
        with self._lock:
            if class_id not in self._names:
                raise UnregisteredClassError(f"class id {class_id} not registered")
            return len(self._images[class_id])

    def snapshot(self) -> RegistrySnapshot:
        with self._lock:
            entries = tuple(
                ClassEntry(cid, self._names[cid], tuple(self._images[cid]))
                for cid in sorted(self._names)
            )
        return RegistrySnapshot(entries)

    def entries(self) -> list[tuple[int, str, int]]:
        """(class_id, name, image_count) triples, ascending by id."""
        snap = self.snapshot()
        return [(e.class_id, e.name, e.image_count) for e in snap.entries]

    def to_json(self) -> str:
        snap = self.snapshot()
        payload = {"classes": [{"id": e.class_id, "name": e.name} for e in snap.entries]}
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ClassRegistry":
        payload = json.loads(text)
        reg = cls()
        classes = sorted(payload.get("classes", []), key=lambda c: int(c["id"]))
        with reg._lock:
            for c in classes:
                cid, name = int(c["id"]), str(c["name"])
                if cid in reg._names or name in reg._by_name:
                    raise ValidationError(f"duplicate class entry id={cid} name={name!r}")
                if not (1 <= cid <= 0xFFFF):
                    raise ValidationError(f"class id {cid} outside nonzero 16-bit range")
                reg._names[cid] = name
                reg._by_name[name] = cid
                reg._images[cid] = []
                reg._next_id = max(reg._next_id, cid + 1)
        return reg


@dataclass(frozen=True, eq=False)
class AnnotatedSample:
    """One image with its dense labels, instance boxes and provenance."""

    image: RgbImage
    labels: LabelMap
    boxes: tuple[tuple[int, Box], ...] = field(default_factory=tuple)
    source: str = "acquired"
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        if self.source not in SAMPLE_SOURCES:
            raise ValidationError(
                f"source must be one of {SAMPLE_SOURCES}, got {self.source!r}"
            )
        if (self.image.height, self.image.width) != (self.labels.height, self.labels.width):
            raise ValidationError(
                f"image {self.image.width}x{self.image.height} and labels "
                f"{self.labels.width}x{self.labels.height} disagree"
            )
        ids = self.labels.ids
        for class_id, box in self.boxes:
            if box.x_max > self.image.width or box.y_max > self.image.height:
                raise ValidationError(f"box {box} extends past image bounds")
            region = ids[box.y_min : box.y_max, box.x_min : box.x_max]
            if not (region == class_id).any():
                raise ValidationError(
                    f"box {box} carries class {class_id} but no labeled pixel in it"
                )

    @property
    def width(self) -> int:
        return self.image.width

    @property
    def height(self) -> int:
        return self.image.height

    def class_mask(self, class_id: int) -> BinaryMask:
        return BinaryMask(self.labels.ids == np.uint16(class_id))

    def decoded_bytes(self) -> int:
        """RAM footprint of the decoded rasters (image + labels)."""
        return int(self.image.data.nbytes + self.labels.ids.nbytes)
