"""Persistence and in-memory caching of annotated samples.

On-disk layout of a dataset directory:

    <id>.rgb.png      8-bit RGB image
    <id>.labels.png   16-bit grayscale label map (class ids, 0 = background)
    <id>.boxes.jsonl  one JSON object per box:
                      {"class_id":int,"x_min":int,"y_min":int,"x_max":int,"y_max":int}
    manifest.jsonl    one record per sample, append-only
    classes.json      {"classes":[{"id":1,"name":"bottle"}, ...]}

Writers to one directory must be externally serialized (single-writer
contract); decoded samples and caches are immutable and freely shareable
across threads. All file writes go through a temp-file-then-rename so a
failed command never leaves partial files behind.
"""

from __future__ import annotations

import io
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np
import psutil
from PIL import Image

from .errors import (
    BitDepthError,
    DatasetError,
    MalformedRecordError,
    MemoryBudgetError,
    MissingSampleError,
    ValidationError,
)
from .types import AnnotatedSample, Box, ClassRegistry, LabelMap, RgbImage

MANIFEST_NAME = "manifest.jsonl"
CLASSES_NAME = "classes.json"

# Fraction of currently free memory the prefetch cache may claim by default.
DEFAULT_MEMORY_FRACTION = 0.75


def _encode_png(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG")
    return buf.getvalue()


def encode_boxes(boxes: Iterable[tuple[int, Box]]) -> bytes:
    lines = []
    for class_id, box in boxes:
        lines.append(
            json.dumps(
                {
                    "class_id": int(class_id),
                    "x_min": box.x_min,
                    "y_min": box.y_min,
                    "x_max": box.x_max,
                    "y_max": box.y_max,
                },
                separators=(",", ":"),
            )
        )
    return ("\n".join(lines) + ("\n" if lines else "")).encode()


def decode_boxes(data: bytes, path: str | None = None) -> tuple[tuple[int, Box], ...]:
    boxes: list[tuple[int, Box]] = []
    for lineno, raw in enumerate(data.decode().splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
            box = Box(int(rec["x_min"]), int(rec["y_min"]), int(rec["x_max"]), int(rec["y_max"]))
            boxes.append((int(rec["class_id"]), box))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise MalformedRecordError(f"bad box record ({exc})", path, lineno) from exc
    return tuple(boxes)


@dataclass(frozen=True)
class EncodedSample:
    """A sample serialized to its on-disk byte payloads."""

    sample_id: str
    image_png: bytes
    labels_png: bytes
    boxes_jsonl: bytes
    manifest_record: dict

    def files(self) -> dict[str, bytes]:
        return {
            f"{self.sample_id}.rgb.png": self.image_png,
            f"{self.sample_id}.labels.png": self.labels_png,
            f"{self.sample_id}.boxes.jsonl": self.boxes_jsonl,
        }


def encode_sample(sample: AnnotatedSample, sample_id: str) -> EncodedSample:
    record = {
        "id": sample_id,
        "image": f"{sample_id}.rgb.png",
        "labels": f"{sample_id}.labels.png",
        "boxes": f"{sample_id}.boxes.jsonl",
        "class_ids": sample.labels.class_ids(),
        "source": sample.source,
        "seed": sample.seed,
    }
    return EncodedSample(
        sample_id=sample_id,
        image_png=_encode_png(sample.image.data),
        labels_png=_encode_png(sample.labels.ids),
        boxes_jsonl=encode_boxes(sample.boxes),
        manifest_record=record,
    )


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise DatasetError(f"write failed ({exc})", str(path)) from exc


def next_sample_id(directory: Path | str) -> str:
    return f"{len(read_manifest(directory)):06d}"


def write_encoded(encoded: EncodedSample, directory: Path | str) -> str:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, data in encoded.files().items():
        _atomic_write(directory / name, data)
    line = json.dumps(encoded.manifest_record, separators=(",", ":")) + "\n"
    try:
        with open(directory / MANIFEST_NAME, "a", encoding="utf-8") as fh:
            fh.write(line)
    except OSError as exc:
        raise DatasetError(f"manifest append failed ({exc})", str(directory / MANIFEST_NAME)) from exc
    return encoded.sample_id


def save_sample(sample: AnnotatedSample, directory: Path | str, sample_id: str | None = None) -> str:
    """Write one sample plus its manifest line; returns the sample id."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if sample_id is None:
        sample_id = next_sample_id(directory)
    return write_encoded(encode_sample(sample, sample_id), directory)


def _read_file(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except FileNotFoundError as exc:
        raise MissingSampleError("file not found", str(path)) from exc
    except OSError as exc:
        raise DatasetError(f"read failed ({exc})", str(path)) from exc


def _decode_image_png(data: bytes, path: str | None = None) -> RgbImage:
    img = Image.open(io.BytesIO(data))
    if img.mode != "RGB":
        raise BitDepthError(f"expected 8-bit RGB PNG, got mode {img.mode}", path)
    return RgbImage(np.asarray(img, dtype=np.uint8))


def _decode_labels_png(data: bytes, path: str | None = None) -> LabelMap:
    img = Image.open(io.BytesIO(data))
    # 16-bit grayscale PNGs open as I;16 (or I on some Pillow builds).
    if img.mode not in ("I;16", "I"):
        raise BitDepthError(f"expected 16-bit grayscale PNG, got mode {img.mode}", path)
    arr = np.asarray(img)
    if arr.max(initial=0) > 0xFFFF or arr.min(initial=0) < 0:
        raise BitDepthError("label values outside 16-bit range", path)
    return LabelMap(arr.astype(np.uint16))


def load_image_png(path: Path | str) -> RgbImage:
    path = Path(path)
    return _decode_image_png(_read_file(path), str(path))


def load_labels_png(path: Path | str) -> LabelMap:
    path = Path(path)
    return _decode_labels_png(_read_file(path), str(path))


def write_bytes_atomic(path: Path | str, data: bytes) -> None:
    _atomic_write(Path(path), data)


def load_sample(sample_id: str, directory: Path | str) -> AnnotatedSample:
    """Exact inverse of :func:`save_sample` for the given id."""
    directory = Path(directory)
    image_path = directory / f"{sample_id}.rgb.png"
    labels_path = directory / f"{sample_id}.labels.png"
    boxes_path = directory / f"{sample_id}.boxes.jsonl"
    image = _decode_image_png(_read_file(image_path), str(image_path))
    labels = _decode_labels_png(_read_file(labels_path), str(labels_path))
    boxes = decode_boxes(_read_file(boxes_path), str(boxes_path))
    record = _manifest_record(directory, sample_id)
    source = record.get("source", "acquired") if record else "acquired"
    seed = record.get("seed") if record else None
    return AnnotatedSample(image=image, labels=labels, boxes=boxes, source=source, seed=seed)


def manifest_path(directory: Path | str) -> Path:
    directory = Path(directory)
    return directory if directory.name.endswith(".jsonl") else directory / MANIFEST_NAME


def read_manifest(directory: Path | str) -> list[dict]:
    """Parse manifest.jsonl; a missing manifest is an empty dataset."""
    path = manifest_path(directory)
    if not path.exists():
        return []
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise MalformedRecordError(f"bad manifest record ({exc})", str(path), lineno) from exc
            if "id" not in rec:
                raise MalformedRecordError("manifest record missing 'id'", str(path), lineno)
            records.append(rec)
    return records


def _manifest_record(directory: Path, sample_id: str) -> dict | None:
    for rec in read_manifest(directory):
        if rec["id"] == sample_id:
            return rec
    return None


def write_classes(registry: ClassRegistry, directory: Path | str) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    _atomic_write(directory / CLASSES_NAME, registry.to_json().encode())


def load_registry(directory: Path | str) -> ClassRegistry:
    """Rebuild the registry from classes.json plus manifest source lists.

    Source-image lists cover acquired/fixture samples only; synthesized
    scenes never feed back into synthesis.
    """
    directory = Path(directory).parent if str(directory).endswith(".jsonl") else Path(directory)
    classes_file = directory / CLASSES_NAME
    if classes_file.exists():
        registry = ClassRegistry.from_json(classes_file.read_text(encoding="utf-8"))
    else:
        registry = ClassRegistry()
    for rec in read_manifest(directory):
        if rec.get("source", "acquired") == "synthesized":
            continue
        for cid in rec.get("class_ids", []):
            if not registry.contains(int(cid)):
                raise ValidationError(
                    f"manifest sample {rec['id']} references class {cid} "
                    f"missing from {CLASSES_NAME}"
                )
            registry.add_source(int(cid), rec["id"])
    return registry


class SampleProvider(Protocol):
    """Read access to decoded samples by id."""

    def get(self, sample_id: str) -> AnnotatedSample: ...

    def sample_ids(self) -> tuple[str, ...]: ...


class DiskSampleStore:
    """Provider that decodes from disk on every access (no caching)."""

    def __init__(self, directory: Path | str):
        self.directory = Path(directory).parent if str(directory).endswith(".jsonl") else Path(directory)
        self._ids = tuple(rec["id"] for rec in read_manifest(self.directory))

    def get(self, sample_id: str) -> AnnotatedSample:
        return load_sample(sample_id, self.directory)

    def sample_ids(self) -> tuple[str, ...]:
        return self._ids


class SampleCache:
    """Every sample decoded up front; lookups are dict reads, no decoding."""

    def __init__(self, samples: dict[str, AnnotatedSample]):
        self._samples = dict(samples)
        self.decoded_bytes = sum(s.decoded_bytes() for s in self._samples.values())

    def get(self, sample_id: str) -> AnnotatedSample:
        try:
            return self._samples[sample_id]
        except KeyError:
            raise MissingSampleError(f"sample {sample_id!r} not in cache") from None

    def sample_ids(self) -> tuple[str, ...]:
        return tuple(self._samples)

    def __len__(self) -> int:
        return len(self._samples)


def default_memory_budget() -> int:
    return int(psutil.virtual_memory().available * DEFAULT_MEMORY_FRACTION)


def prefetch_all(manifest: Path | str, memory_budget_bytes: int | None = None) -> SampleCache:
    """Decode every manifest sample into RAM.

    ``manifest`` may be the manifest file or its dataset directory. The
    decoded total must fit the budget (default: 75% of free memory).
    """
    directory = manifest_path(manifest).parent
    records = read_manifest(directory)
    budget = default_memory_budget() if memory_budget_bytes is None else memory_budget_bytes
    samples: dict[str, AnnotatedSample] = {}
    used = 0
    for rec in records:
        sample = load_sample(rec["id"], directory)
        used += sample.decoded_bytes()
        if used > budget:
            required = used + sum(
                _estimate_decoded_bytes(directory, r) for r in records[len(samples) + 1 :]
            )
            raise MemoryBudgetError(required_bytes=required, available_bytes=budget)
        samples[rec["id"]] = sample
    return SampleCache(samples)


def _estimate_decoded_bytes(directory: Path, record: dict) -> int:
    # PNG header gives dims without a full decode.
    try:
        with Image.open(directory / record["image"]) as img:
            w, h = img.size
        return w * h * 3 + w * h * 2
    except OSError:
        return 0


class TimingProvider:
    """Wraps a provider and accumulates time spent decoding/fetching.

    Scene synthesis uses this to attribute image-decoding cost separately
    from object transfer and visibility checking.
    """

    def __init__(self, inner: SampleProvider):
        self._inner = inner
        self.seconds = 0.0
        self.calls = 0

    def get(self, sample_id: str) -> AnnotatedSample:
        t0 = time.perf_counter()
        out = self._inner.get(sample_id)
        self.seconds += time.perf_counter() - t0
        self.calls += 1
        return out

    def sample_ids(self) -> tuple[str, ...]:
        return self._inner.sample_ids()


class MemoProvider:
    """Per-scene memo so each source is fetched (and timed) exactly once."""

    def __init__(self, inner: SampleProvider | TimingProvider):
        self._inner = inner
        self._seen: dict[str, AnnotatedSample] = {}

    def get(self, sample_id: str) -> AnnotatedSample:
        hit = self._seen.get(sample_id)
        if hit is None:
            hit = self._inner.get(sample_id)
            self._seen[sample_id] = hit
        return hit

    def sample_ids(self) -> tuple[str, ...]:
        return self._inner.sample_ids()
