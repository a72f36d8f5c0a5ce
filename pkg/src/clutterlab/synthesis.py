"""Occlusion-aware synthetic clutter generation.

Single-instance samples are pasted onto a base image at the centers of an
M x M grid, back to front. Synthesis runs in three passes so that removing a
barely-visible object can never leave its pixels behind:

1. plan:   pick the base and one (class, source image) per grid cell;
2. drop:   z-buffer the planned object masks and repeatedly eliminate every
           placement whose visible fraction falls below the threshold, until
           a fixpoint is reached;
3. render: copy the surviving objects' pixels and write the label map and
           tight per-object boxes from exactly the pixels that stayed on top.

A scene is a pure function of (registry snapshot, provider contents, spec,
seed); many synthesizers may run concurrently against one shared read-only
provider.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace

import numpy as np

from .dataset_io import MemoProvider, SampleProvider, TimingProvider
from .errors import ConfigError, DegenerateGridError, EmptyRegistryError, ValidationError
from .types import AnnotatedSample, BinaryMask, Box, LabelMap, RegistrySnapshot, RgbImage

BASE_POLICIES = ("dataset_image", "background_pool", "blank")


@dataclass(frozen=True)
class ClutterSpec:
    """Parameters of one synthesized scene family."""

    grid_size: int
    visibility_threshold: float = 0.25
    base_policy: str = "dataset_image"
    jitter: bool = False
    seed: int = 0
    canvas_size: tuple[int, int] | None = None  # (width, height), used by blank bases

    def __post_init__(self):
        if self.grid_size < 1:
            raise ValidationError(f"grid_size must be >= 1, got {self.grid_size}")
        if not (0.0 < self.visibility_threshold <= 1.0):
            raise ValidationError(
                f"visibility_threshold must be in (0, 1], got {self.visibility_threshold}"
            )
        if self.base_policy not in BASE_POLICIES:
            raise ValidationError(
                f"base_policy must be one of {BASE_POLICIES}, got {self.base_policy!r}"
            )
        if self.canvas_size is not None:
            object.__setattr__(self, "canvas_size", tuple(self.canvas_size))

    def to_json(self) -> str:
        payload = {
            "grid_size": self.grid_size,
            "visibility_threshold": self.visibility_threshold,
            "base_policy": self.base_policy,
            "jitter": self.jitter,
            "seed": self.seed,
            "canvas_size": list(self.canvas_size) if self.canvas_size else None,
        }
        return json.dumps(payload, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ClutterSpec":
        payload = json.loads(text)
        canvas = payload.get("canvas_size")
        return cls(
            grid_size=int(payload["grid_size"]),
            visibility_threshold=float(payload.get("visibility_threshold", 0.25)),
            base_policy=payload.get("base_policy", "dataset_image"),
            jitter=bool(payload.get("jitter", False)),
            seed=int(payload.get("seed", 0)),
            canvas_size=tuple(canvas) if canvas else None,
        )


@dataclass(frozen=True)
class Placement:
    """One planned object rendering. cell_index -1 marks the base's own object."""

    class_id: int
    source_sample_id: str
    cell_index: int
    anchor: tuple[int, int]
    z_order: int
    total_pixels: int = 0
    visible_pixels: int = 0

    def __post_init__(self):
        if self.visible_pixels > self.total_pixels:
            raise ValidationError("visible_pixels cannot exceed total_pixels")

    @property
    def visible_fraction(self) -> float:
        return self.visible_pixels / self.total_pixels if self.total_pixels else 0.0


@dataclass(frozen=True)
class BaseRef:
    kind: str  # "sample" | "background" | "blank"
    sample_id: str | None = None
    background_index: int | None = None


@dataclass
class PlacedObject:
    """A placement with its mask geometry resolved onto the canvas.

    ``canvas_sl``/``src_sl`` are the matching canvas- and source-space slices
    of the clipped mask patch; both are None when the object landed fully
    off-canvas.
    """

    placement: Placement
    mask_patch: np.ndarray | None
    canvas_sl: tuple[slice, slice] | None
    src_sl: tuple[slice, slice] | None
    is_base: bool = False


@dataclass(frozen=True)
class SceneTimings:
    decode_ms: float
    transfer_ms: float
    visibility_ms: float

    @property
    def total_ms(self) -> float:
        return self.decode_ms + self.transfer_ms + self.visibility_ms


@dataclass(frozen=True)
class SceneResult:
    sample: AnnotatedSample
    base_ref: BaseRef
    planned: tuple[Placement, ...]
    survivors: tuple[Placement, ...]
    attribution: np.ndarray  # survivor index per pixel, -1 where base shows through
    timings: SceneTimings


def grid_centers(width: int, height: int, grid_size: int) -> list[tuple[int, int]]:
    """Centers of an M x M partition, row-major (top row first)."""
    m = grid_size
    if m < 1:
        raise ValidationError(f"grid_size must be >= 1, got {m}")
    if m > min(width, height):
        raise DegenerateGridError(
            f"grid {m}x{m} does not fit a {width}x{height} canvas"
        )
    centers = []
    for j in range(m):
        cy = int(np.floor((j + 0.5) * height / m + 0.5))
        for i in range(m):
            cx = int(np.floor((i + 0.5) * width / m + 0.5))
            centers.append((cx, cy))
    return centers


def derive_scene_seed(master_seed: int, scene_index: int) -> int:
    """Stable per-scene 64-bit seed; independent of worker assignment.

    The 0 component keeps scene streams disjoint from other streams derived
    from the same master seed (e.g. the feed sampler).
    """
    ss = np.random.SeedSequence([int(master_seed), 0, int(scene_index)])
    return int(ss.generate_state(1, np.uint64)[0])


def _draw_class_and_image(
    snapshot: RegistrySnapshot, rng: np.random.Generator
) -> tuple[int, str]:
    entries = snapshot.entries
    k = len(entries)
    for _ in range(k):
        entry = entries[int(rng.integers(k))]
        if entry.image_count > 0:
            image_id = entry.image_ids[int(rng.integers(entry.image_count))]
            return entry.class_id, image_id
    raise EmptyRegistryError("no class with source images after redraws")


def plan_scene(
    registry: RegistrySnapshot,
    provider: SampleProvider,
    spec: ClutterSpec,
    rng: np.random.Generator,
    backgrounds: list[RgbImage] | None = None,
) -> tuple[BaseRef, list[Placement]]:
    """Pick the base and one placement per grid cell, fully seed-determined."""
    if len(registry) == 0:
        raise EmptyRegistryError("registry is empty")
    if not any(e.image_count > 0 for e in registry.entries):
        raise EmptyRegistryError("registry has no class with source images")

    base_ref, base_dims = _choose_base(registry, provider, spec, rng, backgrounds)
    width, height = base_dims
    centers = grid_centers(width, height, spec.grid_size)

    placements: list[Placement] = []
    for cell, (cx, cy) in enumerate(centers):
        class_id, image_id = _draw_class_and_image(registry, rng)
        if spec.jitter:
            jx = width // (4 * spec.grid_size)
            jy = height // (4 * spec.grid_size)
            cx = int(np.clip(cx + rng.integers(-jx, jx + 1), 0, width - 1))
            cy = int(np.clip(cy + rng.integers(-jy, jy + 1), 0, height - 1))
        source = provider.get(image_id)
        total = int((source.labels.ids == class_id).sum())
        placements.append(
            Placement(
                class_id=class_id,
                source_sample_id=image_id,
                cell_index=cell,
                anchor=(cx, cy),
                z_order=cell,
                total_pixels=total,
            )
        )
    return base_ref, placements


def _choose_base(
    registry: RegistrySnapshot,
    provider: SampleProvider,
    spec: ClutterSpec,
    rng: np.random.Generator,
    backgrounds: list[RgbImage] | None,
) -> tuple[BaseRef, tuple[int, int]]:
    if spec.base_policy == "dataset_image":
        pool = registry.all_image_ids()
        if not pool:
            raise EmptyRegistryError("dataset_image base policy needs source images")
        sample_id = pool[int(rng.integers(len(pool)))]
        base = provider.get(sample_id)
        return BaseRef("sample", sample_id=sample_id), (base.width, base.height)
    if spec.base_policy == "background_pool":
        if not backgrounds:
            raise ConfigError("background_pool base policy but no backgrounds supplied")
        idx = int(rng.integers(len(backgrounds)))
        bg = backgrounds[idx]
        return BaseRef("background", background_index=idx), (bg.width, bg.height)
    return BaseRef("blank"), _blank_dims(registry, provider, spec)


def _blank_dims(
    registry: RegistrySnapshot, provider: SampleProvider, spec: ClutterSpec
) -> tuple[int, int]:
    if spec.canvas_size is not None:
        return spec.canvas_size
    pool = registry.all_image_ids()
    if not pool:
        raise EmptyRegistryError("blank base policy needs canvas_size or source images")
    first = provider.get(pool[0])
    return (first.width, first.height)


def _resolve_base_image(
    base_ref: BaseRef,
    registry: RegistrySnapshot,
    provider: SampleProvider,
    spec: ClutterSpec,
    backgrounds: list[RgbImage] | None,
) -> RgbImage:
    if base_ref.kind == "sample":
        return provider.get(base_ref.sample_id).image
    if base_ref.kind == "background":
        return backgrounds[base_ref.background_index]
    width, height = _blank_dims(registry, provider, spec)
    return RgbImage(np.zeros((height, width, 3), dtype=np.uint8))


def place_objects(
    placements: list[Placement],
    provider: SampleProvider,
    base_dims: tuple[int, int],
    base_ref: BaseRef | None = None,
) -> list[PlacedObject]:
    """Resolve placement geometry: translate masks so the tight-box center of
    each source object lands on its anchor, clipped to the canvas.

    When the base is a dataset sample, its own labeled regions join the scene
    as pseudo-placements below every grid placement, so the base's item stays
    part of the ground truth while anything pasted over it occludes it.
    """
    width, height = base_dims
    placed: list[PlacedObject] = []

    if base_ref is not None and base_ref.kind == "sample":
        base = provider.get(base_ref.sample_id)
        for k, class_id in enumerate(base.labels.class_ids()):
            region = base.labels.ids == class_id
            ys, xs = np.nonzero(region)
            anchor = (
                int((xs.min() + xs.max() + 1) // 2),
                int((ys.min() + ys.max() + 1) // 2),
            )
            pseudo = Placement(
                class_id=class_id,
                source_sample_id=base_ref.sample_id,
                cell_index=-1,
                anchor=anchor,
                z_order=-1 - k,
                total_pixels=int(region.sum()),
            )
            h = min(base.height, height)
            w = min(base.width, width)
            sl = (slice(0, h), slice(0, w))
            placed.append(
                PlacedObject(
                    placement=pseudo,
                    mask_patch=region[sl],
                    canvas_sl=sl,
                    src_sl=sl,
                    is_base=True,
                )
            )

    for p in placements:
        source = provider.get(p.source_sample_id)
        mask = source.labels.ids == p.class_id
        ys, xs = np.nonzero(mask)
        if ys.size == 0:
            placed.append(PlacedObject(p, None, None, None))
            continue
        x0, x1 = int(xs.min()), int(xs.max()) + 1
        y0, y1 = int(ys.min()), int(ys.max()) + 1
        cx, cy = (x0 + x1) // 2, (y0 + y1) // 2
        dx, dy = p.anchor[0] - cx, p.anchor[1] - cy
        # Clip the translated tight patch to the canvas.
        cx0, cx1 = max(x0 + dx, 0), min(x1 + dx, width)
        cy0, cy1 = max(y0 + dy, 0), min(y1 + dy, height)
        if cx0 >= cx1 or cy0 >= cy1:
            placed.append(PlacedObject(p, None, None, None))
            continue
        src_sl = (slice(cy0 - dy, cy1 - dy), slice(cx0 - dx, cx1 - dx))
        canvas_sl = (slice(cy0, cy1), slice(cx0, cx1))
        placed.append(PlacedObject(p, mask[src_sl], canvas_sl, src_sl))

    placed.sort(key=lambda po: po.placement.z_order)
    return placed


def _paint_top(
    placed: list[PlacedObject], alive: list[int], base_dims: tuple[int, int]
) -> np.ndarray:
    width, height = base_dims
    top = np.full((height, width), -1, dtype=np.int32)
    for idx in alive:  # ascending z: later paints occlude earlier ones
        po = placed[idx]
        if po.canvas_sl is None:
            continue
        patch = top[po.canvas_sl]
        patch[po.mask_patch] = idx
    return top


def simulate_visibility(
    placed: list[PlacedObject], base_dims: tuple[int, int], visibility_threshold: float
) -> tuple[list[PlacedObject], np.ndarray]:
    """Drop placements whose visible fraction is below the threshold.

    Dropping an object can re-expose the ones beneath it, so the z-buffer is
    recomputed until no placement falls below the threshold (at most one
    iteration per placement). Pixels pushed off-canvas count as occluded.
    Returns the survivors (with visible_pixels filled, z ascending) and the
    final per-pixel attribution of indices into ``placed``.
    """
    alive = list(range(len(placed)))
    top = _paint_top(placed, alive, base_dims)
    while True:
        counts = np.bincount(top[top >= 0].ravel(), minlength=len(placed))
        drops = []
        for idx in alive:
            total = placed[idx].placement.total_pixels
            if total == 0 or counts[idx] / total < visibility_threshold:
                drops.append(idx)
        if not drops:
            survivors = [
                replace_visible(placed[idx], int(counts[idx])) for idx in alive
            ]
            return survivors, top
        alive = [i for i in alive if i not in set(drops)]
        top = _paint_top(placed, alive, base_dims)


def replace_visible(po: PlacedObject, visible: int) -> PlacedObject:
    return PlacedObject(
        placement=replace(po.placement, visible_pixels=visible),
        mask_patch=po.mask_patch,
        canvas_sl=po.canvas_sl,
        src_sl=po.src_sl,
        is_base=po.is_base,
    )


def render_scene(
    base: RgbImage,
    survivors: list[PlacedObject],
    provider: SampleProvider,
) -> tuple[RgbImage, LabelMap, list[tuple[int, Box]]]:
    """Composite the survivors back to front and build exact ground truth.

    Every nonzero label pixel is owned by the topmost surviving object at
    that location; boxes are the tight bounds of each object's visible
    pixels, emitted in z order.
    """
    image, labels, boxes, _ = _render_scene(base, survivors, provider)
    return image, labels, boxes


def _render_scene(
    base: RgbImage,
    survivors: list[PlacedObject],
    provider: SampleProvider,
) -> tuple[RgbImage, LabelMap, list[tuple[int, Box]], np.ndarray]:
    canvas = base.data.copy()
    labels = np.zeros(canvas.shape[:2], dtype=np.uint16)
    ordered = sorted(survivors, key=lambda po: po.placement.z_order)

    top = np.full(canvas.shape[:2], -1, dtype=np.int32)
    for idx, po in enumerate(ordered):
        if po.canvas_sl is None:
            continue
        if not po.is_base:
            src = provider.get(po.placement.source_sample_id).image.data
            region = canvas[po.canvas_sl]
            region[po.mask_patch] = src[po.src_sl][po.mask_patch]
        lab_region = labels[po.canvas_sl]
        lab_region[po.mask_patch] = np.uint16(po.placement.class_id)
        top_region = top[po.canvas_sl]
        top_region[po.mask_patch] = idx

    boxes: list[tuple[int, Box]] = []
    for idx, po in enumerate(ordered):
        ys, xs = np.nonzero(top == idx)
        if ys.size == 0:
            continue
        boxes.append(
            (
                po.placement.class_id,
                Box(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1),
            )
        )
    return RgbImage(canvas), LabelMap(labels), boxes, top


def synthesize_detailed(
    registry: RegistrySnapshot,
    provider: SampleProvider,
    spec: ClutterSpec,
    rng: np.random.Generator | None = None,
    *,
    seed: int | None = None,
    backgrounds: list[RgbImage] | None = None,
) -> SceneResult:
    """Full plan -> drop -> render run with per-phase timings."""
    if seed is None:
        seed = spec.seed
    if rng is None:
        rng = np.random.default_rng(seed)

    timing = TimingProvider(provider)
    memo = MemoProvider(timing)

    t0 = time.perf_counter()
    base_ref, planned = plan_scene(registry, memo, spec, rng, backgrounds)
    base = _resolve_base_image(base_ref, registry, memo, spec, backgrounds)
    base_dims = (base.width, base.height)
    placed = place_objects(planned, memo, base_dims, base_ref)
    t_placed = time.perf_counter()

    survivors, _ = simulate_visibility(placed, base_dims, spec.visibility_threshold)
    t_visible = time.perf_counter()

    image, labels, boxes, top = _render_scene(base, survivors, memo)
    t_done = time.perf_counter()

    decode_ms = timing.seconds * 1000.0
    visibility_ms = (t_visible - t_placed) * 1000.0
    # Object transfer = planning/geometry + pixel copy, minus decode time.
    transfer_ms = max(
        ((t_placed - t0) + (t_done - t_visible)) * 1000.0 - decode_ms, 0.0
    )

    sample = AnnotatedSample(
        image=image,
        labels=labels,
        boxes=tuple(boxes),
        source="synthesized",
        seed=seed,
    )
    survivors_sorted = sorted(survivors, key=lambda po: po.placement.z_order)
    return SceneResult(
        sample=sample,
        base_ref=base_ref,
        planned=tuple(planned),
        survivors=tuple(po.placement for po in survivors_sorted),
        attribution=top,
        timings=SceneTimings(decode_ms, transfer_ms, visibility_ms),
    )


def synthesize(
    registry: RegistrySnapshot,
    provider: SampleProvider,
    spec: ClutterSpec,
    rng: np.random.Generator | None = None,
    *,
    seed: int | None = None,
    backgrounds: list[RgbImage] | None = None,
) -> AnnotatedSample:
    """Synthesize one cluttered scene with exact ground truth."""
    return synthesize_detailed(
        registry, provider, spec, rng, seed=seed, backgrounds=backgrounds
    ).sample
