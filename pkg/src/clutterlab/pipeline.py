"""Concurrent online data pipeline: acquisition -> labeling -> clutter -> feed.

Four stages run as threads connected by bounded queues carrying immutable
samples:

  acquisition  replays images (directory replay or an in-process push
               source) together with their human-provided item names;
  labeling     runs the mask and box predictors, fuses them under the
               configured priority policy, and publishes the labeled sample
               to the shared pool;
  clutter      a worker pool that synthesizes cluttered scenes from the
               pool's current snapshot, one deterministic RNG stream per
               global scene index;
  feed         samples single-instance vs synthesized at the configured
               ratio and delivers batches to the child consumer.

Shutdown is ordered: acquisition halts first, labeling drains its queue
fully, clutter workers finish their current scene, and the feed drains both
queues before the run reports. Deadlock cannot occur because every blocking
queue operation is a bounded wait that rechecks stage liveness, and no stage
ever waits on a downstream stage to make progress.

New items may be registered while the pipeline runs; a planner snapshot
includes a class as soon as its first labeled image exists, and classes are
never removed, so earlier items keep appearing in synthesized scenes.
"""

from __future__ import annotations

import json
import queue
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .adapters import BoxPredictor, ChildConsumer, MaskPredictor
from .dataset_io import load_registry, load_sample, read_manifest, save_sample
from .errors import ConfigError, ValidationError
from .fusion import FusionPolicy, assign_label, box_from_mask, fuse
from .synthesis import ClutterSpec, derive_scene_seed, synthesize_detailed
from .types import AnnotatedSample, ClassRegistry, RgbImage

_POLL_S = 0.02


@dataclass(frozen=True)
class PipelineConfig:
    acquisition_dir: str | None = None
    images_per_revolution: int = 60
    paced: bool = False
    labeling_policy: FusionPolicy = field(default_factory=lambda: FusionPolicy(1, 1))
    clutter_workers: int = 24
    grid_sizes: tuple[int, ...] = (3, 4, 5)
    visibility_threshold: float = 0.25
    base_policy: str = "dataset_image"
    jitter: bool = False
    queue_capacity: int = 64
    single_to_multi_ratio: tuple[int, int] = (1, 3)
    prefetch: bool = True
    spool_dir: str | None = None
    consume_once: bool = True
    seed: int = 0
    max_scenes: int | None = None
    mask_predictor: str = "chroma_oracle"
    box_predictor: str = "chroma_oracle"
    predictor_options: dict = field(default_factory=dict)
    child_service_time: float = 0.0

    def __post_init__(self):
        if self.clutter_workers < 1:
            raise ConfigError("clutter_workers must be >= 1")
        if self.queue_capacity < 1:
            raise ConfigError("queue_capacity must be >= 1")
        s, m = self.single_to_multi_ratio
        if s < 0 or m < 0 or (s + m) == 0:
            raise ConfigError(f"bad single_to_multi_ratio {self.single_to_multi_ratio}")
        if not self.grid_sizes:
            raise ConfigError("grid_sizes must be nonempty")
        if not self.prefetch and not self.spool_dir:
            raise ConfigError("prefetch=false requires spool_dir")
        object.__setattr__(self, "grid_sizes", tuple(self.grid_sizes))
        object.__setattr__(self, "single_to_multi_ratio", tuple(self.single_to_multi_ratio))

    @property
    def single_probability(self) -> float:
        s, m = self.single_to_multi_ratio
        return s / (s + m)

    def to_json(self) -> str:
        payload = {
            "acquisition_dir": self.acquisition_dir,
            "images_per_revolution": self.images_per_revolution,
            "paced": self.paced,
            "labeling_policy": [self.labeling_policy.priority_mask, self.labeling_policy.priority_box],
            "clutter_workers": self.clutter_workers,
            "grid_sizes": list(self.grid_sizes),
            "visibility_threshold": self.visibility_threshold,
            "base_policy": self.base_policy,
            "jitter": self.jitter,
            "queue_capacity": self.queue_capacity,
            "single_to_multi_ratio": list(self.single_to_multi_ratio),
            "prefetch": self.prefetch,
            "spool_dir": self.spool_dir,
            "consume_once": self.consume_once,
            "seed": self.seed,
            "max_scenes": self.max_scenes,
            "mask_predictor": self.mask_predictor,
            "box_predictor": self.box_predictor,
            "predictor_options": self.predictor_options,
            "child_service_time": self.child_service_time,
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        payload = json.loads(text)
        policy = payload.get("labeling_policy", [1, 1])
        return cls(
            acquisition_dir=payload.get("acquisition_dir"),
            images_per_revolution=int(payload.get("images_per_revolution", 60)),
            paced=bool(payload.get("paced", False)),
            labeling_policy=FusionPolicy(int(policy[0]), int(policy[1])),
            clutter_workers=int(payload.get("clutter_workers", 24)),
            grid_sizes=tuple(payload.get("grid_sizes", (3, 4, 5))),
            visibility_threshold=float(payload.get("visibility_threshold", 0.25)),
            base_policy=payload.get("base_policy", "dataset_image"),
            jitter=bool(payload.get("jitter", False)),
            queue_capacity=int(payload.get("queue_capacity", 64)),
            single_to_multi_ratio=tuple(payload.get("single_to_multi_ratio", (1, 3))),
            prefetch=bool(payload.get("prefetch", True)),
            spool_dir=payload.get("spool_dir"),
            consume_once=bool(payload.get("consume_once", True)),
            seed=int(payload.get("seed", 0)),
            max_scenes=payload.get("max_scenes"),
            mask_predictor=payload.get("mask_predictor", "chroma_oracle"),
            box_predictor=payload.get("box_predictor", "chroma_oracle"),
            predictor_options=payload.get("predictor_options", {}),
            child_service_time=float(payload.get("child_service_time", 0.0)),
        )


class FeedSampler:
    """Seeded Bernoulli stream deciding single-instance vs synthesized
    delivery at the configured ratio; the feed stage draws from exactly
    this stream."""

    def __init__(self, seed: int, single_to_multi_ratio: tuple[int, int] = (1, 3)):
        s, m = single_to_multi_ratio
        if s < 0 or m < 0 or s + m == 0:
            raise ConfigError(f"bad single_to_multi_ratio {single_to_multi_ratio}")
        self._p_single = s / (s + m)
        self._rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))

    def next_is_single(self) -> bool:
        return bool(self._rng.random() < self._p_single)


@dataclass(frozen=True)
class AcquisitionFrame:
    item_name: str
    image: RgbImage
    frame_id: str


class DirectoryReplaySource:
    """Replays a dataset directory as a camera feed: images plus item names,
    ground truths ignored. Paced mode simulates the physical acquisition
    rate (one revolution of images_per_revolution frames per ~10 s)."""

    def __init__(self, directory: str | Path, images_per_revolution: int = 60, paced: bool = False):
        self.directory = Path(directory)
        self.images_per_revolution = max(1, images_per_revolution)
        self.paced = paced
        self._registry = load_registry(self.directory)

    def frames(self, stop: threading.Event) -> Iterator[AcquisitionFrame]:
        interval = 10.0 / self.images_per_revolution
        for rec in read_manifest(self.directory):
            if stop.is_set():
                return
            if rec.get("source", "acquired") == "synthesized":
                continue
            class_ids = rec.get("class_ids") or []
            if not class_ids:
                continue
            sample = load_sample(rec["id"], self.directory)
            name = self._registry.name_of(int(class_ids[0]))
            yield AcquisitionFrame(item_name=name, image=sample.image, frame_id=rec["id"])
            if self.paced:
                time.sleep(interval)


class PushSource:
    """In-process source fed by the application (or a test) while the
    pipeline runs; close() ends acquisition once the queue drains."""

    def __init__(self):
        self._queue: queue.Queue[AcquisitionFrame | None] = queue.Queue()
        self._closed = threading.Event()
        self._counter = 0
        self._lock = threading.Lock()

    def add_item(self, item_name: str, images: list[RgbImage]) -> list[str]:
        ids = []
        for image in images:
            with self._lock:
                frame_id = f"{item_name}-{self._counter:06d}"
                self._counter += 1
            self._queue.put(AcquisitionFrame(item_name, image, frame_id))
            ids.append(frame_id)
        return ids

    def close(self):
        self._closed.set()

    def frames(self, stop: threading.Event) -> Iterator[AcquisitionFrame]:
        while not stop.is_set():
            try:
                frame = self._queue.get(timeout=_POLL_S)
            except queue.Empty:
                if self._closed.is_set():
                    return
                continue
            yield frame


@dataclass
class StageMetrics:
    processed: int = 0
    defects: int = 0
    total_latency_s: float = 0.0
    elapsed_s: float = 0.0
    queue_depth: int = 0

    @property
    def mean_latency_ms(self) -> float:
        return (self.total_latency_s / self.processed * 1000.0) if self.processed else 0.0

    @property
    def throughput_per_s(self) -> float:
        return self.processed / self.elapsed_s if self.elapsed_s > 0 else 0.0

    def to_dict(self) -> dict:
        return {
            "processed": self.processed,
            "defects": self.defects,
            "mean_latency_ms": self.mean_latency_ms,
            "throughput_per_s": self.throughput_per_s,
            "queue_depth": self.queue_depth,
        }


class _Recorder:
    def __init__(self):
        self._lock = threading.Lock()
        self.processed = 0
        self.defects = 0
        self.total_latency = 0.0
        self.started: float | None = None
        self.finished: float | None = None

    def begin(self):
        with self._lock:
            if self.started is None:
                self.started = time.perf_counter()

    def observe(self, latency_s: float, defect: bool = False):
        with self._lock:
            if self.started is None:
                self.started = time.perf_counter()
            self.processed += 1
            self.total_latency += latency_s
            if defect:
                self.defects += 1
            self.finished = time.perf_counter()

    def defect_only(self):
        with self._lock:
            self.defects += 1

    def snapshot(self, queue_depth: int = 0) -> StageMetrics:
        with self._lock:
            elapsed = 0.0
            if self.started is not None:
                elapsed = (self.finished or time.perf_counter()) - self.started
            return StageMetrics(
                processed=self.processed,
                defects=self.defects,
                total_latency_s=self.total_latency,
                elapsed_s=elapsed,
                queue_depth=queue_depth,
            )


@dataclass
class SceneOpMetrics:
    scenes: int = 0
    decode_ms: float = 0.0
    transfer_ms: float = 0.0
    visibility_ms: float = 0.0

    def to_dict(self) -> dict:
        n = max(self.scenes, 1)
        return {
            "scenes": self.scenes,
            "mean_decode_ms": self.decode_ms / n,
            "mean_transfer_ms": self.transfer_ms / n,
            "mean_visibility_ms": self.visibility_ms / n,
        }


@dataclass
class PipelineReport:
    stages: dict[str, StageMetrics]
    scene_ops: SceneOpMetrics
    singles_delivered: int
    multis_delivered: int
    duplicate_deliveries: int
    elapsed_s: float

    def to_dict(self) -> dict:
        return {
            "stages": {name: m.to_dict() for name, m in self.stages.items()},
            "scene_ops": self.scene_ops.to_dict(),
            "feed": {
                "singles_delivered": self.singles_delivered,
                "multis_delivered": self.multis_delivered,
                "duplicate_deliveries": self.duplicate_deliveries,
                "multi_fraction": (
                    self.multis_delivered / (self.singles_delivered + self.multis_delivered)
                    if (self.singles_delivered + self.multis_delivered)
                    else 0.0
                ),
            },
            "elapsed_s": self.elapsed_s,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def format_table(self) -> str:
        rows = [("stage", "processed", "mean ms", "items/s", "queue", "defects")]
        for name, m in self.stages.items():
            rows.append(
                (
                    name,
                    str(m.processed),
                    f"{m.mean_latency_ms:.2f}",
                    f"{m.throughput_per_s:.1f}",
                    str(m.queue_depth),
                    str(m.defects),
                )
            )
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(c.ljust(widths[i]) for i, c in enumerate(r)) for r in rows]
        ops = self.scene_ops.to_dict()
        lines.append(
            "scene ops (mean ms): "
            f"decode {ops['mean_decode_ms']:.2f} | "
            f"transfer {ops['mean_transfer_ms']:.2f} | "
            f"visibility {ops['mean_visibility_ms']:.2f}"
        )
        lines.append(
            f"feed: singles {self.singles_delivered}, multis {self.multis_delivered}, "
            f"duplicates {self.duplicate_deliveries}"
        )
        return "\n".join(lines)


class OnlinePool:
    """Labeled single-instance samples shared between labeling and the
    clutter workers. With prefetch the decoded samples stay in RAM; without
    it they round-trip through the spool directory on every access."""

    def __init__(self, registry: ClassRegistry, prefetch: bool = True,
                 spool_dir: str | Path | None = None):
        self.registry = registry
        self.prefetch = prefetch
        self.spool_dir = Path(spool_dir) if spool_dir else None
        if not prefetch and self.spool_dir is None:
            raise ConfigError("an OnlinePool without prefetch needs a spool directory")
        self._lock = threading.Lock()
        self._samples: dict[str, AnnotatedSample] = {}
        self._ids: list[str] = []

    def add(self, sample_id: str, sample: AnnotatedSample, class_id: int) -> None:
        if self.spool_dir is not None:
            save_sample(sample, self.spool_dir, sample_id)
        with self._lock:
            if self.prefetch:
                self._samples[sample_id] = sample
            self._ids.append(sample_id)
        # Publish to planners only after the sample itself is readable.
        self.registry.add_source(class_id, sample_id)

    def get(self, sample_id: str) -> AnnotatedSample:
        if self.prefetch:
            with self._lock:
                sample = self._samples.get(sample_id)
            if sample is not None:
                return sample
        return load_sample(sample_id, self.spool_dir)

    def sample_ids(self) -> tuple[str, ...]:
        with self._lock:
            return tuple(self._ids)

    def random_labeled(self, rng: np.random.Generator) -> AnnotatedSample | None:
        with self._lock:
            if not self._ids:
                return None
            sample_id = self._ids[int(rng.integers(len(self._ids)))]
        return self.get(sample_id)

    def __len__(self) -> int:
        with self._lock:
            return len(self._ids)


def register_item(registry: ClassRegistry, name: str) -> int:
    """Allocate a class id for a new item while the pipeline runs. The item
    joins synthesized scenes once its first labeled image lands in the pool;
    earlier items keep appearing (classes are never removed)."""
    return registry.register(name)


class PipelineRun:
    """One live pipeline; construct, ``start()``, then ``stop()``/``join()``."""

    def __init__(self, config: PipelineConfig, mask_pred: MaskPredictor,
                 box_pred: BoxPredictor, child: ChildConsumer,
                 source=None, registry: ClassRegistry | None = None):
        self.config = config
        self.mask_pred = mask_pred
        self.box_pred = box_pred
        self.child = child
        if source is None:
            if config.acquisition_dir is None:
                raise ConfigError("no acquisition source: set acquisition_dir or pass one")
            source = DirectoryReplaySource(
                config.acquisition_dir, config.images_per_revolution, config.paced
            )
        self.source = source
        self.registry = registry if registry is not None else ClassRegistry()
        self.pool = OnlinePool(self.registry, prefetch=config.prefetch, spool_dir=config.spool_dir)

        cap = config.queue_capacity
        self.q_raw: queue.Queue[AcquisitionFrame] = queue.Queue(maxsize=cap)
        self.q_single: queue.Queue[AnnotatedSample] = queue.Queue(maxsize=cap)
        self.q_multi: queue.Queue[tuple[int, AnnotatedSample]] = queue.Queue(maxsize=cap)

        self.stop_event = threading.Event()
        self._acquisition_done = threading.Event()
        self._labeling_done = threading.Event()
        self._clutter_done = threading.Event()
        self._feed_done = threading.Event()

        self._rec = {name: _Recorder() for name in ("acquisition", "labeling", "clutter", "feed")}
        self._scene_ops = SceneOpMetrics()
        self._scene_ops_lock = threading.Lock()
        self._scene_counter = 0
        self._scene_lock = threading.Lock()
        self._singles = 0
        self._multis = 0
        self._duplicates = 0
        self._delivered_scenes: set[int] = set()
        self._error: BaseException | None = None
        self._error_stage: str | None = None
        self._threads: list[threading.Thread] = []
        self._started_at: float | None = None
        self._finished_at: float | None = None

    # -- lifecycle ---------------------------------------------------------

    def start(self):
        if self._threads:
            raise RuntimeError("pipeline already started")
        self._started_at = time.perf_counter()
        workers = [
            threading.Thread(target=self._guard, args=("acquisition", self._run_acquisition),
                             name="acquisition", daemon=True),
            threading.Thread(target=self._guard, args=("labeling", self._run_labeling),
                             name="labeling", daemon=True),
        ]
        clutter_threads = [
            threading.Thread(target=self._guard, args=("clutter", self._run_clutter_worker),
                             name=f"clutter-{i}", daemon=True)
            for i in range(self.config.clutter_workers)
        ]
        self._clutter_alive = len(clutter_threads)
        self._clutter_alive_lock = threading.Lock()
        feed = threading.Thread(target=self._guard, args=("feed", self._run_feed),
                                name="feed", daemon=True)
        self._threads = workers + clutter_threads + [feed]
        for t in self._threads:
            t.start()

    def stop(self):
        self.stop_event.set()

    def join(self, timeout: float | None = None) -> bool:
        deadline = None if timeout is None else time.monotonic() + timeout
        for t in self._threads:
            remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
            t.join(remaining)
            if t.is_alive():
                return False
        if self._finished_at is None:
            self._finished_at = time.perf_counter()
        if self._error is not None:
            raise RuntimeError(f"pipeline stage {self._error_stage!r} failed") from self._error
        return True

    def register_item(self, name: str) -> int:
        return register_item(self.registry, name)

    def _guard(self, stage: str, fn):
        try:
            fn()
        except BaseException as exc:  # surface the stage identity, stop the run
            if self._error is None:
                self._error = exc
                self._error_stage = stage
            self.stop_event.set()
            self._acquisition_done.set()
            self._labeling_done.set()
            self._clutter_done.set()
            self._feed_done.set()

    # -- stages ------------------------------------------------------------

    def _put(self, q: queue.Queue, item, abandon: threading.Event | None = None) -> bool:
        """Bounded-queue put that stays responsive to shutdown; returns False
        if the item was abandoned because the run is over."""
        while True:
            try:
                q.put(item, timeout=_POLL_S)
                return True
            except queue.Full:
                if abandon is not None and abandon.is_set():
                    return False

    def _run_acquisition(self):
        rec = self._rec["acquisition"]
        rec.begin()
        t_prev = time.perf_counter()
        for frame in self.source.frames(self.stop_event):
            if self.stop_event.is_set():
                break
            if not self._put(self.q_raw, frame, abandon=self._labeling_done):
                break
            now = time.perf_counter()
            rec.observe(now - t_prev)
            t_prev = now
        self._acquisition_done.set()

    def _run_labeling(self):
        rec = self._rec["labeling"]
        rec.begin()
        counter = 0
        while True:
            try:
                frame = self.q_raw.get(timeout=_POLL_S)
            except queue.Empty:
                if self._acquisition_done.is_set():
                    break
                continue
            t0 = time.perf_counter()
            sample, defect = self._label_frame(frame, counter)
            counter += 1
            if sample is None:
                rec.observe(time.perf_counter() - t0, defect=True)
                continue
            rec.observe(time.perf_counter() - t0, defect=defect)
            self._put(self.q_single, sample, abandon=self._feed_done)
        self._labeling_done.set()

    def _label_frame(self, frame: AcquisitionFrame, counter: int):
        """Predict, fuse, and publish one frame. Returns (sample | None, defect)."""
        class_id = self.registry.ensure(frame.item_name)
        try:
            mask = self.mask_pred.predict_mask(frame.image)
            boxes = self.box_pred.predict_boxes(frame.image)
            policy = self.config.labeling_policy
            if boxes:
                box = max(boxes, key=lambda b: b.area)
            elif policy.priority_mask > policy.priority_box:
                box = box_from_mask(mask)  # box ignored by the mask-only rule
            else:
                return None, True
            fused = fuse(mask, box, policy)
            labels, box_record = assign_label(fused, class_id, self.registry)
            sample = AnnotatedSample(
                image=frame.image, labels=labels, boxes=(box_record,), source="acquired"
            )
        except ValidationError:
            return None, True
        sample_id = f"acq{counter:06d}"
        self.pool.add(sample_id, sample, class_id)
        return sample, False

    def _next_scene_index(self) -> int | None:
        with self._scene_lock:
            if self.config.max_scenes is not None and self._scene_counter >= self.config.max_scenes:
                return None
            idx = self._scene_counter
            self._scene_counter += 1
            return idx

    def _run_clutter_worker(self):
        rec = self._rec["clutter"]
        cfg = self.config
        backgrounds = None
        while not self.stop_event.is_set():
            snapshot = self.registry.snapshot()
            if not any(e.image_count > 0 for e in snapshot.entries):
                if self._labeling_done.is_set():
                    break
                time.sleep(_POLL_S)
                continue
            idx = self._next_scene_index()
            if idx is None:
                break
            t0 = time.perf_counter()
            seed = derive_scene_seed(cfg.seed, idx)
            rng = np.random.default_rng(seed)
            grid = cfg.grid_sizes[int(rng.integers(len(cfg.grid_sizes)))]
            spec = ClutterSpec(
                grid_size=grid,
                visibility_threshold=cfg.visibility_threshold,
                base_policy=cfg.base_policy,
                jitter=cfg.jitter,
                seed=seed,
            )
            result = synthesize_detailed(
                snapshot, self.pool, spec, rng, seed=seed, backgrounds=backgrounds
            )
            with self._scene_ops_lock:
                self._scene_ops.scenes += 1
                self._scene_ops.decode_ms += result.timings.decode_ms
                self._scene_ops.transfer_ms += result.timings.transfer_ms
                self._scene_ops.visibility_ms += result.timings.visibility_ms
            delivered = self._put(self.q_multi, (idx, result.sample), abandon=self._feed_done)
            rec.observe(time.perf_counter() - t0)
            if not delivered:
                break
        with self._clutter_alive_lock:
            self._clutter_alive -= 1
            if self._clutter_alive == 0:
                self._clutter_done.set()

    def _run_feed(self):
        rec = self._rec["feed"]
        cfg = self.config
        sampler = FeedSampler(cfg.seed, cfg.single_to_multi_ratio)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
        retained: list[tuple[int, AnnotatedSample]] = []
        # A drawn decision persists until it is actually delivered, so the
        # delivered single/multi ratio tracks the configured one exactly even
        # when one of the two sources is momentarily empty.
        want_single: bool | None = None
        while True:
            multi_exhausted = self._clutter_done.is_set() and self.q_multi.empty()
            if multi_exhausted and self._feed_finished(retained):
                break
            if want_single is None:
                want_single = sampler.next_is_single()
            t0 = time.perf_counter()
            if want_single:
                sample = self._take_single(rng)
                if sample is None:
                    if self._labeling_done.is_set() and len(self.pool) == 0:
                        want_single = None  # no single will ever exist
                    continue
                self.child.consume([sample])
                self._singles += 1
                want_single = None
                rec.observe(time.perf_counter() - t0)
            else:
                item = self._take_multi(rng, retained)
                if item is None:
                    continue
                idx, sample = item
                self.child.consume([sample])
                self._multis += 1
                want_single = None
                if idx in self._delivered_scenes:
                    self._duplicates += 1
                elif cfg.consume_once:
                    self._delivered_scenes.add(idx)
                rec.observe(time.perf_counter() - t0)
        # Orderly drain: deliver labeled singles still waiting so none is lost.
        while True:
            try:
                sample = self.q_single.get_nowait()
            except queue.Empty:
                if self._labeling_done.is_set():
                    break
                time.sleep(_POLL_S)
                continue
            t0 = time.perf_counter()
            self.child.consume([sample])
            self._singles += 1
            rec.observe(time.perf_counter() - t0)
        self._feed_done.set()

    def _feed_finished(self, retained: list) -> bool:
        """Once no fresh scene can arrive: consume-once runs are over; replay
        runs continue cycling retained scenes until stopped (or, for bounded
        runs, until the scene budget has been delivered)."""
        cfg = self.config
        if cfg.consume_once or self.stop_event.is_set() or not retained:
            return True
        return cfg.max_scenes is not None and self._multis >= cfg.max_scenes

    def _take_single(self, rng: np.random.Generator) -> AnnotatedSample | None:
        try:
            return self.q_single.get_nowait()
        except queue.Empty:
            pass
        sample = self.pool.random_labeled(rng)
        if sample is not None:
            return sample
        time.sleep(_POLL_S)
        return None

    def _take_multi(self, rng, retained):
        try:
            item = self.q_multi.get(timeout=_POLL_S)
            if not self.config.consume_once:
                retained.append(item)
            return item
        except queue.Empty:
            if not self.config.consume_once and retained:
                return retained[int(rng.integers(len(retained)))]
            return None

    # -- reporting ---------------------------------------------------------

    def metrics_snapshot(self) -> PipelineReport:
        stages = {
            "acquisition": self._rec["acquisition"].snapshot(self.q_raw.qsize()),
            "labeling": self._rec["labeling"].snapshot(self.q_single.qsize()),
            "clutter": self._rec["clutter"].snapshot(self.q_multi.qsize()),
            "feed": self._rec["feed"].snapshot(0),
        }
        with self._scene_ops_lock:
            ops = replace(self._scene_ops)
        elapsed = 0.0
        if self._started_at is not None:
            elapsed = (self._finished_at or time.perf_counter()) - self._started_at
        return PipelineReport(
            stages=stages,
            scene_ops=ops,
            singles_delivered=self._singles,
            multis_delivered=self._multis,
            duplicate_deliveries=self._duplicates,
            elapsed_s=elapsed,
        )


def run_pipeline(
    config: PipelineConfig,
    mask_pred: MaskPredictor,
    box_pred: BoxPredictor,
    child: ChildConsumer,
    stop: threading.Event | None = None,
    source=None,
    registry: ClassRegistry | None = None,
) -> PipelineReport:
    """Run the four stages to completion and return the per-stage metrics."""
    run = PipelineRun(config, mask_pred, box_pred, child, source=source, registry=registry)
    if stop is not None:
        # Mirror an external stop signal into the run.
        def _watch():
            stop.wait()
            run.stop()

        threading.Thread(target=_watch, daemon=True).start()
    run.start()
    run.join()
    return run.metrics_snapshot()
