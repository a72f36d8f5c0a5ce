"""Batch scene synthesis over a static corpus, with an optional process pool.

Scene i is generated from an RNG stream derived from (master seed, i), so the
output is byte-identical whether one worker or twenty-four produce it; worker
count only changes wall-clock time. Workers encode PNGs themselves and the
parent writes files in scene order, which keeps the manifest and ids stable
too.
"""

from __future__ import annotations

import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset_io import (
    CLASSES_NAME,
    EncodedSample,
    encode_sample,
    load_registry,
    prefetch_all,
    write_encoded,
)
from .synthesis import ClutterSpec, derive_scene_seed, synthesize_detailed
from .types import RegistrySnapshot


@dataclass(frozen=True)
class SceneSummary:
    sample_id: str
    seed: int
    grid_size: int
    planned_objects: int
    surviving_objects: int

    def to_dict(self) -> dict:
        return {
            "id": self.sample_id,
            "seed": self.seed,
            "grid_size": self.grid_size,
            "planned_objects": self.planned_objects,
            "surviving_objects": self.surviving_objects,
        }


# Per-process state for pool workers (populated by _init_worker).
_STATE: dict = {}


def _init_worker(dataset_dir: str, spec_json: str, master_seed: int,
                 grid_sizes: tuple[int, ...] | None, encode: bool) -> None:
    registry = load_registry(dataset_dir)
    _STATE["snapshot"] = registry.snapshot()
    _STATE["cache"] = prefetch_all(dataset_dir)
    _STATE["spec"] = ClutterSpec.from_json(spec_json)
    _STATE["master_seed"] = master_seed
    _STATE["grid_sizes"] = grid_sizes
    _STATE["encode"] = encode


def _make_scene(index: int) -> tuple[int, EncodedSample | None, SceneSummary]:
    snapshot: RegistrySnapshot = _STATE["snapshot"]
    spec: ClutterSpec = _STATE["spec"]
    seed = derive_scene_seed(_STATE["master_seed"], index)
    rng = np.random.default_rng(seed)
    grids = _STATE["grid_sizes"]
    if grids:
        spec = ClutterSpec(
            grid_size=grids[int(rng.integers(len(grids)))],
            visibility_threshold=spec.visibility_threshold,
            base_policy=spec.base_policy,
            jitter=spec.jitter,
            seed=spec.seed,
            canvas_size=spec.canvas_size,
        )
    result = synthesize_detailed(snapshot, _STATE["cache"], spec, rng, seed=seed)
    sample_id = f"{index:06d}"
    encoded = encode_sample(result.sample, sample_id) if _STATE["encode"] else None
    summary = SceneSummary(
        sample_id=sample_id,
        seed=seed,
        grid_size=spec.grid_size,
        planned_objects=len(result.planned),
        surviving_objects=len(result.survivors),
    )
    return index, encoded, summary


def synthesize_batch(
    dataset_dir: str | Path,
    spec: ClutterSpec,
    count: int,
    master_seed: int,
    workers: int = 1,
    out_dir: str | Path | None = None,
    grid_sizes: tuple[int, ...] | None = None,
) -> list[SceneSummary]:
    """Generate ``count`` scenes; write them to ``out_dir`` when given.

    ``grid_sizes`` overrides the spec's fixed grid with a per-scene draw.
    """
    dataset_dir = str(dataset_dir)
    encode = out_dir is not None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        src_classes = Path(dataset_dir) / CLASSES_NAME
        if src_classes.exists():
            shutil.copyfile(src_classes, out_dir / CLASSES_NAME)

    summaries: list[SceneSummary] = []
    if workers <= 1:
        _init_worker(dataset_dir, spec.to_json(), master_seed, grid_sizes, encode)
        try:
            for i in range(count):
                _, encoded, summary = _make_scene(i)
                if encoded is not None:
                    write_encoded(encoded, out_dir)
                summaries.append(summary)
        finally:
            _STATE.clear()
        return summaries

    pending: dict[int, tuple[EncodedSample | None, SceneSummary]] = {}
    next_to_write = 0
    with ProcessPoolExecutor(
        max_workers=workers,
        initializer=_init_worker,
        initargs=(dataset_dir, spec.to_json(), master_seed, grid_sizes, encode),
    ) as pool:
        for index, encoded, summary in pool.map(_make_scene, range(count), chunksize=4):
            pending[index] = (encoded, summary)
            while next_to_write in pending:
                enc, summ = pending.pop(next_to_write)
                if enc is not None:
                    write_encoded(enc, out_dir)
                summaries.append(summ)
                next_to_write += 1
    return summaries


def measure_pool_throughput(
    dataset_dir: str | Path,
    spec: ClutterSpec,
    scenes: int,
    master_seed: int,
    workers: int,
) -> float:
    """Scenes per second through the worker pool (no disk writes)."""
    t0 = time.perf_counter()
    synthesize_batch(dataset_dir, spec, scenes, master_seed, workers=workers)
    return scenes / (time.perf_counter() - t0)
