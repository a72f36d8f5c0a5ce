"""Per-grid-size timing of scene synthesis, disk-read vs prefetched-in-RAM.

Both modes synthesize the same seeded scenes, so the only difference is
whether source samples are decoded per scene or served from the prefetch
cache. The report carries mean image-decoding / object-transfer /
visibility-check times per operation plus totals for both modes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset_io import DiskSampleStore, prefetch_all, load_registry
from .synthesis import ClutterSpec, synthesize_detailed


@dataclass(frozen=True)
class BenchModeStats:
    decode_ms: float
    transfer_ms: float
    visibility_ms: float
    total_ms: float

    def to_dict(self) -> dict:
        return {
            "decode_ms": self.decode_ms,
            "transfer_ms": self.transfer_ms,
            "visibility_ms": self.visibility_ms,
            "total_ms": self.total_ms,
        }


@dataclass(frozen=True)
class BenchRow:
    grid_size: int
    disk: BenchModeStats | None
    ram: BenchModeStats | None

    def to_dict(self) -> dict:
        out: dict = {"grid_size": self.grid_size}
        if self.disk is not None:
            out["disk"] = self.disk.to_dict()
            out["total_disk_ms"] = self.disk.total_ms
        if self.ram is not None:
            out["ram"] = self.ram.to_dict()
            out["total_ram_ms"] = self.ram.total_ms
        return out


@dataclass(frozen=True)
class BenchReport:
    rows: tuple[BenchRow, ...]
    repetitions: int
    corpus_size: int

    def to_dict(self) -> dict:
        return {
            "repetitions": self.repetitions,
            "corpus_size": self.corpus_size,
            "rows": [r.to_dict() for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def format_table(self) -> str:
        header = (
            "grid",
            "decode ms",
            "transfer ms",
            "visibility ms",
            "total disk ms",
            "total RAM ms",
        )
        rows = [header]
        for r in self.rows:
            ops = r.disk or r.ram
            rows.append(
                (
                    f"{r.grid_size}x{r.grid_size}",
                    f"{ops.decode_ms:.1f}",
                    f"{ops.transfer_ms:.1f}",
                    f"{ops.visibility_ms:.1f}",
                    f"{r.disk.total_ms:.1f}" if r.disk else "-",
                    f"{r.ram.total_ms:.1f}" if r.ram else "-",
                )
            )
        widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
        return "\n".join(
            "  ".join(cell.rjust(widths[i]) for i, cell in enumerate(row)) for row in rows
        )


def _bench_mode(snapshot, provider, grid_size, visibility_threshold, base_policy,
                seed, repetitions, warmup) -> BenchModeStats:
    decode = transfer = visibility = 0.0
    spec = ClutterSpec(
        grid_size=grid_size,
        visibility_threshold=visibility_threshold,
        base_policy=base_policy,
    )
    for rep in range(-warmup, repetitions):
        scene_seed = int(
            np.random.SeedSequence([seed, grid_size, max(rep, 0)]).generate_state(1, np.uint64)[0]
        )
        result = synthesize_detailed(snapshot, provider, spec, seed=scene_seed)
        if rep < 0:
            continue
        decode += result.timings.decode_ms
        transfer += result.timings.transfer_ms
        visibility += result.timings.visibility_ms
    n = repetitions
    return BenchModeStats(
        decode_ms=decode / n,
        transfer_ms=transfer / n,
        visibility_ms=visibility / n,
        total_ms=(decode + transfer + visibility) / n,
    )


def bench_clutter(
    dataset_dir: str | Path,
    grid_sizes: tuple[int, ...] = (3, 4, 5),
    repetitions: int = 30,
    visibility_threshold: float = 0.25,
    base_policy: str = "dataset_image",
    seed: int = 0,
    modes: tuple[str, ...] = ("disk", "ram"),
    warmup: int = 2,
) -> BenchReport:
    """Mean per-scene timings for every grid size in each requested mode."""
    registry = load_registry(dataset_dir)
    snapshot = registry.snapshot()
    providers = {}
    if "disk" in modes:
        providers["disk"] = DiskSampleStore(dataset_dir)
    if "ram" in modes:
        providers["ram"] = prefetch_all(dataset_dir)

    rows = []
    for grid in grid_sizes:
        stats = {
            mode: _bench_mode(
                snapshot, provider, grid, visibility_threshold, base_policy,
                seed, repetitions, warmup,
            )
            for mode, provider in providers.items()
        }
        rows.append(BenchRow(grid_size=grid, disk=stats.get("disk"), ram=stats.get("ram")))
    corpus = len(snapshot.all_image_ids())
    return BenchReport(rows=tuple(rows), repetitions=repetitions, corpus_size=corpus)
