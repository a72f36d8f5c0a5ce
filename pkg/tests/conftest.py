from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from clutterlab.dataset_io import save_sample, write_classes
from clutterlab.types import AnnotatedSample, Box, ClassRegistry, LabelMap, RgbImage

# Flat chroma background used by fixture corpora; object colors keep a max
# channel deviation well above any tolerance the tests use.
BG_COLOR = (0, 255, 0)
PALETTE = (
    (200, 30, 40),
    (40, 60, 220),
    (240, 180, 20),
    (120, 20, 160),
    (20, 120, 200),
    (250, 250, 250),
    (90, 50, 10),
    (30, 30, 30),
)


def make_instance_sample(
    class_id: int,
    canvas: tuple[int, int] = (96, 96),
    rng: np.random.Generator | None = None,
    bg=BG_COLOR,
    size_range: tuple[int, int] = (20, 48),
    noise: bool = False,
    source: str = "acquired",
) -> AnnotatedSample:
    """One flat-background image holding a single rectangular object."""
    rng = rng or np.random.default_rng(0)
    width, height = canvas
    img = np.zeros((height, width, 3), np.uint8)
    if noise:
        img[:] = rng.integers(0, 256, (height, width, 3), dtype=np.uint8)
    else:
        img[:] = bg
    lab = np.zeros((height, width), np.uint16)
    lo, hi = size_range
    w = int(rng.integers(lo, min(hi, width - 1) + 1))
    h = int(rng.integers(lo, min(hi, height - 1) + 1))
    x = int(rng.integers(0, width - w + 1))
    y = int(rng.integers(0, height - h + 1))
    if noise:
        img[y : y + h, x : x + w] = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
    else:
        color = PALETTE[int(rng.integers(len(PALETTE)))]
        img[y : y + h, x : x + w] = color
    lab[y : y + h, x : x + w] = class_id
    return AnnotatedSample(
        image=RgbImage(img),
        labels=LabelMap(lab),
        boxes=((class_id, Box(x, y, x + w, y + h)),),
        source=source,
    )


def build_corpus(
    directory: Path,
    n_classes: int = 3,
    per_class: int = 3,
    canvas: tuple[int, int] = (96, 96),
    seed: int = 7,
    noise: bool = False,
    size_range: tuple[int, int] = (20, 48),
) -> ClassRegistry:
    rng = np.random.default_rng(seed)
    registry = ClassRegistry()
    for c in range(n_classes):
        class_id = registry.register(f"item{c:02d}")
        for _ in range(per_class):
            sample = make_instance_sample(
                class_id, canvas=canvas, rng=rng, noise=noise, size_range=size_range
            )
            sample_id = save_sample(sample, directory)
            registry.add_source(class_id, sample_id)
    write_classes(registry, directory)
    return registry


@pytest.fixture(scope="session")
def corpus_small(tmp_path_factory) -> Path:
    """3 classes x 3 flat-background images at 96x96."""
    directory = tmp_path_factory.mktemp("corpus_small")
    build_corpus(directory, n_classes=3, per_class=3, canvas=(96, 96), seed=7)
    return directory


@pytest.fixture(scope="session")
def corpus_bench(tmp_path_factory) -> Path:
    """200 noisy images at 160x160; PNG decoding dominates disk-mode scenes."""
    directory = tmp_path_factory.mktemp("corpus_bench")
    build_corpus(
        directory, n_classes=5, per_class=40, canvas=(160, 160), seed=11,
        noise=True, size_range=(48, 96),
    )
    return directory


@pytest.fixture(scope="session")
def corpus_256(tmp_path_factory) -> Path:
    """4 classes x 3 images at 256x256 for full-resolution scene checks."""
    directory = tmp_path_factory.mktemp("corpus_256")
    build_corpus(
        directory, n_classes=4, per_class=3, canvas=(256, 256), seed=13,
        size_range=(40, 80),
    )
    return directory
