import io
import json

import numpy as np
import pytest
from PIL import Image

from clutterlab.dataset_io import (
    load_registry,
    load_sample,
    prefetch_all,
    read_manifest,
    save_sample,
    write_classes,
)
from clutterlab.errors import (
    BitDepthError,
    MalformedRecordError,
    MemoryBudgetError,
    MissingSampleError,
    ValidationError,
)
from clutterlab.types import AnnotatedSample, Box, ClassRegistry, LabelMap, RgbImage

from conftest import make_instance_sample


def random_sample(rng, width=24, height=18, classes=(3, 9)):
    img = rng.integers(0, 256, (height, width, 3), dtype=np.uint8)
    lab = np.zeros((height, width), dtype=np.uint16)
    boxes = []
    for class_id in classes:
        w, h = int(rng.integers(3, 8)), int(rng.integers(3, 8))
        x, y = int(rng.integers(0, width - w)), int(rng.integers(0, height - h))
        lab[y : y + h, x : x + w] = class_id
        boxes.append((class_id, Box(x, y, x + w, y + h)))
    # Overlapping paint may bury an earlier class; keep only boxes that still
    # cover at least one pixel of their class.
    boxes = [(c, b) for c, b in boxes if (lab[b.y_min : b.y_max, b.x_min : b.x_max] == c).any()]
    return AnnotatedSample(RgbImage(img), LabelMap(lab), tuple(boxes), "fixture", seed=int(rng.integers(2**63)))


def test_minimal_sample_files(tmp_path):
    sample = AnnotatedSample(
        RgbImage(np.zeros((4, 4, 3), dtype=np.uint8)),
        LabelMap(np.zeros((4, 4), dtype=np.uint16)),
    )
    sample_id = save_sample(sample, tmp_path)
    assert sample_id == "000000"
    for suffix in (".rgb.png", ".labels.png", ".boxes.jsonl"):
        assert (tmp_path / f"{sample_id}{suffix}").exists()
    records = read_manifest(tmp_path)
    assert len(records) == 1 and records[0]["id"] == sample_id
    assert records[0]["class_ids"] == []


def test_round_trip_identity_on_random_samples(tmp_path):
    rng = np.random.default_rng(123)
    for k in range(12):
        sample = random_sample(rng)
        sample_id = save_sample(sample, tmp_path)
        back = load_sample(sample_id, tmp_path)
        assert np.array_equal(back.image.data, sample.image.data)
        assert np.array_equal(back.labels.ids, sample.labels.ids)
        assert back.boxes == sample.boxes
        assert back.source == sample.source
        assert back.seed == sample.seed


def test_manifest_append_only(tmp_path):
    rng = np.random.default_rng(5)
    save_sample(random_sample(rng), tmp_path)
    first = (tmp_path / "manifest.jsonl").read_text()
    save_sample(random_sample(rng), tmp_path)
    second = (tmp_path / "manifest.jsonl").read_text()
    assert second.startswith(first)
    assert len(read_manifest(tmp_path)) == 2


def test_load_missing_and_truncated(tmp_path):
    rng = np.random.default_rng(9)
    sample_id = save_sample(random_sample(rng), tmp_path)
    with pytest.raises(MissingSampleError):
        load_sample("nope", tmp_path)

    boxes_path = tmp_path / f"{sample_id}.boxes.jsonl"
    text = boxes_path.read_text().splitlines()
    boxes_path.write_text(text[0] + "\n" + text[1][: len(text[1]) // 2] + "\n")
    with pytest.raises(MalformedRecordError) as err:
        load_sample(sample_id, tmp_path)
    assert err.value.line == 2


def test_label_bit_depth_enforced(tmp_path):
    rng = np.random.default_rng(11)
    sample_id = save_sample(random_sample(rng), tmp_path)
    # Overwrite the label map with an 8-bit grayscale PNG.
    path = tmp_path / f"{sample_id}.labels.png"
    Image.fromarray(np.zeros((18, 24), dtype=np.uint8)).save(path)
    with pytest.raises(BitDepthError):
        load_sample(sample_id, tmp_path)


def test_16bit_ids_survive(tmp_path):
    lab = np.zeros((6, 6), dtype=np.uint16)
    lab[0, 0] = 40000
    sample = AnnotatedSample(RgbImage(np.zeros((6, 6, 3), dtype=np.uint8)), LabelMap(lab))
    sample_id = save_sample(sample, tmp_path)
    assert load_sample(sample_id, tmp_path).labels.ids[0, 0] == 40000


def test_prefetch_reports_decoded_bytes(tmp_path):
    rng = np.random.default_rng(21)
    n = 100
    for _ in range(n):
        sample = make_instance_sample(1, canvas=(256, 256), rng=rng)
        save_sample(sample, tmp_path)
    cache = prefetch_all(tmp_path)
    assert len(cache) == n
    assert cache.decoded_bytes == n * (256 * 256 * 3 + 256 * 256 * 2)


def test_prefetch_empty_manifest(tmp_path):
    cache = prefetch_all(tmp_path)
    assert len(cache) == 0
    assert cache.decoded_bytes == 0


def test_prefetch_budget_exceeded(tmp_path):
    rng = np.random.default_rng(3)
    for _ in range(4):
        save_sample(random_sample(rng), tmp_path)
    one = 24 * 18 * 3 + 24 * 18 * 2
    with pytest.raises(MemoryBudgetError) as err:
        prefetch_all(tmp_path, memory_budget_bytes=one * 2)
    assert err.value.available_bytes == one * 2
    assert err.value.required_bytes > one * 2


def test_load_registry_counts_only_source_samples(tmp_path):
    registry = ClassRegistry()
    cid = registry.register("thing")
    rng = np.random.default_rng(17)
    save_sample(make_instance_sample(cid, rng=rng), tmp_path)
    save_sample(make_instance_sample(cid, rng=rng, source="synthesized"), tmp_path)
    write_classes(registry, tmp_path)
    loaded = load_registry(tmp_path)
    assert loaded.entries() == [(cid, "thing", 1)]


def test_load_registry_rejects_unknown_class(tmp_path):
    rng = np.random.default_rng(19)
    save_sample(make_instance_sample(2, rng=rng), tmp_path)
    write_classes(ClassRegistry(), tmp_path)
    with pytest.raises(ValidationError):
        load_registry(tmp_path)
