import json

import numpy as np
import pytest

from clutterlab.errors import DuplicateClassError, UnregisteredClassError, ValidationError
from clutterlab.types import (
    AnnotatedSample,
    BinaryMask,
    Box,
    ClassRegistry,
    LabelMap,
    RgbImage,
)


def test_box_validation():
    box = Box(1, 2, 4, 8)
    assert box.width == 3 and box.height == 6 and box.area == 18
    assert box.center() == (2.5, 5.0)
    with pytest.raises(ValidationError):
        Box(4, 0, 4, 5)
    with pytest.raises(ValidationError):
        Box(-1, 0, 4, 5)
    with pytest.raises(ValidationError):
        Box(0, 5, 4, 5)


def test_raster_type_validation():
    with pytest.raises(ValidationError):
        RgbImage(np.zeros((4, 4), dtype=np.uint8))
    with pytest.raises(ValidationError):
        RgbImage(np.zeros((4, 4, 3), dtype=np.float32))
    with pytest.raises(ValidationError):
        LabelMap(np.zeros((4, 4), dtype=np.uint8))
    with pytest.raises(ValidationError):
        BinaryMask(np.zeros((4, 4), dtype=np.uint8))
    image = RgbImage(np.zeros((3, 5, 3), dtype=np.uint8))
    assert (image.width, image.height) == (5, 3)


def test_label_map_class_ids():
    ids = np.zeros((4, 4), dtype=np.uint16)
    ids[0, 0] = 7
    ids[3, 3] = 3
    assert LabelMap(ids).class_ids() == [3, 7]


def test_sample_box_must_cover_labels():
    image = RgbImage(np.zeros((8, 8, 3), dtype=np.uint8))
    labels = np.zeros((8, 8), dtype=np.uint16)
    labels[2:4, 2:4] = 5
    sample = AnnotatedSample(image, LabelMap(labels), ((5, Box(2, 2, 4, 4)),))
    assert sample.width == 8

    with pytest.raises(ValidationError):
        AnnotatedSample(image, LabelMap(labels), ((5, Box(0, 0, 12, 12)),))
    with pytest.raises(ValidationError):
        AnnotatedSample(image, LabelMap(labels), ((5, Box(5, 5, 7, 7)),))
    with pytest.raises(ValidationError):
        AnnotatedSample(image, LabelMap(labels), (), source="bogus")


def test_registry_register_and_snapshot():
    reg = ClassRegistry()
    a = reg.register("bottle")
    b = reg.register("crayons")
    assert (a, b) == (1, 2)
    with pytest.raises(DuplicateClassError):
        reg.register("bottle")
    assert reg.ensure("bottle") == a
    assert reg.ensure("brush") == 3

    reg.add_source(a, "s0")
    reg.add_source(a, "s1")
    snap = reg.snapshot()
    assert snap.get(a).image_count == 2
    assert snap.get(b).image_count == 0
    assert reg.entries() == [(1, "bottle", 2), (2, "crayons", 0), (3, "brush", 0)]
    with pytest.raises(UnregisteredClassError):
        reg.add_source(99, "sx")

    # snapshot is immutable w.r.t. later writes
    reg.add_source(a, "s2")
    assert snap.get(a).image_count == 2


def test_registry_json_round_trip():
    reg = ClassRegistry()
    reg.register("bottle")
    reg.register("brush")
    payload = json.loads(reg.to_json())
    assert payload == {"classes": [{"id": 1, "name": "bottle"}, {"id": 2, "name": "brush"}]}
    back = ClassRegistry.from_json(reg.to_json())
    assert back.entries() == [(1, "bottle", 0), (2, "brush", 0)]
    assert back.register("new") == 3
