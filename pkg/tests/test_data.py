import json
import logging

import numpy as np
import pytest

from omdet.data import (
    PSEUDO,
    Annotation,
    ConflictSpec,
    DetectionDataset,
    FederatedRegistry,
    ImageRecord,
    generate_synthetic,
    ingest_pseudo_labels,
    load_coco_json,
    shapes_in_image,
)
from omdet.errors import ConfigError, DataError, FormatError


def _coco(tmp_path, **over):
    doc = {
        "images": [{"id": 1, "file_name": "a.png", "width": 64, "height": 48}],
        "annotations": [{"id": 7, "image_id": 1, "bbox": [10, 10, 20, 30], "category_id": 3}],
        "categories": [{"id": 3, "name": "square"}, {"id": 1, "name": "circle"}],
    }
    doc.update(over)
    p = tmp_path / "d.json"
    p.write_text(json.dumps(doc))
    return p


def test_coco_basic(tmp_path):
    ds = load_coco_json(_coco(tmp_path))
    assert ds.vocabulary == ["circle", "square"]
    (a,) = ds.annotations[1]
    assert a.label == "square" and a.box == (10.0, 10.0, 30.0, 40.0)
    empty = load_coco_json(_coco(tmp_path, annotations=[]))
    assert empty.num_annotations() == 0 and len(empty) == 1


def test_coco_errors(tmp_path):
    with pytest.raises(FormatError, match="unknown image_id"):
        load_coco_json(_coco(tmp_path, annotations=[{"id": 1, "image_id": 9, "bbox": [0, 0, 1, 1], "category_id": 3}]))
    with pytest.raises(FormatError, match="category_id"):
        load_coco_json(_coco(tmp_path, annotations=[{"id": 1, "image_id": 1, "bbox": [0, 0, 1, 1], "category_id": 5}]))
    with pytest.raises(FormatError, match="missing"):
        load_coco_json(_coco(tmp_path, images=[{"id": 1}]))
    with pytest.raises(DataError):
        load_coco_json(tmp_path / "nope.json")
    with pytest.raises(DataError, match="not found"):
        load_coco_json(_coco(tmp_path)).pixels(1)


def test_coco_pixels_from_png(tmp_path):
    from PIL import Image

    arr = np.zeros((48, 64, 3), dtype=np.uint8)
    arr[..., 0] = 255
    Image.fromarray(arr).save(tmp_path / "a.png")
    ds = load_coco_json(_coco(tmp_path))
    px = ds.pixels(1)
    assert px.shape == (3, 48, 64) and px[0].min() == 1.0 and px[1].max() == 0.0
    assert ds.pixels(1) is px


def test_boxes_are_clamped():
    ds = DetectionDataset("x", ["a"], {0: ImageRecord(0, 10, 10)}, {0: [Annotation("a", (-3, 2, 14, 8))]})
    assert ds.annotations[0][0].box == (0.0, 2.0, 10.0, 8.0)
    with pytest.raises(DataError):
        DetectionDataset("x", ["a"], {0: ImageRecord(0, 10, 10)}, {0: [Annotation("b", (0, 0, 1, 1))]})


def test_synthetic_determinism_and_conflict():
    spec = ConflictSpec(images_per_dataset=20, image_size=64, shape_size=(12, 20))
    a1, b1, c1 = generate_synthetic(spec, 5)
    a2, _, _ = generate_synthetic(spec, 5)
    for i in a1.image_ids:
        np.testing.assert_array_equal(a1.pixels(i), a2.pixels(i))
    a3 = generate_synthetic(spec, 6)[0]
    assert not np.array_equal(a1.pixels(a1.image_ids[0]), a3.pixels(a3.image_ids[0]))
    unlabeled = 0
    for ds in (a1, b1, c1):
        vocab = set(ds.vocabulary)
        for i in ds.image_ids:
            drawn = shapes_in_image(ds, i, spec)
            assert 1 <= len(drawn) <= 4
            annotated = sorted((a.label, a.box) for a in ds.annotations[i])
            # rasterization oracle: annotations are exactly the drawn shapes of the own vocabulary
            assert annotated == sorted(d for d in drawn if d[0] in vocab)
            unlabeled += sum(d[0] not in vocab for d in drawn)
    assert unlabeled > 0


def test_conflict_spec_validation():
    with pytest.raises(ConfigError):
        ConflictSpec(datasets={"A": ["hexagon"]})
    with pytest.raises(ConfigError):
        ConflictSpec.from_dict({"colour": 1})
    assert ConflictSpec.from_dict({"shape_size": [5, 9]}).shape_size == (5, 9)


def test_pseudo_labels(tmp_path, caplog):
    ds = DetectionDataset("x", ["circle"], {0: ImageRecord(0, 32, 32)})
    lines = [
        {"image_id": 0, "label": "circle", "bbox": [1, 1, 5, 5], "confidence": 0.9},
        {"image_id": 0, "label": "pipe", "bbox": [2, 2, 9, 9], "confidence": 0.7},
        {"image_id": 0, "label": "circle", "bbox": [1, 1, 5, 5], "confidence": 0.3},
        {"image_id": 42, "label": "circle", "bbox": [1, 1, 5, 5], "confidence": 0.9},
    ]
    p = tmp_path / "p.jsonl"
    p.write_text("\n".join(json.dumps(x) for x in lines))
    with caplog.at_level(logging.WARNING):
        out, stats = ingest_pseudo_labels(ds, p, 0.5)
    assert stats.kept == 2 and stats.dropped_low_confidence == 1 and stats.skipped_unknown_image == 1
    assert out.vocabulary == ["circle", "pipe"] and ds.vocabulary == ["circle"]
    assert all(a.source == PSEUDO for a in out.annotations[0])
    assert "42" in caplog.text


def test_registry_frequencies_and_determinism():
    spec = ConflictSpec(images_per_dataset={"A": 30, "B": 10, "C": 20}, image_size=32, shape_size=(6, 10))
    reg = FederatedRegistry(generate_synthetic(spec, 0), seed=3)
    counts = {"A": 0, "B": 0, "C": 0}
    for step in range(1250):
        for ds, _ in reg.draw(step, 8):
            counts[ds.name] += 1
    total = sum(counts.values())
    for name, w in zip("ABC", (0.5, 1 / 6, 1 / 3)):
        assert abs(counts[name] / total - w) < 0.02
    assert [(d.name, i) for d, i in reg.draw(17, 4)] == [(d.name, i) for d, i in reg.draw(17, 4)]
    assert reg.epoch_size() == 60
    with pytest.raises(ConfigError):
        FederatedRegistry(reg.datasets, weights=[1, -1, 0])
