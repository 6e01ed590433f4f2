import json

import numpy as np
import pytest
from matplotlib.path import Path as MplPath

from safe_ood import synth
from safe_ood.synth import (ID_CLASSES, OOD_CLASSES, DatasetLoadError, SchemaError, assert_disjoint,
                            generate_split, load_coco_style, render_scene)


def fine_tight_box(outline, radius, cx, cy, res=16, size=64):
    """Tight box of the shape by dense point-in-shape sampling (independent of the renderer)."""
    ticks = (np.arange(size * res) + 0.5) / res
    xx, yy = np.meshgrid(ticks, ticks)
    if outline is None:
        inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2
    else:
        inside = MplPath(outline + [cx, cy]).contains_points(np.c_[xx.ravel(), yy.ravel()]).reshape(xx.shape)
    ys, xs = np.nonzero(inside)
    return np.array([ticks[xs.min()], ticks[ys.min()], ticks[xs.max()], ticks[ys.max()]])


def test_generation_is_byte_identical(tmp_path):
    a = generate_split("id_train", 20, 0, tmp_path / "a")
    b = generate_split("id_train", 20, 0, tmp_path / "b")
    assert a.read_bytes() == b.read_bytes()
    for f in sorted((tmp_path / "a" / "images").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "images" / f.name).read_bytes()
    c = generate_split("id_train", 20, 1, tmp_path / "c")
    assert c.read_bytes() != a.read_bytes()


def test_ood_split_has_only_ood_classes(tmp_path):
    doc = json.loads(generate_split("ood_test", 15, 0, tmp_path).read_text())
    names = {c["id"]: c["name"] for c in doc["categories"]}
    used = {names[a["category_id"]] for a in doc["annotations"]}
    assert used and used <= set(OOD_CLASSES) and not used & set(ID_CLASSES)


def test_single_image_split(tmp_path):
    doc = json.loads(generate_split("id_test", 1, 4, tmp_path).read_text())
    assert len(doc["images"]) == 1
    assert 1 <= len(doc["annotations"]) <= 4


def test_scene_properties():
    for i in range(40):
        scene, _ = render_scene("id_train", 3, i)
        assert scene.image.shape == (64, 64, 3)
        assert 1 <= len(scene.boxes) <= 4
        assert (scene.boxes[:, :2] >= 0).all() and (scene.boxes[:, 2:] <= 64).all()
        sizes = np.maximum(scene.boxes[:, 2] - scene.boxes[:, 0], scene.boxes[:, 3] - scene.boxes[:, 1])
        assert (sizes <= 28 + 1e-9).all()
        for a in range(len(scene.boxes)):
            for b in range(a + 1, len(scene.boxes)):
                assert synth.box_iou(scene.boxes[a], scene.boxes[b]) < 0.2
        np.testing.assert_array_equal(np.round(scene.image * 255) / 255, scene.image)


def test_annotation_matches_rendered_shape():
    checked = 0
    for i in range(50):
        scene, _ = render_scene("ood_test" if i % 2 else "id_train", 11, i)
        for box, (outline, radius, cx, cy) in zip(scene.boxes, scene.polygons):
            assert synth.box_iou(box, fine_tight_box(outline, radius, cx, cy)) >= 0.95
            cover = synth.coverage_mask(outline, radius, cx, cy)
            ys, xs = np.nonzero(cover > 0)
            assert xs.min() >= np.floor(box[0]) - 1 and xs.max() <= np.ceil(box[2]) + 1
            assert ys.min() >= np.floor(box[1]) - 1 and ys.max() <= np.ceil(box[3]) + 1
            checked += 1
    assert checked >= 50


def test_reload_round_trip(tmp_path):
    path = generate_split("id_val", 12, 2, tmp_path)
    ds = load_coco_style(path)
    scenes, _ = synth.render_split("id_val", 12, 2)
    assert ds.category_names == list(ID_CLASSES)
    for (img, t), scene, ref in zip(ds, scenes, synth.scenes_to_dataset(scenes, "id_val")):
        np.testing.assert_allclose(t["boxes"], scene.boxes, atol=1e-3)
        assert t["labels"].tolist() == ref[1]["labels"].tolist()
        np.testing.assert_array_equal(img, scene.image)


def test_missing_image_and_absent_reference(tmp_path):
    path = generate_split("id_test", 3, 0, tmp_path)
    doc = json.loads(path.read_text())
    (tmp_path / doc["images"][1]["file_name"]).unlink()
    with pytest.raises(DatasetLoadError, match=r"\[2\]"):
        load_coco_style(path)
    doc = json.loads(generate_split("id_test", 3, 0, tmp_path / "b").read_text())
    doc["annotations"][0]["image_id"] = 99
    bad = tmp_path / "b" / "bad.json"
    bad.write_text(json.dumps(doc))
    with pytest.raises(DatasetLoadError, match="99"):
        load_coco_style(bad)


def test_schema_violation_reports_path(tmp_path):
    path = generate_split("id_test", 2, 0, tmp_path)
    doc = json.loads(path.read_text())
    doc["annotations"][0]["bbox"] = [1, 2, 3]
    path.write_text(json.dumps(doc))
    with pytest.raises(SchemaError, match=r"\$\.annotations\[0\]\.bbox"):
        load_coco_style(path)


def test_empty_annotations_are_valid(tmp_path):
    path = generate_split("id_test", 2, 0, tmp_path)
    doc = json.loads(path.read_text())
    doc["annotations"] = []
    path.write_text(json.dumps(doc))
    ds = load_coco_style(path)
    assert len(ds) == 2 and all(len(t["boxes"]) == 0 for _, t in ds)


def test_disjointness_check(tmp_path):
    a = load_coco_style(generate_split("id_test", 2, 0, tmp_path / "a"))
    b = load_coco_style(generate_split("ood_test", 2, 0, tmp_path / "b"))
    assert_disjoint(a, b)
    with pytest.raises(ValueError, match="share"):
        assert_disjoint(a, a)
