import json

import numpy as np
import pytest

from amodalseg.manifest import (
    DatasetManifest,
    ImageInfo,
    SchemaError,
    canonical_json,
    load_manifest,
    manifest_from_dict,
    save_manifest,
)
from amodalseg.masks import AmodalInstance


def _manifest():
    amodal = np.zeros((6, 9), bool)
    amodal[1:5, 2:8] = True
    modal = amodal.copy()
    modal[:, 5:] = False
    anns = [AmodalInstance(0, modal, amodal, "box", id=1, pair_key="p"),
            AmodalInstance("b", amodal, amodal, None, id=2)]
    return DatasetManifest([ImageInfo(0, 9, 6, "images/0.png"), ImageInfo("b", 9, 6)], anns, "toy", "val")


def test_roundtrip(tmp_path):
    m = _manifest()
    path = tmp_path / "m.json"
    save_manifest(m, path)
    back = load_manifest(path)
    assert canonical_json(back.to_dict()) == path.read_text()
    assert back.name == "toy" and back.split == "val"
    assert back.annotations[0].modal_mask == m.annotations[0].modal_mask
    assert back.annotations[0].pair_key == "p"
    assert back.image("b").file is None


def test_schema_violations_are_all_listed():
    doc = _manifest().to_dict()
    doc["images"][0]["width"] = 0
    del doc["annotations"][1]["amodal_segmentation"]
    with pytest.raises(SchemaError) as err:
        manifest_from_dict(doc)
    assert len(err.value.problems) == 2


def test_size_and_reference_errors():
    doc = _manifest().to_dict()
    doc["annotations"][0]["image_id"] = 42
    doc["annotations"][1]["visible_segmentation"] = {"size": [3, 3], "counts": [9]}
    with pytest.raises(SchemaError) as err:
        manifest_from_dict(doc)
    assert [p.split(":")[0] for p in err.value.problems] == ["annotations/0", "annotations/1"]


def test_invalid_json(tmp_path):
    p = tmp_path / "m.json"
    p.write_text("{not json")
    with pytest.raises(SchemaError):
        load_manifest(p)


def test_by_image_and_with_annotations():
    m = _manifest()
    assert {k: len(v) for k, v in m.by_image().items()} == {0: 1, "b": 1}
    sub = m.with_annotations(m.annotations[:1])
    assert len(sub) == 1 and len(m) == 2
    assert json.loads(canonical_json(sub.to_dict()))["info"]["name"] == "toy"
