import json

import numpy as np
import pytest

from dosegnn.bundle import BundleError, read_bundle, read_dataset, write_bundle
from dosegnn.phantom import generate_dataset, write_dataset


def test_round_trip_bit_exact(tmp_path, small_plan):
    write_bundle(small_plan, tmp_path / "case")
    back = read_bundle(tmp_path / "case")
    assert back.ct.values.tobytes() == small_plan.ct.values.tobytes()
    assert back.dose.values.tobytes() == small_plan.dose.values.tobytes()
    assert back.ct.origin == small_plan.ct.origin
    assert back.dose.spacing == small_plan.dose.spacing
    assert [s.name for s in back.structures] == [s.name for s in small_plan.structures]
    for a, b in zip(back.structures, small_plan.structures):
        np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(back.ptv_center, small_plan.ptv_center)
    assert back.prescription_dose == small_plan.prescription_dose


def test_manifest_layout(tmp_path, small_plan):
    write_bundle(small_plan, tmp_path / "case")
    manifest = json.loads((tmp_path / "case" / "plan.json").read_text())
    assert set(manifest["ct"]) == {"origin", "spacing", "dims", "file", "unit"}
    assert manifest["ct"]["unit"] == "HU" and manifest["dose"]["unit"] == "Gy"
    assert {"name", "grid", "file"} == set(manifest["structures"][0])
    raw = (tmp_path / "case" / manifest["ct"]["file"]).read_bytes()
    assert len(raw) == 4 * small_plan.ct.size
    np.testing.assert_array_equal(np.frombuffer(raw, "<f4"), small_plan.ct.values)


def test_inference_only_bundle(tmp_path, small_plan):
    write_bundle(small_plan, tmp_path / "case")
    manifest_path = tmp_path / "case" / "plan.json"
    manifest = json.loads(manifest_path.read_text())
    del manifest["dose"]["file"]
    manifest_path.write_text(json.dumps(manifest))
    plan = read_bundle(tmp_path / "case")
    assert not plan.has_dose
    assert plan.dose.dims == small_plan.dose.dims


def test_missing_files(tmp_path, small_plan):
    with pytest.raises(BundleError):
        read_bundle(tmp_path / "nope")
    write_bundle(small_plan, tmp_path / "case")
    (tmp_path / "case" / "ct.f32").unlink()
    with pytest.raises(BundleError):
        read_bundle(tmp_path / "case")


def test_truncated_volume(tmp_path, small_plan):
    write_bundle(small_plan, tmp_path / "case")
    path = tmp_path / "case" / "dose.f32"
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(BundleError):
        read_bundle(tmp_path / "case")


def test_dataset_round_trip(tmp_path, small_cfg):
    bundles = generate_dataset(small_cfg, 3)
    write_dataset(bundles, tmp_path / "data", small_cfg)
    index = json.loads((tmp_path / "data" / "dataset.json").read_text())
    assert index["cases"] == ["case_0000", "case_0001", "case_0002"]
    assert index["config"]["seed"] == small_cfg.seed
    back = read_dataset(tmp_path / "data")
    assert [b.name for b in back] == index["cases"]
