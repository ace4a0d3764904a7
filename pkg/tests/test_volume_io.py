import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from udean.volume_io import (DatasetManifest, VolumeError, VolumeImage, load_volume,
                             normalize_unit_range, save_volume, split_groups)


def test_raw_zeros_roundtrip(tmp_path):
    v = VolumeImage(np.zeros((8, 8, 4), np.float32))
    save_volume(v, tmp_path / "z.f32")
    out = load_volume(tmp_path / "z.f32", "raw-f32")
    assert out.shape == (8, 8, 4)
    assert not out.data.any()


@pytest.mark.parametrize("name", ["vol.nii", "vol.nii.gz", "vol.f32"])
def test_save_load_is_identity(tmp_path, rng, name):
    v = VolumeImage(rng.random((8, 6, 4)).astype(np.float32), (0.7, 0.7, 1.4),
                    ("A-P", "L-R", "H-F"), (3.0, 250.0))
    save_volume(v, tmp_path / name)
    out = load_volume(tmp_path / name)
    assert out.data.dtype == np.float32
    assert np.array_equal(out.data, v.data)
    assert out.spacing == pytest.approx(v.spacing)
    assert out.axis_labels == v.axis_labels
    assert out.intensity_range == v.intensity_range


def test_header_payload_mismatch(tmp_path):
    (tmp_path / "bad.f32").write_bytes(np.zeros(200, "<f4").tobytes())
    (tmp_path / "bad.f32.json").write_text(json.dumps(
        {"shape": [8, 8, 4], "spacing": [1, 1, 1], "axis_labels": ["L-R", "A-P", "H-F"]}))
    with pytest.raises(VolumeError, match="256"):
        load_volume(tmp_path / "bad.f32")


def test_non_finite_rejected_with_index(tmp_path):
    data = np.zeros((4, 4, 4), "<f4")
    data[1, 2, 3] = np.nan
    (tmp_path / "nan.f32").write_bytes(data.tobytes())
    (tmp_path / "nan.f32.json").write_text(json.dumps(
        {"shape": [4, 4, 4], "spacing": [1, 1, 1], "axis_labels": ["L-R", "A-P", "H-F"]}))
    with pytest.raises(VolumeError, match=r"\(1, 2, 3\)"):
        load_volume(tmp_path / "nan.f32")


def test_missing_file(tmp_path):
    with pytest.raises(VolumeError):
        load_volume(tmp_path / "nope.f32")


def test_unknown_axis_label():
    with pytest.raises(VolumeError):
        VolumeImage(np.zeros((2, 2, 2)), axis_labels=("L-R", "A-P", "X"))


def test_normalize_affine():
    v = normalize_unit_range(VolumeImage(np.array([2.0, 4.0, 6.0]).reshape(3, 1, 1)))
    assert v.data.ravel().tolist() == [0.0, 0.5, 1.0]
    assert v.intensity_range == (2.0, 6.0)


def test_normalize_identity_on_unit_range(rng):
    d = rng.random((4, 4, 4))
    d.flat[0], d.flat[1] = 0.0, 1.0
    assert np.array_equal(normalize_unit_range(VolumeImage(d)).data, d)


def test_normalize_constant():
    v = normalize_unit_range(VolumeImage(np.full((3, 3, 3), 5.0)))
    assert not v.data.any()
    assert v.intensity_range == (5.0, 5.0)


@given(arrays(np.float64, (4, 3, 2), elements=st.floats(-1e3, 1e3)))
def test_normalize_properties(data):
    v = normalize_unit_range(VolumeImage(data))
    if data.max() > data.min():
        assert v.data.min() == 0.0 and v.data.max() == 1.0
        again = normalize_unit_range(v)
        np.testing.assert_allclose(again.data, v.data, atol=1e-12)
    else:
        assert not v.data.any()


def test_split_reference_counts():
    m = split_groups([f"s{i}" for i in range(300)], [120, 120, 30, 30], seed=3)
    sizes = [len(m.ids(g)) for g in ("source", "target", "validation", "test")]
    assert sizes == [120, 120, 30, 30]
    sets = [set(m.ids(g)) for g in ("source", "target", "validation", "test")]
    assert len(set.union(*sets)) == 300


def test_split_deterministic():
    ids = list(range(50))
    a = split_groups(ids, [10, 10, 5, 5], seed=7)
    b = split_groups(ids, [10, 10, 5, 5], seed=7)
    assert a == b
    assert split_groups(ids, [10, 10, 5, 5], seed=8) != a


def test_split_misaligned_shares_ids():
    m = split_groups(range(40), [10, 10, 5, 5], seed=1, mode="misaligned")
    assert set(m.ids("source")) == set(m.ids("target"))
    assert not set(m.ids("source")) & set(m.ids("test"))


def test_split_insufficient():
    with pytest.raises(VolumeError):
        split_groups(range(10), [5, 5, 1, 1], seed=0)


@given(st.integers(0, 2 ** 31), st.sampled_from(["unpaired", "misaligned"]))
def test_split_invariants(seed, mode):
    m = split_groups(range(30), [6, 6, 4, 4], seed=seed, mode=mode)
    m.validate()
    assert m == split_groups(range(30), [6, 6, 4, 4], seed=seed, mode=mode)


def test_manifest_roundtrip(tmp_path):
    m = split_groups(range(20), [5, 5, 2, 2], seed=4, mode="misaligned")
    m.save(tmp_path / "m.jsonl")
    head = json.loads((tmp_path / "m.jsonl").read_text().splitlines()[0])
    assert head["version"] == 1
    assert DatasetManifest.load(tmp_path / "m.jsonl") == m
