import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from triadkit.errors import FormatError, IntegrityError, OutputError
from triadkit.map_io import (
    AnomalyMap, BinaryMask, load_anomaly_map, load_mask, read_manifest, save_anomaly_map,
    save_mask, sidecar_path, write_manifest,
)


def _png16(path, values, w, h):
    Image.fromarray(np.array(values, dtype=np.uint16).reshape(h, w)).save(path)


def _f32raw(path, values, w, h):
    path.write_bytes(np.asarray(values, dtype="<f4").tobytes())
    sidecar_path(path).write_text(json.dumps({"width": w, "height": h, "dtype": "f32le"}))


def test_png16_linear_mapping(tmp_path):
    p = tmp_path / "m.png"
    _png16(p, [0, 65535, 32768, 0], 2, 2)
    m = load_anomaly_map(p, "png16")
    assert m.normalized
    np.testing.assert_array_equal(m.scores.ravel()[[0, 1, 3]], [0.0, 1.0, 0.0])
    assert m.scores[1, 0] == pytest.approx(0.50000763, abs=1e-8)


def test_f32raw_identity(tmp_path):
    p = tmp_path / "m.f32"
    _f32raw(p, [3.5], 1, 1)
    m = load_anomaly_map(p, "f32raw")
    assert m.scores.tolist() == [[3.5]]
    assert not m.normalized


def test_f32raw_sidecar_mismatch(tmp_path):
    p = tmp_path / "m.f32"
    _f32raw(p, [1.0, 2.0, 3.0], 2, 2)
    with pytest.raises(IntegrityError):
        load_anomaly_map(p, "f32raw")


def test_f32raw_rejects_nan(tmp_path):
    p = tmp_path / "m.f32"
    _f32raw(p, [1.0, np.nan], 2, 1)
    with pytest.raises(IntegrityError):
        load_anomaly_map(p, "f32raw")


def test_f32raw_without_sidecar(tmp_path):
    p = tmp_path / "m.f32"
    p.write_bytes(b"\0\0\0\0")
    with pytest.raises(FormatError):
        load_anomaly_map(p, "f32raw")


def test_png16_rejects_8bit(tmp_path):
    p = tmp_path / "m.png"
    Image.fromarray(np.zeros((2, 2), np.uint8)).save(p)
    with pytest.raises(FormatError):
        load_anomaly_map(p, "png16")


def test_garbage_file(tmp_path):
    p = tmp_path / "m.png"
    p.write_bytes(b"not a png")
    with pytest.raises(FormatError):
        load_anomaly_map(p, "png16")


def test_mask_examples(tmp_path):
    p = tmp_path / "a.png"
    Image.fromarray(np.array([[0, 255]], np.uint8)).save(p)
    assert load_mask(p).bits.tolist() == [[False, True]]

    Image.fromarray(np.zeros((3, 4), np.uint8)).save(p)
    m = load_mask(p)
    assert m.shape == (3, 4) and not m.bits.any()

    Image.fromarray(np.zeros((2, 2, 3), np.uint8), mode="RGB").save(p)
    with pytest.raises(FormatError):
        load_mask(p)


def test_mask_nonzero_is_true(tmp_path):
    p = tmp_path / "a.png"
    Image.fromarray(np.array([[0, 1, 128, 255]], np.uint8)).save(p)
    assert load_mask(p).bits.tolist() == [[False, True, True, True]]


small_dims = st.tuples(st.integers(1, 6), st.integers(1, 6))


@settings(max_examples=40, deadline=None)
@given(dims=small_dims, data=st.data())
def test_f32raw_round_trip(tmp_path_factory, dims, data):
    h, w = dims
    vals = data.draw(arrays(np.float32, (h, w), elements=st.floats(-1e6, 1e6, width=32)))
    m = AnomalyMap(vals.astype(np.float64), source_expert="x")
    p = tmp_path_factory.mktemp("rt") / "m.f32"
    save_anomaly_map(m, p, "f32raw")
    assert load_anomaly_map(p, "f32raw", source_expert="x") == m


@settings(max_examples=40, deadline=None)
@given(dims=small_dims, data=st.data())
def test_png16_round_trip(tmp_path_factory, dims, data):
    h, w = dims
    raw = data.draw(arrays(np.uint16, (h, w)))
    m = AnomalyMap(raw / 65535.0, normalized=True)
    p = tmp_path_factory.mktemp("rt") / "m.png"
    save_anomaly_map(m, p, "png16")
    assert load_anomaly_map(p, "png16") == m


@settings(max_examples=40, deadline=None)
@given(dims=small_dims, data=st.data())
def test_mask_round_trip(tmp_path_factory, dims, data):
    h, w = dims
    bits = data.draw(arrays(np.bool_, (h, w)))
    p = tmp_path_factory.mktemp("rt") / "m.png"
    save_mask(BinaryMask(bits), p)
    assert load_mask(p) == BinaryMask(bits)


def test_png16_mapping_strictly_monotone(tmp_path):
    values = np.arange(65536, dtype=np.uint16)
    p = tmp_path / "ramp.png"
    _png16(p, values, 256, 256)
    mapped = load_anomaly_map(p).scores.ravel()
    assert np.all(np.diff(mapped) > 0)


def test_manifest_round_trip_and_determinism(tmp_path):
    record = {"sample_id": "s1", "boxes": [{"x0": 1, "peak_score": 0.25}], "note": "ünï", "n": 3}
    p = tmp_path / "m.json"
    write_manifest(record, p)
    first = p.read_bytes()
    assert read_manifest(p) == record
    write_manifest(record, p)
    assert p.read_bytes() == first
    assert not list(tmp_path.glob("*.tmp"))


def test_manifest_missing_directory(tmp_path):
    target = tmp_path / "nope" / "m.json"
    with pytest.raises(OutputError, match="nope"):
        write_manifest({"a": 1}, target)
