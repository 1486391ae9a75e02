import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from playdiff.io import (CKPT_MAGIC, DATA_MAGIC, MagicError, ShapeError, TruncatedError, VersionError,
                         checkpoint_to_bytes, dataset_from_bytes, dataset_to_bytes, load_checkpoint,
                         load_dataset, pack, save_checkpoint, save_dataset, unpack)
from playdiff.playgen import generate_dataset


def test_container_layout():
    blob = pack(CKPT_MAGIC, {"version": 1}, [("w", np.arange(3, dtype="<f4"))])
    assert blob[:8] == b"MDTCKPT1"
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen])
    assert header["tensors"] == [{"name": "w", "dtype": "f4", "shape": [3], "offset": 0, "nbytes": 12}]
    assert blob[16 + hlen:] == np.arange(3, dtype="<f4").tobytes()


def test_big_endian_input_is_stored_little_endian():
    arr = np.arange(4, dtype=">f8")
    _, out = unpack(pack(CKPT_MAGIC, {"version": 1}, [("x", arr)]), CKPT_MAGIC)
    assert out["x"].dtype == np.dtype("<f8")
    np.testing.assert_array_equal(out["x"], arr)


@settings(max_examples=40, deadline=None)
@given(st.lists(hnp.arrays(st.sampled_from([np.dtype("<f4"), np.dtype("<f8"), np.dtype("<i8")]),
                           hnp.array_shapes(min_dims=0, max_dims=3, max_side=5)), min_size=0, max_size=4))
def test_random_payload_roundtrip_is_byte_exact(arrays):
    tensors = [(f"t{i}", a) for i, a in enumerate(arrays)]
    blob = pack(CKPT_MAGIC, {"version": 1, "note": "x"}, tensors)
    header, out = unpack(blob, CKPT_MAGIC)
    for name, a in tensors:
        assert out[name].tobytes() == a.tobytes() and out[name].shape == a.shape
    assert pack(CKPT_MAGIC, {"version": 1, "note": "x"}, list(out.items())) == blob
    # manifest offsets tile the payload without gaps or overlaps
    pos = 0
    for item in header["tensors"]:
        assert item["offset"] == pos
        pos += item["nbytes"]
    assert pos == header["payload_bytes"]


def test_checkpoint_save_load_save_identical(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.normal(size=(3, 4)).astype("<f4"), "b": rng.normal(size=5)}
    header = {"config": {"model": {"embed_dim": 8}}, "scaler": {"low": [0.0], "high": [1.0]}}
    save_checkpoint(tmp_path / "c1", tensors, header)
    h, t = load_checkpoint(tmp_path / "c1")
    h = {k: v for k, v in h.items() if k not in ("tensors", "payload_bytes", "version", "kind")}
    save_checkpoint(tmp_path / "c2", t, h)
    assert (tmp_path / "c1").read_bytes() == (tmp_path / "c2").read_bytes()


def test_bad_magic(tmp_path):
    blob = checkpoint_to_bytes({"a": np.zeros(2)}, {})
    (tmp_path / "x").write_bytes(b"NOTMAGIC" + blob[8:])
    with pytest.raises(MagicError):
        load_checkpoint(tmp_path / "x")


def test_dataset_magic_differs_from_checkpoint():
    blob = checkpoint_to_bytes({"a": np.zeros(2)}, {})
    with pytest.raises(MagicError):
        unpack(blob, DATA_MAGIC)


@pytest.mark.parametrize("cut", [5, 20, -3])
def test_truncated_file(tmp_path, cut):
    blob = checkpoint_to_bytes({"a": np.zeros(8)}, {"config": {}})
    (tmp_path / "x").write_bytes(blob[:cut])
    with pytest.raises(TruncatedError):
        load_checkpoint(tmp_path / "x")


def test_version_checked():
    blob = pack(CKPT_MAGIC, {"version": 99}, [])
    with pytest.raises(VersionError):
        unpack(blob, CKPT_MAGIC)


def test_shape_mismatch_names_tensor(tmp_path):
    save_checkpoint(tmp_path / "c", {"encoder.w": np.zeros((2, 3))}, {})
    with pytest.raises(ShapeError, match="encoder.w"):
        load_checkpoint(tmp_path / "c", expected_shapes={"encoder.w": (3, 3)})


def test_atomic_write_leaves_no_temp_files(tmp_path):
    save_checkpoint(tmp_path / "c", {"a": np.zeros(1)}, {})
    assert [p.name for p in tmp_path.iterdir()] == ["c"]


def test_dataset_roundtrip_byte_exact(tmp_path):
    eps = generate_dataset(3, 3, p_label=0.5)
    blob = dataset_to_bytes(eps, {"seed": 3})
    back, meta = dataset_from_bytes(blob)
    assert meta == {"seed": 3}
    assert dataset_to_bytes(back, meta) == blob
    for a, b in zip(eps, back):
        np.testing.assert_array_equal(a.renders, b.renders)
        assert a.annotations == b.annotations
        assert a.intervals == b.intervals
    save_dataset(tmp_path / "d", back, meta)
    assert (tmp_path / "d").read_bytes() == blob
    assert load_dataset(tmp_path / "d")[1] == meta


def test_dataset_generation_byte_identical(tmp_path):
    save_dataset(tmp_path / "a", generate_dataset(9, 2), {"seed": 9})
    save_dataset(tmp_path / "b", generate_dataset(9, 2), {"seed": 9})
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
