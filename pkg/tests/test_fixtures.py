"""Framed tensor format and QKV fixture round trips."""

import numpy as np
import pytest

from quoka.attention import HeadLayout
from quoka.errors import StreamError, ValidationError
from quoka.fixtures import blob_hash, load_qkv_fixture, load_tensor, save_qkv_fixture, save_tensor
from quoka.harness import gen_random_qkv

# magic + version 1 + rank 2 + dims (2, 2) + payload 1.5, -2.0, 0.0, 3.25
GOLDEN_BYTES = (
    b"QTNS" + bytes([1, 2])
    + (2).to_bytes(4, "little") + (2).to_bytes(4, "little")
    + b"\x00\x00\xc0\x3f" + b"\x00\x00\x00\xc0" + b"\x00\x00\x00\x00" + b"\x00\x00\x50\x40"
)
GOLDEN_TENSOR = np.array([[1.5, -2.0], [0.0, 3.25]], dtype=np.float32)


def test_golden_bytes(tmp_path):
    path = tmp_path / "golden.qtns"
    save_tensor(path, GOLDEN_TENSOR)
    assert path.read_bytes() == GOLDEN_BYTES
    assert np.array_equal(load_tensor(path), GOLDEN_TENSOR)


def test_round_trip_random(tmp_path):
    rng = np.random.default_rng(0)
    for shape in [(3,), (2, 5), (4, 1, 6)]:
        x = rng.standard_normal(shape).astype(np.float32)
        path = tmp_path / "t.qtns"
        save_tensor(path, x)
        assert np.array_equal(load_tensor(path), x)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.qtns"
    path.write_bytes(b"NOPE" + GOLDEN_BYTES[4:])
    with pytest.raises(ValidationError):
        load_tensor(path)


def test_bad_version(tmp_path):
    path = tmp_path / "bad.qtns"
    path.write_bytes(b"QTNS" + bytes([9]) + GOLDEN_BYTES[5:])
    with pytest.raises(ValidationError):
        load_tensor(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "bad.qtns"
    path.write_bytes(GOLDEN_BYTES[:-4])
    with pytest.raises(ValidationError):
        load_tensor(path)


def test_blob_hash_matches_git_convention(tmp_path):
    path = tmp_path / "hello.txt"
    path.write_bytes(b"hello\n")
    # sha1 of "blob 6\0hello\n", the well-known git object id
    assert blob_hash(path) == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_qkv_fixture_round_trip(tmp_path):
    layout = HeadLayout(4, 2, 8)
    layers = [gen_random_qkv(layout, 10, seed=s) for s in (1, 2)]
    save_qkv_fixture(tmp_path / "fix", layers, layout)
    loaded, got_layout, hashes = load_qkv_fixture(tmp_path / "fix")
    assert got_layout == layout
    assert len(loaded) == 2
    for (q, k, v), (q2, k2, v2) in zip(layers, loaded):
        assert np.array_equal(q, q2)
        assert np.array_equal(k, k2)
        assert np.array_equal(v, v2)
    assert set(hashes) == {"manifest.json"} | {f"layer{i}_{r}.qtns" for i in (0, 1) for r in "qkv"}


def test_qkv_fixture_shape_mismatch(tmp_path):
    layout = HeadLayout(4, 2, 8)
    layers = [gen_random_qkv(layout, 10, seed=1)]
    save_qkv_fixture(tmp_path / "fix", layers, layout)
    # corrupt the manifest's T
    manifest = (tmp_path / "fix" / "manifest.json")
    manifest.write_text(manifest.read_text().replace('"T": 10', '"T": 11'))
    with pytest.raises(StreamError):
        load_qkv_fixture(tmp_path / "fix")
