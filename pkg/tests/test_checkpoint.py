import struct

import numpy as np
import pytest

from earseg.checkpoint import MAGIC, Checkpoint, CheckpointError, config_hash


@pytest.fixture
def ckpt(rng):
    return Checkpoint(
        {"backbone.w": rng.standard_normal((3, 2)), "eam.b": np.arange(4, dtype=np.float32),
         "opt.backbone.w": np.zeros((3, 2)), "backbone.n": np.array(7, dtype=np.int64)},
        {"stage": "stage2", "epoch": 3, "config_hash": "abc", "history": [{"lce": 0.5}]},
    )


def test_round_trip_is_byte_identical(tmp_path, ckpt):
    p = ckpt.save(tmp_path / "a.ckpt")
    again = Checkpoint.load(p)
    again.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    for k, v in ckpt.tensors.items():
        assert again.tensors[k].dtype == v.dtype
        np.testing.assert_array_equal(again.tensors[k], v)
    assert again.meta == ckpt.meta
    assert again.epoch == 3 and again.config_hash == "abc" and again.has_eam()
    assert set(again.subset("backbone.")) == {"backbone.w", "backbone.n"}


def test_insertion_order_does_not_matter(ckpt):
    flipped = Checkpoint(dict(reversed(list(ckpt.tensors.items()))), dict(ckpt.meta))
    assert flipped.to_bytes() == ckpt.to_bytes()
    assert flipped.digest() == ckpt.digest()


def test_header_layout(ckpt):
    blob = ckpt.to_bytes()
    assert blob[:8] == MAGIC
    version, hlen = struct.unpack("<II", blob[8:16])
    assert version == 1
    assert blob[16:16 + hlen].startswith(b'{"meta":')


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXXXXXX" + b[8:],
    lambda b: b[:10],
    lambda b: b[:len(b) - 5],
    lambda b: b[:16] + b"\xff" * 8 + b[24:],
    lambda b: b"",
])
def test_corrupt_bytes_raise(ckpt, mutate):
    with pytest.raises(CheckpointError, match="parse error"):
        Checkpoint.from_bytes(mutate(ckpt.to_bytes()))


def test_version_mismatch(ckpt):
    blob = bytearray(ckpt.to_bytes())
    blob[8:12] = struct.pack("<I", 2)
    with pytest.raises(CheckpointError, match="version 2"):
        Checkpoint.from_bytes(bytes(blob))


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        Checkpoint.load(tmp_path / "none.ckpt")


def test_config_hash_is_order_independent():
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
    assert len(config_hash({})) == 16
