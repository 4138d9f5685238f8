import struct

import numpy as np
import pytest

from conftest import random_images, tiny_config
from lpv.backbone import BackboneConfig
from lpv.checkpoint import (
    MAGIC,
    CheckpointError,
    decode_state,
    encode_state,
    load_checkpoint,
    save_checkpoint,
)
from lpv.model import LpvModel


def test_encoding_matches_hand_layout():
    arr = np.array([[1.0, -2.0, 0.5]], dtype=np.float32)
    got = encode_state([("w", arr)])
    want = (b"LPV1" + struct.pack("<I", 1) + struct.pack("<I", 1) + b"w"
            + struct.pack("<I", 2) + struct.pack("<2I", 1, 3) + struct.pack("<3f", 1.0, -2.0, 0.5))
    assert got == want


def test_decode_inverts_encode():
    state = [("a.b", np.arange(6, dtype=np.float32).reshape(2, 3)),
             ("c", np.array([3.5], dtype=np.float32))]
    out = decode_state(encode_state(state))
    assert [n for n, _ in out] == ["a.b", "c"]
    for (_, x), (_, y) in zip(state, out):
        np.testing.assert_array_equal(x, y)


@pytest.mark.parametrize("mutate", [
    lambda b: b"LPV2" + b[4:],
    lambda b: b[:-3],
    lambda b: b + b"\0",
])
def test_corrupt_bytes_rejected(mutate):
    buf = encode_state([("w", np.ones((2, 2), dtype=np.float32))])
    with pytest.raises(CheckpointError):
        decode_state(mutate(buf))


def test_save_load_save_is_byte_identical(tmp_path):
    model = LpvModel(tiny_config(dtype="float32", n_stages=3))
    p1, p2 = tmp_path / "a.lpv", tmp_path / "b.lpv"
    save_checkpoint(model, p1)
    assert p1.read_bytes()[:4] == MAGIC
    other = load_checkpoint(LpvModel(tiny_config(dtype="float32", n_stages=3, seed=9)), p1)
    save_checkpoint(other, p2)
    assert p1.read_bytes() == p2.read_bytes()
    x = random_images(2, dtype=np.float32)
    for a, b in zip(model(x).logits, other(x).logits):
        assert np.array_equal(a.data, b.data)


def test_wrong_width_names_the_parameter(tmp_path):
    path = tmp_path / "m.lpv"
    save_checkpoint(LpvModel(tiny_config(dtype="float32")), path)
    cfg = tiny_config(dtype="float32")
    cfg.backbone = BackboneConfig(img_h=16, img_w=16, e=12, heads=2, n_mix_blocks=1)
    with pytest.raises(CheckpointError, match="stem1.weight"):
        load_checkpoint(LpvModel(cfg), path)


def test_stage_count_mismatch(tmp_path):
    path = tmp_path / "m.lpv"
    save_checkpoint(LpvModel(tiny_config(dtype="float32", n_stages=3)), path)
    with pytest.raises(CheckpointError, match="unknown parameter"):
        load_checkpoint(LpvModel(tiny_config(dtype="float32", n_stages=2)), path)
    save_checkpoint(LpvModel(tiny_config(dtype="float32", n_stages=1)), path)
    with pytest.raises(CheckpointError, match="missing"):
        load_checkpoint(LpvModel(tiny_config(dtype="float32", n_stages=2)), path)


def test_missing_file_raises_oserror(tmp_path):
    with pytest.raises(OSError):
        load_checkpoint(LpvModel(tiny_config()), tmp_path / "nope.lpv")
