"""Checkpoint container: bit-exact round trips, rng/meta persistence, and
mismatch rejection."""

import numpy as np
import pytest

from sydes.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from sydes.encoders import EncoderConfig
from sydes.errors import DataError
from sydes.gradcheck import tiny_setup
from sydes.imaging import ImageConfig
from sydes.model import SydesModel
from sydes.tensor import RngState


def read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


def read_text(path):
    with open(path, encoding="utf-8") as f:
        return f.read()


@pytest.fixture
def model():
    m, _, _ = tiny_setup(RngState(41))
    return m


def test_round_trip_bit_exact(model, tmp_path):
    path = str(tmp_path / "m.ckpt")
    rng = RngState(7, "root")
    save_checkpoint(path, model, rng, {"stage": "pretrain", "epoch": 3})
    before = {name: p.data.tobytes() for name, p in model.named_parameters()}

    other, _, _ = tiny_setup(RngState(999))  # different values, same shapes
    meta, loaded_rng = load_checkpoint(path, other)
    after = {name: p.data.tobytes() for name, p in other.named_parameters()}
    assert after == before
    assert meta == {"stage": "pretrain", "epoch": 3}
    assert loaded_rng == rng


def test_save_is_deterministic(model, tmp_path):
    a, b = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    save_checkpoint(a, model, RngState(1), {"k": 1})
    save_checkpoint(b, model, RngState(1), {"k": 1})
    assert read_bytes(a) == read_bytes(b)


def test_read_raw_parameter_dict(model, tmp_path):
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(path, model, RngState(0), {})
    _, _, params = read_checkpoint(path)
    for name, p in model.named_parameters():
        assert np.array_equal(params[name], p.data)


def test_name_mismatch_rejected(model, tmp_path):
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(path, model, RngState(0), {})
    image_cfg = ImageConfig(high_res=8, low_res=4, patch_size=2)
    enc_cfg = EncoderConfig(image_dim=8, text_dim=8, image_layers=2, text_layers=1,
                            image_heads=2, text_heads=2, seq_len=6, mlp_ratio=2)
    deeper = SydesModel(image_cfg, enc_cfg, 10, decoder_layers=1, decoder_heads=2)
    with pytest.raises(DataError, match="mismatch"):
        load_checkpoint(path, deeper)


def test_bad_magic_rejected(tmp_path, model):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(DataError):
        load_checkpoint(str(path), model)
