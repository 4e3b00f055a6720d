import struct

import pytest
import torch

from adaponder.checkpoint import MAGIC, load_checkpoint, read_header, save_checkpoint
from adaponder.config import PonderSettings
from adaponder.errors import CheckpointError, CheckpointFormatError, ConfigConflictError

from conftest import tiny_model


@pytest.fixture
def saved(tmp_path):
    model = tiny_model(K=3, router_scale=1.0)
    path = tmp_path / "m.plm3"
    save_checkpoint(model, PonderSettings(max_steps=3, lam=0.05), path, extra={"note": "x"})
    return model, path


def test_round_trip_is_bit_exact(saved):
    model, path = saved
    ckpt = load_checkpoint(path)
    assert ckpt.ponder.lam == 0.05 and ckpt.extra == {"note": "x"}
    assert ckpt.model_config == model.cfg
    loaded = ckpt.build_model()
    for (name, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b), name


def test_layout(saved):
    _, path = saved
    raw = path.read_bytes()
    magic, version, head_len = struct.unpack_from("<4sIQ", raw)
    assert magic == MAGIC == b"PLM3" and version == 1
    header, payload = read_header(path)
    assert len(payload) == header["payload_bytes"]
    offsets = [e["offset"] for e in header["tensors"].values()]
    assert offsets == sorted(offsets) and offsets[0] == 0


def test_save_is_deterministic(tmp_path):
    for name in ("a", "b"):
        save_checkpoint(tiny_model(), PonderSettings(), tmp_path / name)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_bad_magic(saved):
    _, path = saved
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_checkpoint(path)


def test_version_mismatch(saved):
    _, path = saved
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointFormatError, match="version"):
        load_checkpoint(path)


def test_truncated_payload_names_tensor(saved):
    _, path = saved
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CheckpointFormatError, match="router"):
        load_checkpoint(path)


def test_k_conflict(saved):
    _, path = saved
    with pytest.raises(ConfigConflictError, match="max_steps"):
        load_checkpoint(path, max_steps=2)
    assert issubclass(ConfigConflictError, CheckpointError)


def test_shape_mismatch_names_tensor(saved):
    _, path = saved
    ckpt = load_checkpoint(path)
    ckpt.tensors["lm_head.weight"] = ckpt.tensors["lm_head.weight"][:10]
    with pytest.raises(CheckpointFormatError, match="lm_head.weight"):
        ckpt.build_model()
    del ckpt.tensors["lm_head.weight"]
    with pytest.raises(CheckpointFormatError, match="lm_head.weight"):
        ckpt.build_model()
