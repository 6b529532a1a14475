import struct

import numpy as np
import pytest

from densebam_gi.decoder import DecoderConfig
from densebam_gi.encoder import EncoderConfig
from densebam_gi.model import DenseBamGI
from densebam_gi.nn import BatchNorm, Module, load_checkpoint, save_checkpoint
from densebam_gi.tensor import ContractError, Parameter


def tiny_model(cell="gi_gru", seed=0):
    dec = DecoderConfig(cell=cell, hidden=8, embed=4, width=4, attn_dim=4, cov_channels=2, cov_kernel=3)
    return DenseBamGI(EncoderConfig.desk(), dec, vocab_size=10, seed=seed)


def test_checkpoint_header_layout(tmp_path):
    path = tmp_path / "one.ckpt"
    save_checkpoint(path, {"w": np.array([[1.0, 2.0, 3.0]])})
    raw = path.read_bytes()
    assert raw[:4] == b"DBGI"
    assert struct.unpack_from("<II", raw, 4) == (1, 1)
    assert struct.unpack_from("<H", raw, 12) == (1,)
    assert raw[14:15] == b"w"
    assert raw[15] == 2
    assert struct.unpack_from("<2Q", raw, 16) == (1, 3)
    assert np.frombuffer(raw[32:], dtype="<f4").tolist() == [1.0, 2.0, 3.0]
    assert len(raw) == 32 + 12


def test_checkpoint_round_trip_narrows_to_float32(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a.b": rng.normal(size=(3, 4)), "scalar": np.array(2.5), "nested.name.x": rng.normal(size=(2, 1, 3))}
    save_checkpoint(tmp_path / "c.ckpt", tensors)
    back = load_checkpoint(tmp_path / "c.ckpt")
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].dtype == np.float64 and back[k].shape == v.shape
        assert np.array_equal(back[k], v.astype(np.float32).astype(np.float64))


@pytest.mark.parametrize("damage", ["magic", "version", "truncate", "trailing"])
def test_corrupt_checkpoints_are_rejected(tmp_path, damage):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, {"w": np.ones((2, 2))})
    raw = bytearray(path.read_bytes())
    if damage == "magic":
        raw[:4] = b"XXXX"
    elif damage == "version":
        raw[4:8] = struct.pack("<I", 99)
    elif damage == "truncate":
        raw = raw[:-3]
    else:
        raw += b"\0"
    path.write_bytes(bytes(raw))
    with pytest.raises(ContractError):
        load_checkpoint(path)


def test_parameter_names_are_unique_dotted_paths():
    model = tiny_model()
    names = [p.name for p in model.parameters()]
    assert len(names) == len(set(names)) and all(names)
    assert "decoder.level1.W_yv" in names and "encoder.stem.conv.weight" in names


def test_state_dict_includes_batch_norm_buffers():
    state = tiny_model().state_dict()
    assert "encoder.stem.bn.running_mean" in state and "encoder.stem.bn.running_var" in state


def test_model_save_load_restores_weights(tmp_path):
    a, b = tiny_model(seed=1), tiny_model(seed=2)
    a.save(tmp_path / "a.ckpt")
    b.load(tmp_path / "a.ckpt")
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        assert np.array_equal(pb.data, pa.data.astype(np.float32).astype(np.float64))


def test_strict_load_rejects_missing_and_unexpected(tmp_path):
    gru, gi = tiny_model("gru"), tiny_model("gi_gru")
    gru.save(tmp_path / "gru.ckpt")
    gi.save(tmp_path / "gi.ckpt")
    with pytest.raises(ContractError, match="missing"):
        gi.load(tmp_path / "gru.ckpt")
    with pytest.raises(ContractError, match="lacks"):
        gru.load(tmp_path / "gi.ckpt")


def test_warm_start_zeroes_auxiliary_projection(tmp_path):
    gru, gi = tiny_model("gru", seed=3), tiny_model("gi_gru", seed=4)
    gru.save(tmp_path / "gru.ckpt")
    assert gi.warm_start_from(tmp_path / "gru.ckpt") == []
    params = dict(gi.named_parameters())
    assert not params["decoder.level1.W_yv"].data.any()
    src = dict(gru.named_parameters())
    assert np.array_equal(params["decoder.level1.U_hz"].data,
                          src["decoder.level1.U_hz"].data.astype(np.float32).astype(np.float64))


def test_train_eval_mode_propagates():
    class Wrapper(Module):
        def __init__(self):
            self.norms = [BatchNorm(2), BatchNorm(3)]
            self.scale = Parameter(np.ones(1))

    w = Wrapper().eval()
    assert not any(m.training for m in w.modules())
    w.train()
    assert all(m.training for m in w.modules())
    assert len(w.parameters()) == 5
