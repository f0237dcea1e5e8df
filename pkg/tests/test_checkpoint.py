import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from wtaspike import autodiff as ad
from wtaspike import checkpoint as ckpt
from wtaspike.config import TaskConfig
from wtaspike.errors import CheckpointError
from wtaspike.model import SpikingTransformer
from wtaspike.training import AdamWState, adamw_step, evaluate, load_checkpoint, save_checkpoint

from conftest import tiny_config


def test_save_load_save_is_byte_identical(tmp_path, tiny_decoder):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    state = AdamWState()
    params = tiny_decoder.parameters()
    adamw_step(params, {k: np.ones_like(p.data) for k, p in params.items()}, state, lr=0.01)
    save_checkpoint(a, tiny_decoder, optim=state)
    loaded = load_checkpoint(a)
    save_checkpoint(b, loaded.model, optim=loaded.optim)
    assert a.read_bytes() == b.read_bytes()
    assert loaded.optim.step == 1
    for k in state.m:
        assert np.array_equal(loaded.optim.m[k], state.m[k])
        assert np.array_equal(loaded.optim.v[k], state.v[k])


def test_logits_survive_round_trip(tmp_path, tiny_decoder, rng):
    ids = rng.integers(0, 11, (3, 12))
    with ad.no_grad():
        before = tiny_decoder(ids).data
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, tiny_decoder)
    loaded = load_checkpoint(path)
    with ad.no_grad():
        after = loaded.model(ids).data
    assert np.array_equal(before, after)
    assert loaded.model.config == tiny_decoder.config


@given(st.lists(st.sampled_from(["<f8", "<f4", "i1", "<i8"]), min_size=1, max_size=4),
       st.integers(0, 2 ** 31))
def test_blob_dtypes_round_trip(dtypes, seed):
    r = np.random.default_rng(seed)
    params = {}
    for i, dt in enumerate(dtypes):
        shape = tuple(r.integers(0, 4, r.integers(0, 4)))
        params[f"p{i}"] = (r.normal(size=shape) * 50).astype(dt)
    flat, back, step, opt = ckpt.decode(ckpt.encode({"model.d": "4"}, params, 7, {"m.p0": params["p0"]}))
    assert flat == {"model.d": "4"} and step == 7
    for k, v in params.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert np.array_equal(back[k], v)
    assert np.array_equal(opt["m.p0"], params["p0"])


def _blob(tmp_path, tiny_decoder):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, tiny_decoder)
    return path, bytearray(path.read_bytes())


def test_bad_magic(tmp_path, tiny_decoder):
    path, data = _blob(tmp_path, tiny_decoder)
    data[0] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_tampered_version(tmp_path, tiny_decoder):
    path, data = _blob(tmp_path, tiny_decoder)
    data[len(ckpt.MAGIC)] ^= 0x01
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


@pytest.mark.parametrize("keep", [4, 12, 40, 0.5, -1])
def test_truncation(tmp_path, tiny_decoder, keep):
    path, data = _blob(tmp_path, tiny_decoder)
    n = int(len(data) * keep) if isinstance(keep, float) else (keep if keep > 0 else len(data) - 1)
    path.write_bytes(bytes(data[:n]))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_trailing_bytes(tmp_path, tiny_decoder):
    path, data = _blob(tmp_path, tiny_decoder)
    path.write_bytes(bytes(data) + b"\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="nope.ckpt"):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_shape_disagreement(tmp_path, tiny_decoder):
    state = tiny_decoder.state_dict()
    state["head.weight"] = state["head.weight"][:, :-1]
    flat = {"model.vocab_size": "11", "model.d": "16", "model.layers": "1", "model.heads": "2",
            "model.max_len": "12"}
    path = tmp_path / "m.ckpt"
    ckpt.save(path, flat, state)
    with pytest.raises(CheckpointError, match="head.weight"):
        load_checkpoint(path)


def test_config_mismatch_names_field(tmp_path, tiny_decoder):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, tiny_decoder)
    with pytest.raises(CheckpointError, match="model.heads"):
        load_checkpoint(path, expected=tiny_config(heads=4))
    load_checkpoint(path, expected=tiny_config())


def test_version_header_layout(tmp_path, tiny_decoder):
    path, data = _blob(tmp_path, tiny_decoder)
    assert bytes(data[:8]) == ckpt.MAGIC
    assert struct.unpack("<I", bytes(data[8:12]))[0] == ckpt.VERSION


def test_evaluate_is_repeatable(tmp_path):
    model = SpikingTransformer(tiny_config(vocab_size=16, max_len=9), seed=1)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    task = TaskConfig(seq_len=9)
    assert evaluate(path, task, batches=2) == evaluate(path, task, batches=2)
    with pytest.raises(CheckpointError):
        evaluate(path)
