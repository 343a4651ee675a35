import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from petal.checkpoint import decode, encode, load_adapter, save_adapter
from petal.errors import CheckpointError, CorruptionError, FormatError, IncompatibleCheckpoint
from petal.model import AdapterSpec, PetalModel
from petal.config import load_config
from petal.data import gen_dataset
from petal.trainer import train


def test_layout_of_a_single_tensor():
    blob = encode({"U": np.array([[1.0, 2.0]], dtype=np.float32)})
    want = b"PETL" + struct.pack("<II", 1, 1) + struct.pack("<H", 1) + b"U" + struct.pack("<BB", 0, 2)
    want += struct.pack("<2Q", 1, 2) + np.array([1.0, 2.0], dtype="<f4").tobytes()
    want += struct.pack("<I", zlib.crc32(want))
    assert blob == want


float_arrays = st.one_of(
    arrays(np.float32, array_shapes(min_dims=0, max_dims=3, max_side=4), elements=st.floats(width=32)),
    arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4), elements=st.floats()),
)


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=12), float_arrays, max_size=5))
def test_round_trip_is_bitwise(state):
    back = decode(encode(state))
    assert list(back) == list(state)
    for k, v in state.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_flipped_payload_byte_is_detected(tmp_path):
    path = save_adapter({"V": np.arange(6.0).reshape(2, 3)}, tmp_path / "a.petl")
    raw = bytearray(path.read_bytes())
    raw[-10] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptionError):
        load_adapter(path)


def test_bad_magic():
    with pytest.raises(FormatError):
        decode(b"NOPE" + bytes(20))


def test_errors_are_io_errors():
    assert issubclass(CheckpointError, OSError)


def test_rank_mismatch_names_the_tensor(tmp_path):
    cfg = load_config().model
    small = PetalModel(cfg, AdapterSpec(rank=2))
    path = save_adapter({k: t.data for k, t in small.named_trainable().items()}, tmp_path / "r2.petl")
    big = PetalModel(cfg, AdapterSpec(rank=4))
    expected = {k: t.shape for k, t in big.named_trainable().items()}
    with pytest.raises(IncompatibleCheckpoint, match=r"\.U' has shape"):
        load_adapter(path, expected)


def test_checkpoint_holds_only_adapter_tensors(tmp_path):
    rc = load_config()
    train(rc.model, rc.train, rc.task, out_dir=tmp_path)
    names = load_adapter(tmp_path / "adapter.petl")
    assert names and not any(k.startswith("backbone.") for k in names)


def test_resumed_model_matches(tmp_path):
    rc = load_config()
    res = train(rc.model, rc.train, rc.task, out_dir=tmp_path)
    val = res.data.val
    before = res.model.predict_logits(val.vision)
    fresh = PetalModel(rc.model, rc.train.adapter_spec(), rc.task.kind)
    expected = {k: t.shape for k, t in fresh.named_trainable().items()}
    fresh.load_state(load_adapter(tmp_path / "adapter.petl", expected))
    after = fresh.predict_logits(val.vision)
    assert np.abs(after - before).max() <= 1e-9 * np.abs(before).max()


def test_save_is_atomic_on_failure(tmp_path):
    path = tmp_path / "a.petl"
    save_adapter({"x": np.ones(2)}, path)
    with pytest.raises(FormatError):
        save_adapter({"x": np.ones(2, dtype=np.int32)}, path)
    assert load_adapter(path)["x"].tolist() == [1.0, 1.0]
    assert [p.name for p in tmp_path.iterdir()] == ["a.petl"]
