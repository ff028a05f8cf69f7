import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from iqvq.checkpoint import Checkpoint, CheckpointError


def _sample():
    rng = np.random.default_rng(0)
    return Checkpoint(
        {"enc.w": rng.normal(size=(3, 3, 1, 4)), "scalar": np.array(2.5), "cb.common": rng.normal(size=(6, 2))},
        {"stage": "1", "s1.lr": "0.5"},
    )


def test_roundtrip_bit_exact(tmp_path):
    ck = _sample()
    back = Checkpoint.load(ck.save(tmp_path / "a" / "m.ckpt"))
    assert back.metadata == ck.metadata
    assert list(back.tensors) == list(ck.tensors)
    for k in ck.tensors:
        assert back.tensors[k].shape == ck.tensors[k].shape
        assert back.tensors[k].tobytes() == ck.tensors[k].tobytes()
    assert back.digest() == ck.digest()
    assert back.to_bytes() == ck.to_bytes()


@settings(max_examples=40, deadline=None)
@given(
    st.dictionaries(
        st.text(min_size=1, max_size=12).filter(lambda s: "\x00" not in s),
        arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4), elements=st.floats(allow_nan=False)),
        max_size=4,
    )
)
def test_roundtrip_property(tensors):
    ck = Checkpoint(dict(tensors), {"k": "v=w"})
    back = Checkpoint.from_bytes(ck.to_bytes())
    assert back.metadata == {"k": "v=w"}
    for k, a in tensors.items():
        assert back.tensors[k].tobytes() == a.tobytes() and back.tensors[k].shape == a.shape


def test_bad_magic():
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(b"NOPE" + _sample().to_bytes()[4:])


def test_truncated():
    raw = _sample().to_bytes()
    for cut in (6, 20, len(raw) // 2, len(raw) - 1):
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(raw[:cut])


def test_trailing_bytes():
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(_sample().to_bytes() + b"x")


def test_unsupported_version():
    raw = bytearray(_sample().to_bytes())
    raw[4] = 99
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(bytes(raw))


def test_digest_by_prefix():
    ck = _sample()
    d = ck.digest("cb.")
    ck.tensors["enc.w"][0, 0, 0, 0] += 1.0
    assert ck.digest("cb.") == d
    ck.tensors["cb.common"][0, 0] += 1.0
    assert ck.digest("cb.") != d


def test_params_are_fresh_copies():
    ck = _sample()
    p = ck.params("cb.")
    assert set(p) == {"common"}
    p["common"].data[0, 0] = 123.0
    assert ck.tensors["cb.common"][0, 0] != 123.0
    assert ck.has("enc.") and not ck.has("dec.")
