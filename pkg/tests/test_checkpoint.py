import json
import struct

import numpy as np
import pytest

from pretextbench import checkpoint
from pretextbench.errors import CheckpointError


def _tensors():
    rng = np.random.default_rng(0)
    return {"b/w": rng.normal(size=(3, 4)).astype(np.float32), "a": np.arange(5, dtype=np.float32),
            "scalar": np.array(2.5, dtype=np.float32)}


def test_round_trip_is_lossless_and_stable(tmp_path):
    t = _tensors()
    checkpoint.save(tmp_path / "x.ckpt", t, {"epoch": 3})
    back, meta = checkpoint.load(tmp_path / "x.ckpt")
    assert meta == {"epoch": 3}
    assert set(back) == set(t)
    for k in t:
        assert back[k].dtype == np.float32
        assert np.array_equal(back[k], t[k])
    assert checkpoint.dumps(back, meta) == (tmp_path / "x.ckpt").read_bytes()


def test_layout_header_fields():
    blob = checkpoint.dumps(_tensors(), {"k": 1})
    assert blob[:8] == b"PBCKPT01"
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    header = json.loads(blob[16 : 16 + hlen])
    assert [e["name"] for e in header["tensors"]] == ["a", "b/w", "scalar"]
    assert header["tensors"][1] == {"name": "b/w", "shape": [3, 4], "dtype": "f32", "byte_offset": 20}
    payload = blob[16 + hlen :]
    assert len(payload) == 4 * (5 + 12 + 1)
    np.testing.assert_array_equal(np.frombuffer(payload[:20], "<f4"), np.arange(5))


def _corrupt(blob, fn):
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    header = json.loads(blob[16 : 16 + hlen])
    fn(header)
    hb = json.dumps(header).encode()
    return blob[:8] + struct.pack("<Q", len(hb)) + hb + blob[16 + hlen :]


@pytest.mark.parametrize(
    "mutate,field",
    [
        (lambda h: h["tensors"][1].update(byte_offset=10_000), "tensors[1].byte_offset"),
        (lambda h: h["tensors"][0].pop("shape"), "tensors[0].shape"),
        (lambda h: h["tensors"][2].update(dtype="f16"), "tensors[2].dtype"),
        (lambda h: h.pop("tensors"), "tensors"),
    ],
)
def test_corrupted_header_names_the_field(mutate, field):
    blob = _corrupt(checkpoint.dumps(_tensors()), mutate)
    with pytest.raises(CheckpointError, match=field.replace("[", r"\[").replace("]", r"\]")):
        checkpoint.loads(blob)


def test_bad_magic_and_truncation():
    blob = checkpoint.dumps(_tensors())
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.loads(b"XXXXXXXX" + blob[8:])
    with pytest.raises(CheckpointError, match="header_length"):
        checkpoint.loads(blob[:20])


def test_hashes():
    t = _tensors()
    assert checkpoint.tensors_hash(t) == checkpoint.tensors_hash({k: v.copy() for k, v in t.items()})
    t2 = dict(t, a=t["a"] + 1)
    assert checkpoint.tensors_hash(t) != checkpoint.tensors_hash(t2)
