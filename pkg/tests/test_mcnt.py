import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mcnraw import mcnt


def test_header_layout():
    blob = mcnt.encode(np.zeros((2, 3), dtype=np.float32))
    assert blob[:4] == b"MCNT"
    assert struct.unpack("<HBB", blob[4:8]) == (1, 0, 2)
    assert struct.unpack("<2I", blob[8:16]) == (2, 3)
    assert len(blob) == 16 + 6 * 4


def test_u16_code():
    blob = mcnt.encode(np.array([1, 65535], dtype=np.uint16))
    assert blob[6] == 1
    np.testing.assert_array_equal(mcnt.decode(blob), [1, 65535])


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_f32_roundtrip(arr):
    out = mcnt.decode(mcnt.encode(arr))
    assert out.shape == arr.shape and out.dtype == np.float32
    np.testing.assert_array_equal(out, arr)


def test_bad_magic_and_truncation():
    with pytest.raises(mcnt.FormatError):
        mcnt.decode(b"XXXX" + b"\0" * 8)
    blob = mcnt.encode(np.ones((4, 4), dtype=np.float32))
    with pytest.raises(mcnt.FormatError):
        mcnt.decode(blob[:-1])


def test_bad_version():
    blob = bytearray(mcnt.encode(np.ones(2, dtype=np.float32)))
    blob[4] = 2
    with pytest.raises(mcnt.FormatError, match="version"):
        mcnt.decode(bytes(blob))


def test_u16_range_checked():
    with pytest.raises(mcnt.FormatError):
        mcnt.encode(np.array([70000]))


def test_checkpoint_roundtrip_keeps_order(tmp_path):
    tensors = {"sgn1.block1.conv1.weight": np.arange(6, dtype=np.float32).reshape(1, 2, 3),
               "adapter1.bias": np.zeros(4, dtype=np.float32), "é": np.ones(1, dtype=np.float32)}
    path = tmp_path / "m.mcnc"
    mcnt.save_checkpoint(path, tensors)
    raw = path.read_bytes()
    assert raw[:4] == b"MCNC" and struct.unpack("<I", raw[4:8])[0] == 3
    back = mcnt.load_checkpoint(path)
    assert list(back) == list(tensors)
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.mcnc"
    mcnt.save_checkpoint(path, {"a": np.ones(3, dtype=np.float32)})
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(mcnt.FormatError):
        mcnt.load_checkpoint(path)
