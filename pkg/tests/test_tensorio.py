from __future__ import annotations

import struct

import numpy as np
import pytest

from expertspec import tensorio


def test_layout_by_hand():
    blob = tensorio.encode(np.array([[1.0, 2.0, 3.0]], dtype=np.float32))
    expected = b"MOET" + struct.pack("<IBB", 1, 1, 2) + struct.pack("<QQ", 1, 3) + struct.pack("<3f", 1, 2, 3)
    assert blob == expected


@pytest.mark.parametrize("shape", [(), (0,), (5,), (2, 3, 4)])
def test_round_trip(tmp_path, shape):
    arr = np.arange(int(np.prod(shape)), dtype=np.float32).reshape(shape) * 0.5
    tensorio.save(tmp_path / "a.moet", arr)
    back = tensorio.load(tmp_path / "a.moet")
    assert back.shape == arr.shape and back.dtype == np.float32
    np.testing.assert_array_equal(back, arr)


def test_integers_exact_below_2_24():
    ids = np.array([0, 15, 2**24 - 1])
    assert tensorio.decode(tensorio.encode(ids)).astype(np.int64).tolist() == ids.tolist()


@pytest.mark.parametrize(
    "blob, msg",
    [
        (b"NOPE" + b"\0" * 20, "magic"),
        (b"MOET\x01", "truncated"),
        (b"MOET" + struct.pack("<IBB", 2, 1, 0) + b"\0" * 4, "version"),
        (b"MOET" + struct.pack("<IBB", 1, 7, 0) + b"\0" * 4, "dtype"),
        (b"MOET" + struct.pack("<IBBQ", 1, 1, 1, 3) + b"\0" * 8, "payload"),
    ],
)
def test_malformed(blob, msg):
    with pytest.raises(tensorio.MoetFormatError, match=msg):
        tensorio.decode(blob)
