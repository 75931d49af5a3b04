import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tagtrack import io as tio


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, st.tuples(*[st.integers(1, 4)] * 4), elements=st.floats(-1e6, 1e6, width=32)))
def test_tgf_round_trip(arr):
    back, end = tio.decode_tgf(tio.encode_tgf(arr))
    assert np.array_equal(back, arr)
    assert end == len(tio.encode_tgf(arr))


def test_tgf_header_layout():
    buf = tio.encode_tgf(np.zeros((2, 3), np.float32))
    assert buf[:4] == b"TGF1"
    (hlen,) = struct.unpack_from("<I", buf, 4)
    header = json.loads(buf[8:8 + hlen])
    assert header == {"dtype": "f32", "order": "row-major", "shape": [1, 1, 2, 3], "coord": "xy-colrow"}
    assert len(buf) == 8 + hlen + 4 * 6


def test_tgf_consecutive_records():
    a, b = np.ones((1, 1, 2, 2), np.float32), np.arange(6, dtype=np.float32).reshape(1, 2, 3, 1)
    buf = tio.encode_tgf(a) + tio.encode_tgf(b)
    ra, off = tio.decode_tgf(buf)
    rb, end = tio.decode_tgf(buf, off)
    assert np.array_equal(ra, a) and np.array_equal(rb, b) and end == len(buf)


@pytest.mark.parametrize("buf", [b"XXXX\x00\x00\x00\x00", tio.encode_tgf(np.zeros((2, 2), np.float32))[:-3]])
def test_tgf_corrupt(buf):
    with pytest.raises(ValueError):
        tio.decode_tgf(buf)


def test_tgf_too_many_dims():
    with pytest.raises(ValueError):
        tio.encode_tgf(np.zeros((1, 1, 1, 1, 1)))


def test_landmark_csv_round_trip(tmp_path):
    lm = np.random.default_rng(0).random((3, 5, 2)) * 64
    tio.save_landmarks(tmp_path / "lm.csv", lm)
    assert (tmp_path / "lm.csv").read_text().splitlines()[0] == "frame,id,x,y"
    assert np.array_equal(tio.load_landmarks(tmp_path / "lm.csv"), lm)


def test_incomplete_landmarks(tmp_path):
    (tmp_path / "lm.csv").write_text("frame,id,x,y\n0,0,1.0,2.0\n1,1,1.0,2.0\n")
    with pytest.raises(ValueError):
        tio.load_landmarks(tmp_path / "lm.csv")


def test_atomic_write_leaves_no_partial_on_error(tmp_path):
    target = tmp_path / "out.bin"
    with pytest.raises(RuntimeError):
        with tio.atomic_path(target) as tmp:
            tmp.write_bytes(b"half")
            raise RuntimeError("boom")
    assert not target.exists()
    assert not list(tmp_path.iterdir())


def test_atomic_write(tmp_path):
    tio.write_json(tmp_path / "a.json", {"b": 1, "a": 2})
    assert json.loads((tmp_path / "a.json").read_text()) == {"a": 2, "b": 1}
    assert not list(tmp_path.glob("*.partial"))


def test_write_csv(tmp_path):
    tio.write_csv(tmp_path / "t.csv", ["frame", "rms_px"], [{"frame": 1, "rms_px": 0.1}])
    assert (tmp_path / "t.csv").read_text() == "frame,rms_px\n1,0.1\n"
