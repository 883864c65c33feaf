import struct

import numpy as np
import pytest

from eegtcav.dsp import Window
from eegtcav.eegw import decode_windows, encode_windows, load_windows, save_windows
from eegtcav.errors import FormatError


def _windows(n=3, samples=256, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        data = rng.uniform(-1, 1, (20, samples)).astype(np.float32)
        out.append(Window(data, 256.0, samples / 256.0, f"lab{i % 2}", f"s{i}", 10.0 + i, 4.0 * i))
    return out


def test_round_trip_bit_exact(tmp_path):
    windows = _windows()
    path = tmp_path / "w.eegw"
    save_windows(path, windows, {"seed": 7})
    back, prov = load_windows(path)
    assert prov == {"seed": 7}
    for a, b in zip(windows, back):
        assert a.data.tobytes() == b.data.tobytes()
        assert (a.label, a.session_id, a.scale_uv, a.start_s, a.duration_s) == (
            b.label,
            b.session_id,
            b.scale_uv,
            b.start_s,
            b.duration_s,
        )


def test_empty_container():
    back, _ = decode_windows(encode_windows([]))
    assert back == []


def test_payload_layout_is_row_major_float32():
    windows = _windows(2, 8)
    blob = encode_windows(windows)
    (meta_len,) = struct.unpack_from("<I", blob, 8)
    payload = np.frombuffer(blob[12 + meta_len :], dtype="<f4")
    assert np.array_equal(payload, np.stack([w.data for w in windows]).ravel())


@pytest.mark.parametrize(
    "mutate",
    [
        lambda b: b"EEGX" + b[4:],
        lambda b: b[:4] + struct.pack("<I", 9) + b[8:],
        lambda b: b[:-4],
        lambda b: b + b"\0\0\0\0",
        lambda b: b[:12] + b"]" + b[13:],
        lambda b: b[:6],
    ],
    ids=["magic", "version", "short-payload", "long-payload", "bad-json", "tiny"],
)
def test_corruption_rejected(mutate):
    with pytest.raises(FormatError):
        decode_windows(mutate(encode_windows(_windows())))


def test_mixed_lengths_rejected():
    a = _windows(1, 256)[0]
    b = _windows(1, 512)[0]
    with pytest.raises(FormatError):
        encode_windows([a, b])
