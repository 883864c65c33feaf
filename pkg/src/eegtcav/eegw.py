"""The ``EEGW`` windows container.

Layout (little-endian)::

    b"EEGW" | u32 version | u32 metadata length | UTF-8 JSON metadata
    | float32 payload [n_windows x 20 x n_samples], row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .dsp import N_WINDOW_CHANNELS, Window
from .edf import CANONICAL_CHANNELS
from .errors import FormatError

MAGIC = b"EEGW"
VERSION = 1
WINDOW_CHANNELS = list(CANONICAL_CHANNELS) + ["AMP"]


def encode_windows(windows, provenance=None) -> bytes:
    windows = list(windows)
    if windows:
        n_samples = windows[0].n_samples
        rate = windows[0].sampling_rate_hz
        for w in windows:
            if w.n_samples != n_samples or w.sampling_rate_hz != rate:
                raise FormatError("all windows in a container must share length and rate")
            if w.data.shape[0] != N_WINDOW_CHANNELS:
                raise FormatError(f"window has {w.data.shape[0]} channels")
        payload = np.stack([w.data for w in windows]).astype("<f4", copy=False)
    else:
        n_samples, rate = 0, 0.0
        payload = np.zeros((0, N_WINDOW_CHANNELS, 0), dtype="<f4")
    meta = {
        "channel_names": WINDOW_CHANNELS,
        "sampling_rate_hz": rate,
        "n_windows": len(windows),
        "n_channels": N_WINDOW_CHANNELS,
        "n_samples": n_samples,
        "windows": [
            {
                "label": w.label,
                "session_id": w.session_id,
                "duration_s": w.duration_s,
                "scale_uv": w.scale_uv,
                "start_s": w.start_s,
            }
            for w in windows
        ],
        "provenance": provenance or {},
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(blob)) + blob + payload.tobytes()


def decode_windows(data: bytes):
    """Inverse of :func:`encode_windows`; returns ``(windows, provenance)``."""
    if len(data) < 12 or data[:4] != MAGIC:
        raise FormatError("not an EEGW container (bad magic)")
    version, meta_len = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported EEGW version {version}")
    if len(data) < 12 + meta_len:
        raise FormatError("EEGW metadata block truncated")
    try:
        meta = json.loads(data[12 : 12 + meta_len].decode("utf-8"))
        n, c, s = meta["n_windows"], meta["n_channels"], meta["n_samples"]
        rate = meta["sampling_rate_hz"]
        entries = meta["windows"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"EEGW metadata invalid: {exc}") from None
    if len(entries) != n or c != N_WINDOW_CHANNELS:
        raise FormatError("EEGW metadata inconsistent with window table")
    expected = n * c * s * 4
    payload = data[12 + meta_len :]
    if len(payload) != expected:
        raise FormatError(f"EEGW payload has {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(n, c, s).astype(np.float32)
    windows = [
        Window(
            arr[i],
            rate,
            e["duration_s"],
            e.get("label"),
            e.get("session_id", ""),
            e.get("scale_uv", 1.0),
            e.get("start_s", 0.0),
        )
        for i, e in enumerate(entries)
    ]
    return windows, meta.get("provenance", {})


def save_windows(path, windows, provenance=None) -> None:
    Path(path).write_bytes(encode_windows(windows, provenance))


def load_windows(path):
    return decode_windows(Path(path).read_bytes())
