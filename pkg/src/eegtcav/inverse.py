"""eLORETA source power per parcel and anatomical window labels.

Fixed-orientation sources only. The lead field maps N cortical sources to
M scalp sensors; every source belongs to one of 23 parcels per
hemisphere.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dsp import N_EEG_CHANNELS, apply_filter, design_firwin
from .errors import ConfigError, FormatError, NumericError, ProtocolError, ShapeError

logger = logging.getLogger(__name__)

N_PARCELS = 23
HEMISPHERES = ("L", "R")
STD_FLOOR = 1e-12
MAX_BAND_TAPS = 513

LEADFIELD_MAGIC = b"LDFD"


class FrequencyBand(Enum):
    DELTA = (0.5, 4.0)
    THETA = (4.0, 8.0)
    ALPHA = (8.0, 12.0)
    BETA = (12.0, 30.0)
    GAMMA = (30.0, 70.0)

    @property
    def low(self) -> float:
        return self.value[0]

    @property
    def high(self) -> float:
        return self.value[1]

    @classmethod
    def parse(cls, name) -> "FrequencyBand":
        if isinstance(name, cls):
            return name
        try:
            return cls[str(name).strip().upper()]
        except KeyError:
            raise ConfigError(f"unknown frequency band {name!r}") from None


class Normalization(Enum):
    """How a window's parcel power is compared against its session baseline.

    Only ``ZSCORE`` is the default labeling rule; the others are offered
    for exploration.
    """

    ZSCORE = "zscore"
    SUBTRACT_MEAN = "subtract-mean"
    DIVIDE_MEAN = "divide-mean"


def slots() -> list:
    """The 46 (parcel, hemisphere) slots in tie-break order: L first, then parcel id."""
    return [(p, h) for h in HEMISPHERES for p in range(N_PARCELS)]


@dataclass(frozen=True)
class LeadField:
    gain: np.ndarray  # [M x N]
    sensor_names: tuple
    parcel_of: tuple  # per source: (parcel_id, hemisphere)

    def __post_init__(self):
        gain = np.asarray(self.gain, dtype=np.float64)
        object.__setattr__(self, "gain", gain)
        object.__setattr__(self, "sensor_names", tuple(self.sensor_names))
        object.__setattr__(self, "parcel_of", tuple((int(p), str(h)) for p, h in self.parcel_of))
        if gain.ndim != 2 or gain.shape[0] < 2:
            raise ShapeError(f"lead field must be [M>=2 x N], got {gain.shape}")
        if len(self.sensor_names) != gain.shape[0]:
            raise ShapeError("sensor name count does not match lead field rows")
        if len(self.parcel_of) != gain.shape[1]:
            raise ShapeError("every source needs exactly one parcel")
        for p, h in self.parcel_of:
            if not 0 <= p < N_PARCELS or h not in HEMISPHERES:
                raise ShapeError(f"invalid parcel assignment ({p}, {h})")
        if not np.all(np.isfinite(gain)):
            raise NumericError("lead field contains non-finite values")
        if np.any(np.all(gain == 0, axis=0)):
            raise NumericError("lead field has an all-zero source column")

    @property
    def n_sensors(self) -> int:
        return self.gain.shape[0]

    @property
    def n_sources(self) -> int:
        return self.gain.shape[1]

    def sources_in(self, parcel: int, hemisphere: str) -> np.ndarray:
        return np.array([i for i, ph in enumerate(self.parcel_of) if ph == (parcel, hemisphere)], dtype=int)


def encode_lead_field(lf: LeadField) -> bytes:
    """``LDFD`` | u32 header length | JSON header | float32 LE gain [M x N]."""
    header = {
        "sensor_names": list(lf.sensor_names),
        "parcels": [p for p, _ in lf.parcel_of],
        "hemispheres": [h for _, h in lf.parcel_of],
        "n_sensors": lf.n_sensors,
        "n_sources": lf.n_sources,
    }
    blob = json.dumps(header).encode("utf-8")
    return LEADFIELD_MAGIC + struct.pack("<I", len(blob)) + blob + lf.gain.astype("<f4").tobytes()


def decode_lead_field(data: bytes) -> LeadField:
    if len(data) < 8 or data[:4] != LEADFIELD_MAGIC:
        raise FormatError("not a lead-field file (bad magic)")
    (n,) = struct.unpack_from("<I", data, 4)
    try:
        header = json.loads(data[8 : 8 + n].decode("utf-8"))
        m, k = int(header["n_sensors"]), int(header["n_sources"])
        parcel_of = list(zip(header["parcels"], header["hemispheres"]))
        names = header["sensor_names"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"lead-field header invalid: {exc}") from None
    payload = data[8 + n :]
    if len(payload) != m * k * 4:
        raise FormatError(f"lead-field payload has {len(payload)} bytes, expected {m * k * 4}")
    gain = np.frombuffer(payload, dtype="<f4").reshape(m, k).astype(np.float64)
    return LeadField(gain, names, parcel_of)


def save_lead_field(path, lf: LeadField) -> None:
    Path(path).write_bytes(encode_lead_field(lf))


def load_lead_field(path) -> LeadField:
    return decode_lead_field(Path(path).read_bytes())


@dataclass(frozen=True)
class InverseOperator:
    resolvent: np.ndarray  # [N x M]
    alpha: float
    iterations_used: int
    converged: bool
    weights: Optional[np.ndarray] = None


def _centering(m: int) -> np.ndarray:
    return np.eye(m) - np.full((m, m), 1.0 / m)


def eloreta(lf: LeadField, alpha: float = 1e-4, tol: float = 1e-6, max_iter: int = 100) -> InverseOperator:
    """Fixed-orientation eLORETA with an average-reference constraint.

    Weights start at one and are refined as w_i = sqrt(k_i' C k_i) with
    C = pinv(K W^-1 K' + alpha H) until the largest relative change drops
    below ``tol``.
    """
    if not alpha > 0:
        raise ConfigError("eLORETA regularisation alpha must be > 0")
    k = lf.gain
    h = _centering(lf.n_sensors)
    w = np.ones(lf.n_sources)
    converged = False
    used = 0

    def core(w):
        g = (k / w) @ k.T + alpha * h
        return np.linalg.pinv(0.5 * (g + g.T), hermitian=True)

    try:
        for used in range(1, max_iter + 1):
            c = core(w)
            new = np.sqrt(np.maximum(np.einsum("mi,mn,ni->i", k, c, k), 0.0))
            if not np.all(np.isfinite(new)) or np.any(new == 0):
                raise NumericError("eLORETA weights collapsed to zero or non-finite values")
            change = float(np.max(np.abs(new - w) / w))
            w = new
            if change < tol:
                converged = True
                break
        resolvent = (k / w).T @ core(w)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eLORETA system could not be solved: {exc}") from None
    if not np.all(np.isfinite(resolvent)):
        raise NumericError("eLORETA resolvent is not finite")
    if not converged:
        logger.warning("eLORETA did not converge in %d iterations", max_iter)
    return InverseOperator(resolvent, float(alpha), used, converged, w)


@dataclass(frozen=True)
class ParcelPowerProfile:
    power: dict  # (parcel, hemisphere, FrequencyBand) -> mean-square power
    session_id: str = ""
    window_index: int = 0


def _band_filter(band: FrequencyBand, fs: float, n_samples: int):
    """Bandpass for one band, clipped so it fits inside the window."""
    from .dsp import auto_num_taps

    high = min(band.high, 0.499 * fs)
    if band.low >= high:
        raise ConfigError(f"band {band.name} lies above Nyquist at {fs} Hz")
    taps = auto_num_taps("bandpass", (band.low, high), fs)
    limit = min(MAX_BAND_TAPS, n_samples if n_samples % 2 else n_samples - 1)
    taps = max(3, min(taps, limit))
    if taps % 2 == 0:
        taps -= 1
    return design_firwin("bandpass", (band.low, high), fs, num_taps=taps)


def band_parcel_power(window, inv: InverseOperator, lf: LeadField, bands=tuple(FrequencyBand), window_index: int = 0) -> ParcelPowerProfile:
    """Mean-square eLORETA source power averaged within each parcel.

    ``window`` is a Window (its amplitude row is dropped and the EEG rows
    are restored to microvolts) or a raw [M x n] array with a
    ``sampling_rate_hz`` supplied via a ``(array, fs)`` tuple.
    """
    if isinstance(window, tuple):
        x, fs = np.asarray(window[0], dtype=np.float64), float(window[1])
        session = ""
    else:
        x, fs, session = window.eeg_uv, window.sampling_rate_hz, window.session_id
    if x.ndim != 2 or x.shape[0] != lf.n_sensors:
        raise ShapeError(f"window has {x.shape[0] if x.ndim == 2 else '?'} channels, lead field has {lf.n_sensors}")
    members = {s: lf.sources_in(*s) for s in slots()}
    power = {}
    for band in (FrequencyBand.parse(b) for b in bands):
        xb = apply_filter(x, _band_filter(band, fs, x.shape[1]))
        src = inv.resolvent @ xb
        per_source = np.mean(src * src, axis=1)
        for (p, h), idx in members.items():
            if idx.size:
                power[(p, h, band)] = float(per_source[idx].mean())
    return ParcelPowerProfile(power, session, window_index)


@dataclass(frozen=True)
class SessionBaseline:
    mean: dict
    std: dict
    session_id: str = ""


def session_baseline(profiles: Sequence[ParcelPowerProfile]) -> SessionBaseline:
    profiles = list(profiles)
    if len(profiles) < 2:
        raise ProtocolError("a session baseline needs at least two windows")
    sessions = {p.session_id for p in profiles}
    if len(sessions) > 1:
        raise ProtocolError(f"profiles come from several sessions: {sorted(sessions)}")
    keys = list(profiles[0].power)
    mean, std = {}, {}
    for key in keys:
        v = np.array([p.power[key] for p in profiles])
        mean[key] = float(v.mean())
        std[key] = max(float(v.std()), STD_FLOOR)
    return SessionBaseline(mean, std, sessions.pop())


def normalized_power(profile, baseline, band, how: Normalization = Normalization.ZSCORE) -> dict:
    band = FrequencyBand.parse(band)
    out = {}
    for p, h in slots():
        key = (p, h, band)
        if key not in profile.power:
            continue
        if key not in baseline.mean:
            raise ProtocolError(f"baseline has no entry for {key}")
        v, mu, sd = profile.power[key], baseline.mean[key], baseline.std[key]
        if how is Normalization.ZSCORE:
            out[(p, h)] = (v - mu) / sd
        elif how is Normalization.SUBTRACT_MEAN:
            out[(p, h)] = v - mu
        else:
            out[(p, h)] = v / mu if mu > 0 else 0.0
    return out


def label_window_anatomy(profile, baseline, band, how: Normalization = Normalization.ZSCORE):
    """Return ``(parcel, hemisphere, z)`` for the slot with the largest |z|.

    Ties go to the left hemisphere, then to the lower parcel id.
    """
    band = FrequencyBand.parse(band)
    if not any(k[2] is band for k in profile.power):
        raise ConfigError(f"profile has no {band.name} power")
    z = normalized_power(profile, baseline, band, how)
    best, best_abs = None, -1.0
    for slot in slots():  # already in tie-break order
        if slot in z and abs(z[slot]) > best_abs:
            best, best_abs = slot, abs(z[slot])
    return best[0], best[1], float(z[best])


def synthetic_lead_field(n_sensors: int = N_EEG_CHANNELS, n_sources: int = 92, seed: int = 0, sensor_names=None) -> LeadField:
    """Random unit-norm gain columns with sources spread over the 46 slots.

    Sources are assigned round-robin so every slot gets one before any
    gets two. Not a head model; it exists for tests and demos.
    """
    rng = np.random.default_rng(seed)
    gain = rng.standard_normal((n_sensors, n_sources))
    gain /= np.linalg.norm(gain, axis=0)
    order = slots()
    parcel_of = [order[i % len(order)] for i in range(n_sources)]
    if sensor_names is None:
        from .edf import CANONICAL_CHANNELS

        sensor_names = CANONICAL_CHANNELS if n_sensors == len(CANONICAL_CHANNELS) else [f"S{i}" for i in range(n_sensors)]
    return LeadField(gain, sensor_names, parcel_of)
