"""Synthetic EEG for tests and demos.

Sources carry 1/f background activity; sources in the motor parcel also
carry a 10 Hz rhythm. During a "left" event the right-hemisphere motor
rhythm is suppressed (and vice versa), the usual contralateral alpha
desynchronization. Sensor data is the lead-field projection plus white
sensor noise, in microvolts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .edf import CANONICAL_CHANNELS, AnnotationSpan, EegRecording
from .inverse import LeadField, synthetic_lead_field

MOTOR_PARCEL = 7
CONTRALATERAL = {"left": "R", "right": "L"}


@dataclass(frozen=True)
class SyntheticSpec:
    sampling_rate_hz: float = 256.0
    background_uv: float = 4.0
    rhythm_uv: float = 25.0
    rhythm_hz: float = 10.0
    rhythm_bandwidth_hz: float = 2.0
    desync: float = 0.1  # rhythm gain during contralateral events
    sensor_noise_uv: float = 1.0


def _shaped_noise(rng, n_rows: int, n: int, fs: float, shape) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal((n_rows, n)), axis=1)
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    spec *= shape(freqs)
    out = np.fft.irfft(spec, n=n, axis=1)
    sd = out.std(axis=1, keepdims=True)
    sd[sd == 0] = 1.0
    return out / sd


def pink_noise(rng, n_rows: int, n: int, fs: float) -> np.ndarray:
    """Unit-variance rows with a 1/f power spectrum above 1 Hz."""
    return _shaped_noise(rng, n_rows, n, fs, lambda f: 1.0 / np.sqrt(np.maximum(f, 1.0)))


def narrowband(rng, n_rows: int, n: int, fs: float, center: float, width: float) -> np.ndarray:
    """Unit-variance rows with a Gaussian spectral peak."""
    return _shaped_noise(rng, n_rows, n, fs, lambda f: np.exp(-0.5 * ((f - center) / (width / 2.0)) ** 2))


def source_activity(lf: LeadField, n: int, rng, spec: SyntheticSpec = SyntheticSpec(), gain_L=None, gain_R=None) -> np.ndarray:
    """[N sources x n] source time courses.

    ``gain_L`` / ``gain_R`` are per-sample rhythm gains for the left and
    right motor parcel (default 1).
    """
    fs = spec.sampling_rate_hz
    s = spec.background_uv * pink_noise(rng, lf.n_sources, n, fs)
    for hemi, gain in (("L", gain_L), ("R", gain_R)):
        idx = lf.sources_in(MOTOR_PARCEL, hemi)
        if idx.size == 0:
            continue
        rhythm = spec.rhythm_uv * narrowband(rng, idx.size, n, fs, spec.rhythm_hz, spec.rhythm_bandwidth_hz)
        if gain is not None:
            rhythm = rhythm * gain
        s[idx] += rhythm
    return s


def motor_session(
    lf: LeadField,
    events,
    duration_s: float,
    seed: int,
    spec: SyntheticSpec = SyntheticSpec(),
    session_id: str = "",
) -> EegRecording:
    """One session with annotated motor events.

    ``events`` is a list of ``(label, onset_s, duration_s)``; labels
    "left" and "right" suppress the contralateral motor rhythm, any other
    label leaves it intact.
    """
    rng = np.random.default_rng(seed)
    fs = spec.sampling_rate_hz
    n = int(round(duration_s * fs))
    gains = {"L": np.ones(n), "R": np.ones(n)}
    spans = []
    for label, onset, dur in events:
        a, b = int(round(onset * fs)), min(n, int(round((onset + dur) * fs)))
        if label in CONTRALATERAL:
            gains[CONTRALATERAL[label]][a:b] = spec.desync
        spans.append(AnnotationSpan(label, float(onset), float(dur)))
    s = source_activity(lf, n, rng, spec, gains["L"], gains["R"])
    x = lf.gain @ s + spec.sensor_noise_uv * rng.standard_normal((lf.n_sensors, n))
    names = lf.sensor_names if len(lf.sensor_names) == len(CANONICAL_CHANNELS) else CANONICAL_CHANNELS
    return EegRecording(session_id or f"synthetic-{seed}", tuple(names), fs, x, tuple(spans))


def alternating_events(n_events: int, event_s: float = 4.0, rest_s: float = 4.0, start_s: float = 2.0, labels=("left", "right")):
    """Event schedule cycling through ``labels`` separated by rest."""
    events = []
    t = start_s
    for i in range(n_events):
        events.append((labels[i % len(labels)], t, event_s))
        t += event_s + rest_s
    return events, t + start_s


def resting_session(lf: LeadField, duration_s: float, seed: int, spec: SyntheticSpec = SyntheticSpec(), session_id: str = "") -> EegRecording:
    return motor_session(lf, [], duration_s, seed, spec, session_id or f"rest-{seed}")


def default_lead_field(seed: int = 0) -> LeadField:
    return synthetic_lead_field(len(CANONICAL_CHANNELS), 92, seed)
