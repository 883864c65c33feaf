"""FIR filtering, resampling and window extraction.

The preprocessing chain is highpass 0.1 Hz, lowpass 100 Hz, a 58-62 Hz
bandstop used as the 60 Hz notch, then resampling to 256 Hz. Windows are
scaled by their own peak into [-1, 1] and get a 20th channel encoding the
relative amplitude of the window.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np
from scipy import signal as sps

from .edf import AnnotationSpan, EegRecording
from .errors import DataError, FilterDesignError, ShapeError

logger = logging.getLogger(__name__)

TARGET_RATE_HZ = 256.0
N_EEG_CHANNELS = 19
N_WINDOW_CHANNELS = N_EEG_CHANNELS + 1
KINDS = ("lowpass", "highpass", "bandpass", "bandstop")


@dataclass(frozen=True)
class FirFilter:
    taps: np.ndarray
    kind: str
    cutoffs_hz: tuple
    sampling_hz: float
    window_function: str = "hamming"

    @property
    def num_taps(self) -> int:
        return len(self.taps)

    def response(self, freqs_hz) -> np.ndarray:
        return frequency_response(self.taps, freqs_hz, self.sampling_hz)


def frequency_response(taps, freqs_hz, sampling_hz) -> np.ndarray:
    """Complex response of ``taps`` at the given frequencies (direct DTFT sum)."""
    freqs = np.atleast_1d(np.asarray(freqs_hz, dtype=np.float64))
    n = np.arange(len(taps))
    phase = np.exp(-2j * np.pi * np.outer(freqs / sampling_hz, n))
    return phase @ np.asarray(taps, dtype=np.float64)


def transition_width(edge_hz: float, sampling_hz: float, lower_edge: bool) -> float:
    """Default transition band for one cutoff edge."""
    nyq = sampling_hz / 2.0
    if lower_edge:
        return min(max(0.25 * edge_hz, 2.0), edge_hz)
    return min(max(0.25 * edge_hz, 2.0), nyq - edge_hz)


def auto_num_taps(kind, cutoffs_hz, sampling_hz, transition_hz=None) -> int:
    """Hamming-window length from the 3.3 / transition-width rule, made odd."""
    cutoffs = _as_cutoffs(cutoffs_hz)
    if transition_hz is None:
        if kind == "lowpass":
            widths = [transition_width(cutoffs[0], sampling_hz, lower_edge=False)]
        elif kind == "highpass":
            widths = [transition_width(cutoffs[0], sampling_hz, lower_edge=True)]
        else:
            widths = [
                transition_width(cutoffs[0], sampling_hz, lower_edge=True),
                transition_width(cutoffs[1], sampling_hz, lower_edge=False),
            ]
        transition_hz = min(widths)
    if transition_hz <= 0:
        raise FilterDesignError("transition width must be positive")
    n = int(math.ceil(3.3 * sampling_hz / transition_hz))
    return max(n | 1, 3)


def _as_cutoffs(cutoffs_hz) -> tuple:
    if np.isscalar(cutoffs_hz):
        return (float(cutoffs_hz),)
    return tuple(float(c) for c in cutoffs_hz)


def _windowed_lowpass(cutoff_hz, sampling_hz, num_taps) -> np.ndarray:
    m = np.arange(num_taps) - (num_taps - 1) / 2.0
    fc = 2.0 * cutoff_hz / sampling_hz
    return fc * np.sinc(fc * m) * np.hamming(num_taps)


def _delta(num_taps) -> np.ndarray:
    d = np.zeros(num_taps)
    d[num_taps // 2] = 1.0
    return d


def design_firwin(kind, cutoffs_hz, sampling_hz, num_taps=None, transition_hz=None) -> FirFilter:
    """Windowed-sinc FIR design with a Hamming window.

    Lowpass and bandstop filters have unit gain at DC, bandpass filters at
    the band centre. Highpass filters are the spectral inversion of a
    unit-DC lowpass, which makes the DC response vanish to rounding error
    and leaves the Nyquist gain within the stopband ripple of 1.
    """
    if kind not in KINDS:
        raise FilterDesignError(f"unknown filter kind {kind!r}")
    cutoffs = _as_cutoffs(cutoffs_hz)
    nyq = sampling_hz / 2.0
    expected = 1 if kind in ("lowpass", "highpass") else 2
    if len(cutoffs) != expected:
        raise FilterDesignError(f"{kind} needs {expected} cutoff(s), got {len(cutoffs)}")
    if any(not 0 < c < nyq for c in cutoffs):
        raise FilterDesignError(f"cutoffs {cutoffs} must lie strictly inside (0, {nyq}) Hz")
    if expected == 2 and not cutoffs[0] < cutoffs[1]:
        raise FilterDesignError("band edges must be increasing")
    if num_taps is None:
        num_taps = auto_num_taps(kind, cutoffs, sampling_hz, transition_hz)
    num_taps = int(num_taps)
    if num_taps < 3:
        raise FilterDesignError("num_taps must be at least 3")
    if kind in ("highpass", "bandstop") and num_taps % 2 == 0:
        raise FilterDesignError(f"{kind} filters need an odd number of taps")

    if kind == "lowpass":
        taps = _windowed_lowpass(cutoffs[0], sampling_hz, num_taps)
        taps /= taps.sum()
    elif kind == "highpass":
        lp = _windowed_lowpass(cutoffs[0], sampling_hz, num_taps)
        taps = _delta(num_taps) - lp / lp.sum()
    elif kind == "bandpass":
        taps = _windowed_lowpass(cutoffs[1], sampling_hz, num_taps) - _windowed_lowpass(
            cutoffs[0], sampling_hz, num_taps
        )
        centre = 0.5 * (cutoffs[0] + cutoffs[1])
        taps /= abs(frequency_response(taps, centre, sampling_hz)[0])
    else:
        band = _windowed_lowpass(cutoffs[1], sampling_hz, num_taps) - _windowed_lowpass(
            cutoffs[0], sampling_hz, num_taps
        )
        taps = _delta(num_taps) - band
        taps /= taps.sum()
    # exact linear-phase symmetry
    taps = 0.5 * (taps + taps[::-1])
    return FirFilter(taps, kind, cutoffs, float(sampling_hz))


def apply_filter(x, fir) -> np.ndarray:
    """Filter along the last axis with the group delay removed.

    Edges are reflect-padded so the output has the input's length and is
    time-aligned with it.
    """
    taps = fir.taps if isinstance(fir, FirFilter) else np.asarray(fir, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    n = len(taps)
    length = x.shape[-1]
    if length < n:
        raise ShapeError(f"signal of {length} samples is shorter than the {n}-tap filter")
    left = n // 2
    right = n - 1 - left
    pad = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    padded = np.pad(x, pad, mode="reflect")
    kernel = taps.reshape((1,) * (x.ndim - 1) + (n,))
    return sps.oaconvolve(padded, kernel, mode="valid", axes=-1)


def resample(rec: EegRecording, target_hz: float) -> EegRecording:
    """Polyphase rational resampling of every channel.

    The anti-alias lowpass sits at the smaller of the two Nyquist rates
    (scipy's ``resample_poly`` design). Output length is
    ``round(n * target / source)``.
    """
    if not target_hz > 0:
        raise DataError(f"target rate must be positive, got {target_hz}")
    source = rec.sampling_rate_hz
    if target_hz == source:
        return rec
    ratio = Fraction(target_hz / source).limit_denominator(10_000)
    up, down = ratio.numerator, ratio.denominator
    if abs(up / down - target_hz / source) > 1e-9 * target_hz / source:
        raise DataError(f"rate ratio {target_hz}/{source} is not a small rational")
    n_out = int(round(rec.n_samples * target_hz / source))
    y = sps.resample_poly(rec.samples, up, down, axis=1, padtype="line")
    y = y[:, :n_out]
    if y.shape[1] < n_out:
        y = np.pad(y, [(0, 0), (0, n_out - y.shape[1])], mode="edge")
    return replace(rec, samples=y, sampling_rate_hz=float(target_hz))


@dataclass(frozen=True)
class PreprocessConfig:
    highpass_hz: float = 0.1
    lowpass_hz: float = 100.0
    notch_band_hz: tuple = (58.0, 62.0)
    notch_transition_hz: float = 2.0
    target_rate_hz: float = TARGET_RATE_HZ


def preprocess(rec: EegRecording, config: PreprocessConfig = PreprocessConfig()):
    """Run the filter chain and resample; returns ``None`` when the
    recording cannot be processed (it is then excluded, not fatal).

    Stages whose band lies at or above the current Nyquist rate are
    skipped because the signal holds no energy there.
    """
    try:
        fs = rec.sampling_rate_hz
        nyq = fs / 2.0
        x = rec.samples
        x = apply_filter(x, design_firwin("highpass", config.highpass_hz, fs))
        if config.lowpass_hz < nyq:
            x = apply_filter(x, design_firwin("lowpass", config.lowpass_hz, fs))
        else:
            logger.info("%s: lowpass %.1f Hz skipped at %.1f Hz", rec.session_id, config.lowpass_hz, fs)
        if config.notch_band_hz[1] < nyq:
            notch = design_firwin(
                "bandstop", config.notch_band_hz, fs, transition_hz=config.notch_transition_hz
            )
            x = apply_filter(x, notch)
        out = replace(rec, samples=x)
        return resample(out, config.target_rate_hz)
    except (DataError, ValueError) as exc:
        logger.warning("%s excluded from preprocessing: %s", rec.session_id, exc)
        return None


# --------------------------------------------------------------------------
# Windows
# --------------------------------------------------------------------------


@dataclass
class Window:
    """Scaled model input: 19 EEG rows plus one amplitude row.

    ``scale_uv`` is the peak absolute EEG amplitude the rows were divided
    by, so ``data[:19] * scale_uv`` recovers microvolts.
    """

    data: np.ndarray
    sampling_rate_hz: float
    duration_s: float
    label: Optional[str] = None
    session_id: str = ""
    scale_uv: float = 1.0
    start_s: float = 0.0

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def eeg_uv(self) -> np.ndarray:
        return self.data[:N_EEG_CHANNELS].astype(np.float64) * self.scale_uv

    def validate(self) -> None:
        if self.data.ndim != 2 or self.data.shape[0] != N_WINDOW_CHANNELS:
            raise ShapeError(f"window must have {N_WINDOW_CHANNELS} rows, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)) or np.max(np.abs(self.data)) > 1.0:
            raise DataError("window values must be finite and inside [-1, 1]")
        expected = self.duration_s * self.sampling_rate_hz
        if abs(expected - self.n_samples) > 1e-6:
            raise ShapeError(f"{self.n_samples} samples for {self.duration_s} s at {self.sampling_rate_hz} Hz")


def scale_window(eeg_uv, reference_uv: float = 100.0):
    """Peak-normalise a [19 x n] block and build the amplitude channel.

    Returns ``(data, scale)`` where data is float32 [20 x n].
    """
    eeg_uv = np.asarray(eeg_uv, dtype=np.float64)
    peak = float(np.max(np.abs(eeg_uv))) if eeg_uv.size else 0.0
    if peak == 0.0:
        scale, amplitude = 1.0, -1.0
    else:
        scale = peak
        amplitude = min(max(peak / reference_uv, 0.0), 1.0) * 2.0 - 1.0
    data = np.empty((eeg_uv.shape[0] + 1, eeg_uv.shape[1]), dtype=np.float32)
    data[:-1] = eeg_uv / scale
    data[-1] = amplitude
    return data, scale


def window_starts(start: int, stop: int, length: int, stride: int) -> range:
    """Start indices of complete windows of ``length`` inside [start, stop)."""
    if stop - start < length:
        return range(0)
    return range(start, stop - length + 1, stride)


def epoch_and_scale(
    rec: EegRecording,
    spans: Optional[Sequence[AnnotationSpan]] = None,
    stride_s: Optional[float] = None,
    window_len_s: float = 4.0,
    reference_uv: float = 100.0,
    label: Optional[str] = None,
) -> list:
    """Cut fixed-length scaled windows.

    With ``spans`` each span is tiled separately and windows take the span
    label; otherwise the whole recording is tiled. ``stride_s`` defaults to
    the window length (no overlap).
    """
    fs = rec.sampling_rate_hz
    length = window_len_s * fs
    if abs(length - round(length)) > 1e-9 or round(length) < 1:
        raise DataError(f"window length {window_len_s} s is not a whole number of samples at {fs} Hz")
    length = int(round(length))
    stride = length if stride_s is None else int(round(stride_s * fs))
    if stride < 1:
        raise DataError("stride must be at least one sample")

    if spans is None:
        segments = [(0, rec.n_samples, label)]
    else:
        segments = [
            (int(round(s.onset_s * fs)), min(int(round(s.stop_s * fs)), rec.n_samples), s.label)
            for s in spans
        ]
    windows = []
    for start, stop, seg_label in segments:
        for i in window_starts(start, stop, length, stride):
            data, scale = scale_window(rec.samples[:, i : i + length], reference_uv)
            windows.append(
                Window(data, fs, window_len_s, seg_label, rec.session_id, scale, i / fs)
            )
    return windows


def stack_windows(windows) -> np.ndarray:
    if not windows:
        raise DataError("no windows to stack")
    lengths = {w.n_samples for w in windows}
    if len(lengths) != 1:
        raise ShapeError(f"windows have mixed lengths {sorted(lengths)}")
    return np.stack([w.data for w in windows])
