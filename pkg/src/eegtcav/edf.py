"""EDF/EDF+ ingestion, annotation tables, screening and channel mapping.

Physical values follow the standard EDF linear scaling::

    physical = (digital - dmin) * (pmax - pmin) / (dmax - dmin) + pmin

All samples are converted to microvolts.
"""

from __future__ import annotations

import csv
import io
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import (
    AnnotationRowError,
    DataError,
    DegenerateScalingError,
    MalformedHeaderError,
    MontageError,
    TruncationError,
)

logger = logging.getLogger(__name__)

CANONICAL_CHANNELS = (
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8",
    "T7", "C3", "Cz", "C4", "T8",
    "T5", "P3", "Pz", "P4", "T6", "O1", "O2",
)  # fmt: skip

CHANNEL_ALIASES = {"T3": "T7", "T4": "T8", "P7": "T5", "P8": "T6"}

_UNIT_TO_UV = {"uv": 1.0, "µv": 1.0, "μv": 1.0, "mv": 1e3, "v": 1e6, "nv": 1e-3}

ANNOTATION_LABEL = "EDF Annotations"


@dataclass(frozen=True)
class AnnotationSpan:
    label: str
    onset_s: float
    duration_s: float
    channel: Optional[str] = None

    def __post_init__(self):
        if self.onset_s < 0 or self.duration_s < 0:
            raise DataError(f"annotation {self.label!r} has negative onset or duration")

    @property
    def stop_s(self) -> float:
        return self.onset_s + self.duration_s


@dataclass(frozen=True)
class EegRecording:
    session_id: str
    channel_names: tuple
    sampling_rate_hz: float
    samples: np.ndarray  # [channels x time], microvolts
    annotations: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "channel_names", tuple(self.channel_names))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 2:
            raise DataError("samples must be a [channels x time] matrix")
        object.__setattr__(self, "samples", samples)
        if not self.sampling_rate_hz > 0:
            raise DataError("sampling_rate_hz must be positive")
        if len(self.channel_names) != samples.shape[0]:
            raise DataError(
                f"{len(self.channel_names)} channel names for {samples.shape[0]} rows"
            )
        if len(set(self.channel_names)) != len(self.channel_names):
            raise DataError("channel names must be unique")
        # one sample of slack for annotations that end exactly at the last sample
        limit = self.duration_s + 1.0 / self.sampling_rate_hz + 1e-9
        for span in self.annotations:
            if span.stop_s > limit:
                raise DataError(
                    f"annotation {span.label!r} ends at {span.stop_s:.3f} s, "
                    f"after the recording ({self.duration_s:.3f} s)"
                )

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sampling_rate_hz

    def with_annotations(self, spans: Iterable[AnnotationSpan]) -> "EegRecording":
        return replace(self, annotations=tuple(spans))


@dataclass(frozen=True)
class ScreeningCriteria:
    min_channels: int = 19
    min_duration_s: float = 60.0
    min_sampling_hz: float = 100.0
    max_abs_amplitude_uv: float = 500.0
    scale_bounds: tuple = (1e-3, 1e4)

    def __post_init__(self):
        values = (
            self.min_channels,
            self.min_duration_s,
            self.min_sampling_hz,
            self.max_abs_amplitude_uv,
            *self.scale_bounds,
        )
        if any(not v > 0 for v in values):
            raise DataError("screening thresholds must be positive")


@dataclass
class ScreeningResult:
    accepted: bool
    reasons: list = field(default_factory=list)

    def __bool__(self):
        return self.accepted


# --------------------------------------------------------------------------
# EDF parsing
# --------------------------------------------------------------------------


def _ascii(raw: bytes) -> str:
    return raw.decode("ascii", errors="replace").strip()


def _number(raw: bytes, what: str, cast=float):
    text = _ascii(raw)
    try:
        return cast(text) if cast is not int else int(float(text))
    except ValueError:
        raise MalformedHeaderError(f"{what}: not a number ({text!r})") from None


def _parse_tal(block: bytes) -> list:
    """Decode the time-stamped annotation lists of one annotation record."""
    spans = []
    for tal in block.split(b"\x00"):
        if not tal:
            continue
        fields = tal.split(b"\x14")
        stamp = fields[0].decode("latin-1")
        onset_text, _, duration_text = stamp.partition("\x15")
        try:
            onset = float(onset_text)
            duration = float(duration_text) if duration_text else 0.0
        except ValueError:
            raise MalformedHeaderError(f"bad TAL time stamp {stamp!r}") from None
        for text in fields[1:]:
            label = text.decode("utf-8", errors="replace")
            if label:
                spans.append(AnnotationSpan(label, max(onset, 0.0), duration))
    return spans


def parse_edf(data: bytes, session_id: str = "") -> EegRecording:
    """Parse a complete EDF or EDF+ byte stream.

    Ordinary signals sharing the dominant sampling rate become rows of
    ``samples``; EDF+ annotation signals are decoded into annotation spans.
    Signals at any other rate are dropped with a log message.
    """
    data = bytes(data)
    if len(data) < 256:
        raise TruncationError("file shorter than the 256-byte fixed header")
    if data[:8] != b"0       ":
        raise MalformedHeaderError(f"version field is {data[:8]!r}, expected '0'")

    header_bytes = _number(data[184:192], "header byte count", int)
    n_records = _number(data[236:244], "record count", int)
    record_duration = _number(data[244:252], "record duration")
    ns = _number(data[252:256], "signal count", int)
    if ns < 1:
        raise MalformedHeaderError("file declares no signals")
    if header_bytes != 256 * (ns + 1):
        raise MalformedHeaderError(
            f"header size {header_bytes} does not match {ns} signals"
        )
    if len(data) < header_bytes:
        raise TruncationError("file ends inside the signal headers")

    offset = 256

    def column(width, parse):
        nonlocal offset
        out = [parse(data[offset + i * width : offset + (i + 1) * width]) for i in range(ns)]
        offset += ns * width
        return out

    labels = column(16, _ascii)
    column(80, _ascii)  # transducer
    units = column(8, _ascii)
    pmin = column(8, lambda b: _number(b, "physical minimum"))
    pmax = column(8, lambda b: _number(b, "physical maximum"))
    dmin = column(8, lambda b: _number(b, "digital minimum"))
    dmax = column(8, lambda b: _number(b, "digital maximum"))
    column(80, _ascii)  # prefiltering
    nsamp = column(8, lambda b: _number(b, "samples per record", int))

    record_len = sum(nsamp)
    payload = len(data) - header_bytes
    if n_records < -1:
        raise MalformedHeaderError(f"record count {n_records} is invalid (only -1 means unknown)")
    if n_records == -1:
        if record_len == 0 or payload % (2 * record_len):
            raise TruncationError("unknown record count and partial final record")
        n_records = payload // (2 * record_len)
    expected = 2 * record_len * n_records
    if payload != expected:
        raise TruncationError(
            f"{n_records} records need {expected} data bytes, file has {payload}"
        )
    if record_duration <= 0 and n_records > 0:
        raise MalformedHeaderError("record duration must be positive")

    records = np.frombuffer(data, dtype="<i2", offset=header_bytes, count=record_len * n_records)
    records = records.reshape(n_records, record_len)
    starts = np.concatenate([[0], np.cumsum(nsamp)])

    annotations = []
    signal_rows = []
    for i, label in enumerate(labels):
        block = records[:, starts[i] : starts[i + 1]]
        if label == ANNOTATION_LABEL:
            for rec in block:
                annotations.extend(_parse_tal(rec.tobytes()))
            continue
        if dmax[i] == dmin[i]:
            raise DegenerateScalingError(f"signal {label!r}: digital max equals digital min")
        gain = (pmax[i] - pmin[i]) / (dmax[i] - dmin[i])
        physical = (block.reshape(-1).astype(np.float64) - dmin[i]) * gain + pmin[i]
        physical *= _UNIT_TO_UV.get(units[i].lower(), 1.0)
        signal_rows.append((label, nsamp[i], physical))

    if not signal_rows:
        raise DataError("EDF contains no ordinary signals")
    rate_counts = Counter(n for _, n, _ in signal_rows)
    keep_n = rate_counts.most_common(1)[0][0]
    dropped = [label for label, n, _ in signal_rows if n != keep_n]
    if dropped:
        logger.info("dropping signals with a different sampling rate: %s", dropped)
    rows = [(label, phys) for label, n, phys in signal_rows if n == keep_n]

    names = _dedupe([label for label, _ in rows])
    samples = np.vstack([phys for _, phys in rows])
    rate = keep_n / record_duration
    return EegRecording(session_id, names, rate, samples, annotations)


def _dedupe(names):
    seen = Counter()
    out = []
    for name in names:
        seen[name] += 1
        out.append(name if seen[name] == 1 else f"{name}#{seen[name]}")
    return out


def read_edf(path) -> EegRecording:
    path = Path(path)
    return parse_edf(path.read_bytes(), session_id=path.stem)


# --------------------------------------------------------------------------
# Annotation tables
# --------------------------------------------------------------------------


def parse_annotation_table(text) -> list:
    """Parse ``channel,onset_s,stop_s,label`` rows (header row required).

    ``text`` may be a string or a text stream. Blank lines are skipped and
    labels are kept verbatim.
    """
    if isinstance(text, str):
        text = io.StringIO(text)
    spans = []
    header_seen = False
    for lineno, row in enumerate(csv.reader(text), start=1):
        if not row or all(not cell.strip() for cell in row):
            continue
        if not header_seen:
            header_seen = True
            continue
        if len(row) != 4:
            raise AnnotationRowError(lineno, f"expected 4 fields, got {len(row)}")
        channel, onset_text, stop_text, label = row
        try:
            onset = float(onset_text)
            stop = float(stop_text)
        except ValueError:
            raise AnnotationRowError(lineno, "onset and stop must be numeric") from None
        if onset < 0:
            raise AnnotationRowError(lineno, "negative onset")
        if stop < onset:
            raise AnnotationRowError(lineno, f"stop {stop} precedes onset {onset}")
        spans.append(AnnotationSpan(label, onset, stop - onset, channel.strip() or None))
    return spans


def read_annotation_table(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_annotation_table(fh)


# --------------------------------------------------------------------------
# Screening and montage
# --------------------------------------------------------------------------


def screen_recording(rec: EegRecording, criteria: ScreeningCriteria) -> ScreeningResult:
    """Check a recording against the curation thresholds; never raises."""
    reasons = []
    n_channels = len(rec.channel_names)
    if n_channels < criteria.min_channels:
        reasons.append("channels")
    if rec.duration_s < criteria.min_duration_s:
        reasons.append("duration")
    if rec.sampling_rate_hz < criteria.min_sampling_hz:
        reasons.append("sampling rate")
    if rec.samples.size:
        peak = float(np.max(np.abs(rec.samples)))
        if not np.isfinite(peak) or peak > criteria.max_abs_amplitude_uv:
            reasons.append("extreme values")
        lo, hi = criteria.scale_bounds
        spread = float(np.median(np.std(rec.samples, axis=1)))
        if not lo <= spread <= hi:
            reasons.append("scaling")
    else:
        reasons.append("duration")
    return ScreeningResult(not reasons, reasons)


def normalize_channel_name(name: str) -> str:
    """Reduce labels such as ``'EEG FP1-REF'`` to ``'FP1'``."""
    name = name.strip().upper()
    if name.startswith("EEG "):
        name = name[4:].strip()
    return name.split("-")[0].strip()


def map_channels(rec: EegRecording) -> EegRecording:
    """Select and reorder the 19 scalp channels, applying legacy aliases.

    Channels outside the montage (EKG, photic, ...) are dropped.
    """
    by_name = {}
    for idx, raw in enumerate(rec.channel_names):
        name = normalize_channel_name(raw)
        name = CHANNEL_ALIASES.get(name, name)
        by_name.setdefault(name, idx)
    missing = [ch for ch in CANONICAL_CHANNELS if ch.upper() not in by_name]
    if missing:
        raise MontageError(missing)
    order = [by_name[ch.upper()] for ch in CANONICAL_CHANNELS]
    return replace(rec, channel_names=CANONICAL_CHANNELS, samples=rec.samples[order])
