"""Concept datasets: labeled events, random sets and anatomical concepts."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dsp import epoch_and_scale
from .errors import EmptyConceptError, ProtocolError, SampleSizeError, ShapeError
from .inverse import (
    FrequencyBand,
    InverseOperator,
    LeadField,
    SessionBaseline,
    band_parcel_power,
    eloreta,
    label_window_anatomy,
    session_baseline,
    slots,
)
from .stats import paired_t

logger = logging.getLogger(__name__)

SPARSE_THRESHOLD = 40
TRIM_S = 5.0
ANATOMY_WINDOW_S = 4.0


@dataclass
class ConceptDataset:
    name: str
    windows: list
    window_len_s: float
    provenance: dict = field(default_factory=dict)
    sparse: bool = False

    def __post_init__(self):
        if not self.windows:
            raise EmptyConceptError(f"concept {self.name!r} has no windows")
        if not self.provenance:
            raise ProtocolError(f"concept {self.name!r} has no provenance")
        for w in self.windows:
            if abs(w.duration_s - self.window_len_s) > 1e-9:
                raise ShapeError(
                    f"concept {self.name!r}: window of {w.duration_s} s in a {self.window_len_s} s concept"
                )
            w.validate()

    def __len__(self) -> int:
        return len(self.windows)


def build_labeled_concepts(recordings, label: str, window_len_s: float, stride_s: Optional[float] = None) -> ConceptDataset:
    """Tile every span carrying ``label`` into non-overlapping windows.

    Spans shorter than one window contribute nothing.
    """
    windows = []
    for rec in recordings:
        spans = [s for s in rec.annotations if s.label == label]
        if spans:
            windows.extend(epoch_and_scale(rec, spans, stride_s=stride_s, window_len_s=window_len_s))
    if not windows:
        raise EmptyConceptError(f"no complete {window_len_s} s windows for label {label!r}")
    return ConceptDataset(label, windows, window_len_s, {"kind": "labeled", "label": label})


def sample_random_concept_sets(pool, n_sets: int = 50, max_examples: int = 40, seed: int = 0) -> list:
    """Draw random concept sets from a pool of resting windows.

    Sets are pairwise disjoint when the pool holds ``n_sets * max_examples``
    windows; otherwise each set is drawn independently (distinct within a
    set, overlapping across sets).
    """
    pool = list(pool)
    if len(pool) < max_examples:
        raise SampleSizeError(f"pool of {len(pool)} windows is smaller than {max_examples}")
    if n_sets < 1:
        raise SampleSizeError("need at least one random set")
    rng = np.random.default_rng(seed)
    disjoint = len(pool) >= n_sets * max_examples
    if disjoint:
        order = rng.permutation(len(pool))
        picks = [np.sort(order[i * max_examples : (i + 1) * max_examples]) for i in range(n_sets)]
    else:
        logger.info("pool of %d too small for disjoint random sets; sets may overlap", len(pool))
        picks = [np.sort(rng.choice(len(pool), max_examples, replace=False)) for _ in range(n_sets)]
    out = []
    for i, idx in enumerate(picks):
        windows = [pool[j] for j in idx]
        out.append(
            ConceptDataset(
                f"random-{i}",
                windows,
                windows[0].duration_s,
                {"kind": "random", "seed": int(seed), "set_index": i, "disjoint": disjoint},
            )
        )
    return out


def anatomy_windows(rec, trim_s: float = TRIM_S, window_len_s: float = ANATOMY_WINDOW_S) -> list:
    """4 s windows of a recording after dropping its first and last seconds."""
    from .edf import AnnotationSpan

    start, stop = trim_s, rec.duration_s - trim_s
    if stop - start < window_len_s:
        return []
    span = AnnotationSpan("rest", start, stop - start)
    return epoch_and_scale(rec, [span], window_len_s=window_len_s)


def session_profiles(windows, inv: InverseOperator, lf: LeadField, bands) -> list:
    return [band_parcel_power(w, inv, lf, bands, window_index=i) for i, w in enumerate(windows)]


def build_anatomical_concepts(
    recordings,
    band,
    lf: LeadField,
    inv: Optional[InverseOperator] = None,
    alpha: float = 1e-4,
    min_examples: int = SPARSE_THRESHOLD,
    trim_s: float = TRIM_S,
    window_len_s: float = ANATOMY_WINDOW_S,
) -> dict:
    """Group resting windows by the (parcel, hemisphere) that deviates most.

    Each session is z-scored against its own baseline. Concepts with fewer
    than ``min_examples`` windows are kept but flagged ``sparse``.
    """
    band = FrequencyBand.parse(band)
    inv = inv or eloreta(lf, alpha=alpha)
    groups: dict = {}
    for rec in recordings:
        windows = anatomy_windows(rec, trim_s, window_len_s)
        if not windows:
            logger.info("session %s: no complete windows after trimming", rec.session_id)
            continue
        if len(windows) < 2:
            logger.info("session %s: one window, no baseline possible", rec.session_id)
            continue
        profiles = session_profiles(windows, inv, lf, [band])
        base = session_baseline(profiles)
        for w, prof in zip(windows, profiles):
            parcel, hemi, z = label_window_anatomy(prof, base, band)
            groups.setdefault((parcel, hemi), []).append(w)
    out = {}
    for (parcel, hemi), windows in sorted(groups.items(), key=lambda kv: slots().index(kv[0])):
        name = f"{band.name.lower()}-{hemi}{parcel}"
        out[(parcel, hemi)] = ConceptDataset(
            name,
            windows,
            window_len_s,
            {"kind": "anatomical", "band": band.name.lower(), "parcel": parcel, "hemisphere": hemi},
            sparse=len(windows) < min_examples,
        )
    return out


def paired_lateralization(z_left, z_right, labels) -> dict:
    """Paired t on ``z_left - z_right``, one test per label."""
    z_left = np.asarray(z_left, dtype=np.float64)
    z_right = np.asarray(z_right, dtype=np.float64)
    labels = list(labels)
    if not (len(z_left) == len(z_right) == len(labels)):
        raise ProtocolError("left/right z-scores and labels are not paired one to one")
    out = {}
    for lab in sorted(set(labels), key=str):
        mask = np.array([x == lab for x in labels])
        out[lab] = paired_t(z_left[mask], z_right[mask])
    return out


def lateralization_check(
    windows,
    lf: LeadField,
    parcel: int,
    band=FrequencyBand.ALPHA,
    inv: Optional[InverseOperator] = None,
    baselines: Optional[dict] = None,
) -> dict:
    """Compare left and right z-scored power of one parcel per event class.

    ``baselines`` maps session id to SessionBaseline; sessions without one
    are baselined on their own windows.
    """
    band = FrequencyBand.parse(band)
    inv = inv or eloreta(lf)
    windows = list(windows)
    profiles = session_profiles(windows, inv, lf, [band])
    baselines = dict(baselines or {})
    by_session: dict = {}
    for prof, w in zip(profiles, windows):
        by_session.setdefault(w.session_id, []).append(prof)
    for sid, profs in by_session.items():
        if sid not in baselines:
            baselines[sid] = session_baseline(profs)
    z_left, z_right = [], []
    for prof, w in zip(profiles, windows):
        base: SessionBaseline = baselines[w.session_id]
        kl, kr = (parcel, "L", band), (parcel, "R", band)
        if kl not in prof.power or kr not in prof.power:
            raise ProtocolError(f"parcel {parcel} lacks a left/right pair in the lead field")
        z_left.append((prof.power[kl] - base.mean[kl]) / base.std[kl])
        z_right.append((prof.power[kr] - base.mean[kr]) / base.std[kr])
    return paired_lateralization(z_left, z_right, [w.label for w in windows])
