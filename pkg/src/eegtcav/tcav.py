"""Conceptual sensitivity, TCAV scores and the significance protocol.

For each bottleneck and random set ``i`` a CAV is trained for the concept
against random set ``i`` and scored over the target-class examples. A
baseline CAV is trained for random set ``i`` against random set
``(i + 1) mod N``. The two score samples are compared with a two-sided
Mann-Whitney U test and Bonferroni-corrected over every (concept,
bottleneck) pair in the experiment.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cav import CavHyper, CavJob, train_cavs
from .errors import EegTcavError, ProtocolError, SampleSizeError, ShapeError
from .model import BOTTLENECKS, Bottleneck, LhbWeights, _Pass
from .stats import bonferroni, mann_whitney_u

logger = logging.getLogger(__name__)

TEST_NAME = "mann-whitney-u two-sided"


def sensitivity(grad, cav) -> float:
    """Directional derivative of the class logit along the CAV."""
    g = np.asarray(grad, dtype=np.float64).ravel()
    v = np.asarray(getattr(cav, "vector", cav), dtype=np.float64).ravel()
    if g.shape != v.shape:
        raise ShapeError(f"gradient length {g.size} != CAV length {v.size}")
    return float(g @ v)


def tcav_score(sens) -> float:
    """Fraction of strictly positive sensitivities (zeros count as negative)."""
    s = np.asarray(sens, dtype=np.float64).ravel()
    if s.size == 0:
        raise SampleSizeError("TCAV score of an empty sample")
    return float(np.count_nonzero(s > 0)) / s.size


@dataclass
class TcavResult:
    concept_id: str
    target_class: int
    bottleneck: Bottleneck
    concept_scores: list
    baseline_scores: list
    mean_score: float
    p_raw: float
    p_corrected: float
    significant: bool
    direction: str
    cav_accuracies: list = field(default_factory=list)
    test: str = TEST_NAME

    @property
    def n_runs(self) -> int:
        return len(self.concept_scores)

    @property
    def weak_cavs(self) -> int:
        from .cav import WEAK_ACCURACY

        return sum(a < WEAK_ACCURACY for a in self.cav_accuracies)


@dataclass(frozen=True)
class TcavHyper:
    max_examples: int = 40
    significance: float = 0.05
    seed: int = 0
    cav: CavHyper = CavHyper()
    multiplicity: Optional[int] = None  # default: #concepts x #bottlenecks


def _windows_of(item):
    """Accept a ConceptDataset-like object, a (name, windows) pair or a list."""
    if hasattr(item, "windows"):
        return getattr(item, "name", ""), list(item.windows)
    if isinstance(item, tuple) and len(item) == 2 and isinstance(item[0], str):
        return item[0], list(item[1])
    return "", list(item)


def _stack(windows) -> np.ndarray:
    if not windows:
        raise SampleSizeError("empty window set")
    return np.stack([np.asarray(getattr(w, "data", w), dtype=np.float64) for w in windows])


class ActivationCache:
    """Eval-mode activations and class gradients, computed once per window.

    Entries are keyed by window identity; the cache keeps a reference to
    every window it has seen so identities stay unique while it lives.
    """

    def __init__(self, weights: LhbWeights, chunk: int = 128):
        self.weights = weights
        self.chunk = chunk
        self._acts: dict = {}
        self._grads: dict = {}
        self._keep: dict = {}

    def _fill(self, store, key_of, windows, compute):
        missing = [w for w in windows if key_of(w) not in store]
        for i in range(0, len(missing), self.chunk):
            part = missing[i : i + self.chunk]
            rows = compute(_stack(part))
            for w, row in zip(part, rows):
                self._keep[id(w)] = w
                store[key_of(w)] = row
        return [store[key_of(w)] for w in windows]

    def activations(self, windows) -> dict:
        """``{bottleneck: [n x size]}`` for a list of windows."""

        def compute(x):
            run = _Pass(self.weights, x)
            flat = {b: run.flat(b) for b in BOTTLENECKS}
            return [{b: flat[b][j] for b in BOTTLENECKS} for j in range(len(x))]

        rows = self._fill(self._acts, id, list(windows), compute)
        return {b: np.stack([r[b] for r in rows]) for b in BOTTLENECKS}

    def gradients(self, windows, bottleneck: Bottleneck, k: int) -> np.ndarray:
        """``[n x size]`` gradients of logit ``k`` at ``bottleneck``."""

        def compute(x):
            run = _Pass(self.weights, x)
            dlogits = np.zeros_like(run.logits)
            dlogits[:, k] = 1.0
            g = run.backward(dlogits, stop_at=bottleneck)
            return list(g.reshape(g.shape[0], -1))

        rows = self._fill(self._grads, lambda w: (id(w), bottleneck, k), list(windows), compute)
        return np.stack(rows)


def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def run_tcav(
    weights: LhbWeights,
    target_windows,
    concepts,
    random_sets: Sequence,
    bottlenecks=BOTTLENECKS,
    target_class: int = 0,
    hyper: TcavHyper = TcavHyper(),
    cache: Optional[ActivationCache] = None,
) -> list:
    """Run the TCAV protocol for one or more concepts.

    ``concepts`` is a ConceptDataset, a ``(name, windows)`` pair, or a list
    of either. Concept sets larger than ``hyper.max_examples`` are
    subsampled afresh (seeded) for every random set; random sets are
    subsampled once. Results are ordered concept-major, bottleneck-minor.
    """
    if hasattr(concepts, "windows") or (isinstance(concepts, tuple) and len(concepts) == 2 and isinstance(concepts[0], str)):
        concepts = [concepts]
    concepts = [_windows_of(c) for c in concepts]
    bottlenecks = [Bottleneck.parse(b) for b in bottlenecks]
    if len(random_sets) < 2:
        raise ProtocolError("the TCAV protocol needs at least two random sets")
    if not 0 <= target_class < weights.config.num_classes:
        raise IndexError(f"target class {target_class} out of range")
    cache = cache or ActivationCache(weights)
    m = hyper.multiplicity or len(concepts) * len(bottlenecks)
    cap = hyper.max_examples

    target_windows = list(target_windows)
    if not target_windows:
        raise SampleSizeError("no target-class windows")
    rng = np.random.default_rng(_seed(hyper.seed, 1))
    randoms = []
    for i, rs in enumerate(random_sets):
        _, windows = _windows_of(rs)
        if len(windows) > cap:
            keep = np.sort(rng.choice(len(windows), cap, replace=False))
            windows = [windows[j] for j in keep]
        randoms.append(cache.activations(windows))
    n_sets = len(randoms)

    concept_acts = [cache.activations(windows) for _, windows in concepts]

    results = []
    baseline_scores = {}
    for b in bottlenecks:
        grads = cache.gradients(target_windows, b, target_class)
        jobs = [
            CavJob(randoms[i][b], randoms[(i + 1) % n_sets][b], _seed(hyper.seed, 2, b.index, i), b, f"random-{i}", f"random-{(i + 1) % n_sets}")
            for i in range(n_sets)
        ]
        baseline_cavs = train_cavs(jobs, hyper.cav)
        baseline_scores[b] = [tcav_score(grads @ cav.vector) for cav in baseline_cavs]

    for ci, (name, _) in enumerate(concepts):
        acts = concept_acts[ci]
        n_concept = len(next(iter(acts.values())))
        for b in bottlenecks:
            grads = cache.gradients(target_windows, b, target_class)
            jobs = []
            for i in range(n_sets):
                rows = acts[b]
                if n_concept > cap:
                    sub = np.random.default_rng(_seed(hyper.seed, 3, ci, i))
                    rows = rows[np.sort(sub.choice(n_concept, cap, replace=False))]
                jobs.append(CavJob(rows, randoms[i][b], _seed(hyper.seed, 4, ci, b.index, i), b, name, f"random-{i}"))
            try:
                cavs = train_cavs(jobs, hyper.cav)
                scores = [tcav_score(grads @ cav.vector) for cav in cavs]
                test = mann_whitney_u(scores, baseline_scores[b])
            except EegTcavError as exc:
                exc.args = (f"concept {name!r} at {b.value}: {exc}",)
                raise
            p_corr = bonferroni(test.p_two_sided, m)
            mean = float(np.mean(scores))
            results.append(
                TcavResult(
                    concept_id=name,
                    target_class=target_class,
                    bottleneck=b,
                    concept_scores=scores,
                    baseline_scores=list(baseline_scores[b]),
                    mean_score=mean,
                    p_raw=test.p_two_sided,
                    p_corrected=p_corr,
                    significant=p_corr < hyper.significance,
                    direction="positive" if mean > 0.5 else "negative",
                    cav_accuracies=[c.accuracy for c in cavs],
                )
            )
            logger.info(
                "%s @ %s: mean %.3f p_raw %.3g p_corr %.3g", name, b.value, mean, test.p_two_sided, p_corr
            )
    return results
