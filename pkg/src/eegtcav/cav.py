"""Concept activation vectors from a hinge-loss linear classifier."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import NumericError, SampleSizeError, ShapeError

WEAK_ACCURACY = 0.6


@dataclass(frozen=True)
class CavHyper:
    regularization_alpha: float = 0.1
    epochs: int = 50
    learning_rate: float = 0.01
    power_t: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.regularization_alpha < 0:
            raise ValueError("regularization_alpha must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass(frozen=True)
class Cav:
    bottleneck: object
    vector: np.ndarray
    bias: float
    accuracy: float
    concept_id: str = ""
    random_set_id: str = ""

    @property
    def weak(self) -> bool:
        return self.accuracy < WEAK_ACCURACY

    def score(self, acts) -> np.ndarray:
        return np.asarray(acts, dtype=np.float64) @ self.vector + self.bias


@dataclass
class CavJob:
    concept_acts: np.ndarray
    random_acts: np.ndarray
    seed: int
    bottleneck: object = None
    concept_id: str = ""
    random_set_id: str = ""


def _prepare(job: CavJob):
    c = np.asarray(job.concept_acts, dtype=np.float64)
    r = np.asarray(job.random_acts, dtype=np.float64)
    if c.ndim != 2 or r.ndim != 2 or c.shape[1] != r.shape[1]:
        raise ShapeError(f"activation matrices disagree: {c.shape} vs {r.shape}")
    if len(c) < 2 or len(r) < 2:
        raise SampleSizeError("need at least two rows on each side of a CAV")
    rng = np.random.default_rng(job.seed)
    # equal class sizes by subsampling the larger side
    n = min(len(c), len(r))
    if len(c) > n:
        c = c[np.sort(rng.choice(len(c), n, replace=False))]
    if len(r) > n:
        r = r[np.sort(rng.choice(len(r), n, replace=False))]
    x = np.concatenate([c, r])
    y = np.concatenate([np.ones(n), -np.ones(n)])
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd == 0] = 1.0
    return (x - mu) / sd, y, mu, sd, rng


def train_cavs(jobs, hyper: CavHyper = CavHyper()) -> list:
    """Train many CAVs; jobs of equal shape run in lockstep.

    Each job is trained exactly as :func:`train_cav` would train it alone.
    """
    jobs = list(jobs)
    prepared = [_prepare(job) for job in jobs]
    results: list = [None] * len(jobs)
    groups: dict = {}
    for i, (x, *_rest) in enumerate(prepared):
        groups.setdefault(x.shape, []).append(i)
    for shape, members in groups.items():
        n, d = shape
        xs = np.stack([prepared[i][0] for i in members])
        ys = np.stack([prepared[i][1] for i in members])
        orders = np.stack(
            [
                np.concatenate([prepared[i][4].permutation(n) for _ in range(hyper.epochs)])
                for i in members
            ]
        )
        w, b = _sgd_hinge(xs, ys, orders, hyper)
        for row, i in enumerate(members):
            results[i] = _finish(jobs[i], prepared[i], w[row], b[row])
    return results


def _sgd_hinge(xs, ys, orders, hyper):
    """Per-sample SGD on L2-regularised hinge loss, inverse-scaling rate."""
    jobs, n, d = xs.shape
    w = np.zeros((jobs, d))
    b = np.zeros(jobs)
    rows = np.arange(jobs)
    alpha = hyper.regularization_alpha
    for t in range(orders.shape[1]):
        eta = hyper.learning_rate / (t + 1.0) ** hyper.power_t
        idx = orders[:, t]
        xi = xs[rows, idx]
        yi = ys[rows, idx]
        margin = yi * ((w * xi).sum(axis=1) + b)
        w *= 1.0 - eta * alpha
        step = eta * yi * (margin < 1.0)
        w += step[:, None] * xi
        b += step
    return w, b


def _finish(job: CavJob, prepared, w, b) -> Cav:
    x, y, mu, sd, _ = prepared
    raw = w / sd
    raw_bias = b - float(np.sum(w * mu / sd))
    norm = float(np.linalg.norm(raw))
    if not np.isfinite(norm) or norm == 0.0:
        raise NumericError("CAV training produced a zero or non-finite normal vector")
    vector = raw / norm
    bias = raw_bias / norm
    scores = x @ w + b
    if scores[y > 0].mean() < scores[y < 0].mean():
        vector, bias, scores = -vector, -bias, -scores
    accuracy = float(np.mean((scores > 0) == (y > 0)))
    return Cav(job.bottleneck, vector, bias, accuracy, job.concept_id, job.random_set_id)


def train_cav(
    concept_acts,
    random_acts,
    hyper: CavHyper = CavHyper(),
    bottleneck=None,
    concept_id: str = "",
    random_set_id: str = "",
    seed: Optional[int] = None,
) -> Cav:
    """Fit the concept-vs-random hyperplane and return its unit normal.

    Features are standardised with the pooled mean/std before SGD; the
    normal is mapped back to raw activation coordinates and oriented so
    concept rows score higher. ``accuracy`` is measured on the training
    rows.
    """
    job = CavJob(
        concept_acts,
        random_acts,
        hyper.seed if seed is None else seed,
        bottleneck,
        concept_id,
        random_set_id,
    )
    return train_cavs([job], hyper)[0]


def cross_validated_accuracy(concept_acts, random_acts, hyper: CavHyper = CavHyper(), folds: int = 5) -> float:
    """Held-out accuracy of the CAV classifier by stratified k-fold.

    Training accuracy saturates whenever the activation dimension exceeds
    the number of rows; this estimate does not.
    """
    c = np.asarray(concept_acts, dtype=np.float64)
    r = np.asarray(random_acts, dtype=np.float64)
    rng = np.random.default_rng(hyper.seed)
    c_fold = rng.permutation(len(c)) % folds
    r_fold = rng.permutation(len(r)) % folds
    jobs = [
        CavJob(c[c_fold != f], r[r_fold != f], hyper.seed + f) for f in range(folds)
    ]
    cavs = train_cavs(jobs, hyper)
    correct = 0
    for f, cav in enumerate(cavs):
        correct += int(np.sum(cav.score(c[c_fold == f]) > 0))
        correct += int(np.sum(cav.score(r[r_fold == f]) <= 0))
    return correct / (len(c) + len(r))
