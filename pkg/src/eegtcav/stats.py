"""Hypothesis tests used by the TCAV protocol and the lateralization check."""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy import special

from .errors import DegenerateTestError, SampleSizeError

EXACT_MAX_N = 12

EXACT = "exact-enumeration"
NORMAL = "normal-approximation"
STUDENT_T = "t-distribution"


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_two_sided: float
    method: str
    n_a: int
    n_b: int

    __test__ = False  # not a pytest class


def midranks(values) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _exact_distribution(n_a: int, n: int) -> np.ndarray:
    """U values of every assignment of ranks 1..n to a group of size n_a."""
    offset = n_a * (n_a + 1) // 2
    return np.array([sum(c) + n_a - offset for c in combinations(range(n), n_a)], dtype=np.float64)


def mann_whitney_u(a, b) -> TestResult:
    """Two-sided Mann-Whitney U test; the statistic is U for sample ``a``.

    Exact p by enumerating all rank assignments when the pooled size is at
    most 12 and there are no ties; otherwise the normal approximation with
    tie and continuity corrections.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    n_a, n_b = len(a), len(b)
    if n_a == 0 or n_b == 0:
        raise SampleSizeError("both samples must be nonempty")
    pooled = np.concatenate([a, b])
    n = n_a + n_b
    ranks = midranks(pooled)
    u = float(ranks[:n_a].sum() - n_a * (n_a + 1) / 2.0)
    has_ties = len(np.unique(pooled)) < n

    if n <= EXACT_MAX_N and not has_ties:
        dist = _exact_distribution(n_a, n)
        lower = np.mean(dist <= u)
        upper = np.mean(dist >= u)
        p = min(1.0, 2.0 * min(lower, upper))
        return TestResult(u, float(p), EXACT, n_a, n_b)

    mu = n_a * n_b / 2.0
    _, counts = np.unique(pooled, return_counts=True)
    tie_term = float(np.sum(counts**3 - counts)) / (n * (n - 1)) if n > 1 else 0.0
    var = n_a * n_b / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return TestResult(u, 1.0, NORMAL, n_a, n_b)
    z = (abs(u - mu) - 0.5) / math.sqrt(var)
    p = 1.0 if z <= 0 else min(1.0, math.erfc(z / math.sqrt(2.0)))
    return TestResult(u, float(p), NORMAL, n_a, n_b)


def bonferroni(p: float, m: int) -> float:
    if m < 1:
        raise ValueError(f"Bonferroni multiplicity must be >= 1, got {m}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p-value {p} outside [0, 1]")
    return min(1.0, p * m)


def student_t_sf(t: float, df: float) -> float:
    """Upper tail of Student's t (regularized incomplete beta, via scipy)."""
    return float(special.stdtr(df, -t))


def paired_t(a, b) -> TestResult:
    """Paired t-test on ``a - b`` with a two-sided p-value."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if len(a) != len(b):
        raise SampleSizeError(f"paired samples differ in length ({len(a)} vs {len(b)})")
    n = len(a)
    if n < 2:
        raise SampleSizeError("paired t-test needs at least two pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TestResult(0.0, 1.0, STUDENT_T, n, n)
        raise DegenerateTestError("differences have zero variance and nonzero mean")
    t = mean / (sd / math.sqrt(n))
    p = min(1.0, 2.0 * student_t_sf(abs(t), n - 1))
    return TestResult(t, p, STUDENT_T, n, n)
