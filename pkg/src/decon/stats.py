"""Effect size and paired significance test for comparing fine-tuning runs."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import norm, rankdata

EXACT_MAX_N = 20


@dataclass
class StatReport:
    cohens_d: float
    wilcoxon_p: float
    mean_a: float
    mean_b: float
    std_a: float
    std_b: float
    n_a: int
    n_b: int


def pooled_std(a: Sequence[float], b: Sequence[float]) -> float:
    n1, n2 = len(a), len(b)
    s1 = np.var(a, ddof=1)
    s2 = np.var(b, ddof=1)
    return math.sqrt(((n1 - 1) * s1 + (n2 - 1) * s2) / (n1 + n2 - 2))


def cohens_d(group_a: Sequence[float], group_b: Sequence[float]) -> float:
    """Standardized mean difference ``(M1 - M2) / s_p`` with the pooled sample std."""
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("cohens_d needs at least two values per group")
    sp = pooled_std(a, b)
    if sp == 0.0:
        raise ValueError("pooled standard deviation is zero")
    return float((a.mean() - b.mean()) / sp)


def cohens_d_from_summary(m1: float, s1: float, n1: int, m2: float, s2: float, n2: int) -> float:
    sp = math.sqrt(((n1 - 1) * s1**2 + (n2 - 1) * s2**2) / (n1 + n2 - 2))
    if sp == 0.0:
        raise ValueError("pooled standard deviation is zero")
    return (m1 - m2) / sp


def signed_rank_null(ranks: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Exact null distribution of W+ for the given (possibly tied) ranks.

    Each rank joins W+ with probability 1/2 independently, so the counts over
    all ``2**n`` sign patterns follow from a subset-sum recursion on doubled
    (integer) ranks. Returns ``(support, probabilities)``.
    """
    doubled = [int(round(2 * r)) for r in ranks]
    counts = np.zeros(sum(doubled) + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:len(counts) - r]
        counts = counts + shifted
    support = np.flatnonzero(counts)
    return support / 2.0, counts[support] / 2.0 ** len(doubled)


def wilcoxon_signed_rank(diffs: Sequence[float], exact_max_n: int = EXACT_MAX_N) -> float:
    """Two-sided p-value of the Wilcoxon signed-rank test.

    Zero differences are dropped; ties get average ranks. Exact null
    distribution for ``n <= exact_max_n``, otherwise a tie-corrected normal
    approximation with continuity correction.
    """
    d = np.asarray(diffs, dtype=np.float64)
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise ValueError("all differences are zero")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= exact_max_n:
        support, probs = signed_rank_null(ranks)
        lower = probs[support <= w_plus + 1e-9].sum()
        upper = probs[support >= w_plus - 1e-9].sum()
        return float(min(1.0, 2.0 * min(lower, upper)))
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - ((tie_counts**3 - tie_counts).sum()) / 48.0
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    return float(min(1.0, 2.0 * norm.sf(z)))


def compare(group_a: Sequence[float], group_b: Sequence[float]) -> StatReport:
    """Cohen's d of ``a`` vs ``b`` plus the signed-rank p-value on paired differences."""
    if len(group_a) != len(group_b):
        raise ValueError("paired comparison needs equally sized groups")
    diffs = np.asarray(group_a, dtype=np.float64) - np.asarray(group_b, dtype=np.float64)
    return StatReport(
        cohens_d=cohens_d(group_a, group_b),
        wilcoxon_p=wilcoxon_signed_rank(diffs),
        mean_a=float(np.mean(group_a)),
        mean_b=float(np.mean(group_b)),
        std_a=float(np.std(group_a, ddof=1)),
        std_b=float(np.std(group_b, ddof=1)),
        n_a=len(group_a),
        n_b=len(group_b),
    )
