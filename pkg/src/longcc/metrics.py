"""Partition-comparison metrics and adherence-based model selection.

Both indices are pair-counting statistics over the C(n,2) subject pairs:
the adjusted Rand index is the chance-corrected (Hubert-Arabie) form, and
the Jaccard index is n11 / (n11 + n10 + n01), where n11 counts pairs
co-clustered in both partitions and n10/n01 pairs co-clustered in exactly
one.  Counts use exact integer arithmetic from the contingency table.
"""

from __future__ import annotations

import warnings
from math import comb
from typing import Mapping

import numpy as np


def _pair_counts(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("partitions must be 1-d arrays of equal length")
    n = a.size
    if n < 2:
        raise ValueError("need at least 2 subjects to compare partitions")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    ka = int(ia.max()) + 1
    kb = int(ib.max()) + 1
    table = np.zeros((ka, kb), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    n11 = sum(comb(int(c), 2) for c in table.ravel())
    pairs_a = sum(comb(int(c), 2) for c in table.sum(axis=1))
    pairs_b = sum(comb(int(c), 2) for c in table.sum(axis=0))
    return n, n11, pairs_a, pairs_b


def adjusted_rand(a, b) -> float:
    """Hubert-Arabie adjusted Rand index between two partitions.

    Returns 1.0 (with a warning) in the degenerate case where the
    chance-correction denominator vanishes, which happens exactly when both
    partitions are all-singletons or both are single-cluster.
    """
    n, n11, pairs_a, pairs_b = _pair_counts(a, b)
    total = comb(n, 2)
    expected = pairs_a * pairs_b / total
    denom = 0.5 * (pairs_a + pairs_b) - expected
    if denom == 0.0:
        warnings.warn("adjusted_rand: degenerate partitions (chance denominator zero); "
                      "returning 1", stacklevel=2)
        return 1.0
    return float((n11 - expected) / denom)


def jaccard_pair(a, b) -> float:
    """Pair-counting Jaccard index n11 / (n11 + n10 + n01).

    Returns 1.0 (with a warning) when neither partition co-clusters any
    pair (both all-singletons).
    """
    n, n11, pairs_a, pairs_b = _pair_counts(a, b)
    n10 = pairs_a - n11
    n01 = pairs_b - n11
    denom = n11 + n10 + n01
    if denom == 0:
        warnings.warn("jaccard_pair: no co-clustered pairs in either partition; "
                      "returning 1", stacklevel=2)
        return 1.0
    return float(n11 / denom)


def arand_report(truth_C, est_C, truth_L, est_L) -> dict:
    """Global and mean-local agreement of an estimate against truth.

    aRand_G compares the global clusterings; aRand_I averages the per-marker
    local clustering agreement over markers.
    """
    truth_L = np.asarray(truth_L)
    est_L = np.asarray(est_L)
    if truth_L.shape != est_L.shape:
        raise ValueError("local label matrices must have matching shapes")
    per_marker = [adjusted_rand(truth_L[:, r], est_L[:, r])
                  for r in range(truth_L.shape[1])]
    return {
        "aRand_G": adjusted_rand(truth_C, est_C),
        "aRand_I": float(np.mean(per_marker)),
        "aRand_local": per_marker,
    }


def adjusted_adherence(alpha, K: int):
    """Map raw adherence alpha in [1/K, 1] onto [0, 1]: (K*alpha - 1)/(K - 1)."""
    if K < 2:
        raise ValueError("K must be >= 2")
    arr = np.asarray(alpha, dtype=float)
    if np.any(arr < 1.0 / K - 1e-9) or np.any(arr > 1.0 + 1e-9):
        raise ValueError(f"alpha must lie in [1/K, 1] = [{1.0 / K:.4g}, 1]")
    out = (K * arr - 1.0) / (K - 1.0)
    return float(out) if np.ndim(alpha) == 0 else out


def select_K(mean_adjusted: Mapping[int, float]):
    """Pick the K maximizing mean adjusted adherence.

    Returns (K_hat, tied); exact ties resolve to the smallest K and set the
    flag.  A single-candidate map is returned as-is with a warning.
    """
    if not mean_adjusted:
        raise ValueError("empty candidate map")
    ks = sorted(mean_adjusted)
    if len(ks) == 1:
        warnings.warn("select_K: only one candidate K supplied", stacklevel=2)
        return ks[0], False
    values = np.array([mean_adjusted[k] for k in ks], dtype=float)
    best = values.max()
    winners = [k for k, v in zip(ks, values) if v == best]
    return winners[0], len(winners) > 1
