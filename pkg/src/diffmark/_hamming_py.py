"""Pure-numpy Hamming scan kernels (fallback backend).

Same contract as the compiled extension: packed uint64 rows, exhaustive
scans, ties resolved to the lowest index.
"""

from __future__ import annotations

import numpy as np


def scan_argmin(db: np.ndarray, queries: np.ndarray):
    """Nearest key per query: (best_idx, best_dist, n_ties) int64 arrays."""
    q = queries.shape[0]
    best_idx = np.empty(q, dtype=np.int64)
    best_dist = np.empty(q, dtype=np.int64)
    n_ties = np.empty(q, dtype=np.int64)
    for j in range(q):
        d = np.bitwise_count(db ^ queries[j]).sum(axis=1, dtype=np.int64)
        i = int(np.argmin(d))
        best_idx[j] = i
        best_dist[j] = d[i]
        n_ties[j] = int((d == d[i]).sum())
    return best_idx, best_dist, n_ties


def scan_rank(db: np.ndarray, queries: np.ndarray, true_indices: np.ndarray):
    """Rank (1-based, ties broken by index) of each true key, plus argmin info."""
    q = queries.shape[0]
    best_idx = np.empty(q, dtype=np.int64)
    best_dist = np.empty(q, dtype=np.int64)
    n_ties = np.empty(q, dtype=np.int64)
    ranks = np.empty(q, dtype=np.int64)
    for j in range(q):
        d = np.bitwise_count(db ^ queries[j]).sum(axis=1, dtype=np.int64)
        i = int(np.argmin(d))
        best_idx[j] = i
        best_dist[j] = d[i]
        n_ties[j] = int((d == d[i]).sum())
        ti = int(true_indices[j])
        dt = d[ti]
        ranks[j] = 1 + int((d < dt).sum()) + int((d[:ti] == dt).sum())
    return best_idx, best_dist, n_ties, ranks


def distances(db: np.ndarray, query: np.ndarray) -> np.ndarray:
    return np.bitwise_count(db ^ query).sum(axis=1, dtype=np.int64)
