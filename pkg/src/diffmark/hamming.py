"""Bit packing and backend selection for Hamming-distance scans.

Keys are packed little-endian into uint64 words (popcount is placement
invariant, so only internal consistency matters). The compiled extension is
preferred when importable; set DIFFMARK_FORCE_PY=1 to force the numpy
fallback. Both backends implement identical scan semantics.
"""

from __future__ import annotations

import os
import time

import numpy as np

from . import _hamming_py

if os.environ.get("DIFFMARK_FORCE_PY"):
    _impl = _hamming_py
    BACKEND = "numpy"
else:
    try:
        from . import _hamming_cy as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built; numpy path is fully equivalent
        _impl = _hamming_py
        BACKEND = "numpy"


def words_for(length: int) -> int:
    return (length + 63) // 64


def pack_bits(bits) -> np.ndarray:
    """(n, L) {0,1} array -> (n, ceil(L/64)) contiguous uint64 rows."""
    bits = np.ascontiguousarray(np.asarray(bits, dtype=np.uint8))
    if bits.ndim == 1:
        bits = bits[None, :]
    n, length = bits.shape
    packed8 = np.packbits(bits, axis=1, bitorder="little")
    pad = words_for(length) * 8 - packed8.shape[1]
    if pad:
        packed8 = np.pad(packed8, ((0, 0), (0, pad)))
    return np.ascontiguousarray(packed8.view("<u8"))


def unpack_bits(packed: np.ndarray, length: int) -> np.ndarray:
    bytes_view = np.ascontiguousarray(packed).view(np.uint8)
    return np.unpackbits(bytes_view, axis=1, bitorder="little", count=length)


def hamming_distance(a, b) -> int:
    """Plain Hamming distance between two bit vectors."""
    a = np.asarray(a).reshape(-1)
    b = np.asarray(b).reshape(-1)
    if a.shape != b.shape:
        raise ValueError("length mismatch")
    return int((a != b).sum())


def scan_argmin(db_packed: np.ndarray, queries_packed: np.ndarray):
    return _impl.scan_argmin(db_packed, queries_packed)


def scan_rank(db_packed: np.ndarray, queries_packed: np.ndarray, true_indices):
    true_indices = np.ascontiguousarray(np.asarray(true_indices, dtype=np.int64))
    return _impl.scan_rank(db_packed, queries_packed, true_indices)


def distances(db_packed: np.ndarray, query_packed: np.ndarray) -> np.ndarray:
    query_packed = np.ascontiguousarray(query_packed).reshape(-1)
    if _impl is _hamming_py:
        return _impl.distances(db_packed, query_packed)
    return _impl.distances(db_packed, query_packed)


def available_backends() -> dict:
    """Name -> module for every importable backend (for benchmarks/tests)."""
    backends = {"numpy": _hamming_py}
    try:
        from . import _hamming_cy

        backends["cython"] = _hamming_cy
    except ImportError:
        pass
    return backends


def benchmark(n_keys: int = 200_000, n_queries: int = 50, length: int = 64, seed: int = 0) -> dict:
    """Time an argmin scan on every available backend; verifies agreement."""
    rng = np.random.default_rng(seed)
    db = pack_bits(rng.integers(0, 2, (n_keys, length), dtype=np.uint8))
    qs = pack_bits(rng.integers(0, 2, (n_queries, length), dtype=np.uint8))
    results = {}
    reference = None
    for name, impl in available_backends().items():
        t0 = time.perf_counter()
        idx, dist, ties = impl.scan_argmin(db, qs)
        elapsed = time.perf_counter() - t0
        if reference is None:
            reference = (idx, dist)
        else:
            assert np.array_equal(reference[0], idx) and np.array_equal(reference[1], dist)
        results[name] = {
            "seconds": elapsed,
            "keys_per_second": n_keys * n_queries / elapsed,
        }
    return results
