# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled Hamming scan kernels over packed uint64 key rows.

Hot path of the identification engine: exhaustive XOR + popcount scans of
databases with up to millions of keys. Semantics match _hamming_py exactly.
"""

import numpy as np

cimport numpy as cnp

cdef extern from *:
    """
    static inline unsigned long long _popcountll(unsigned long long x) {
        return __builtin_popcountll(x);
    }
    """
    unsigned long long _popcountll(unsigned long long x) nogil


def scan_argmin(cnp.uint64_t[:, ::1] db, cnp.uint64_t[:, ::1] queries):
    cdef Py_ssize_t n = db.shape[0]
    cdef Py_ssize_t w = db.shape[1]
    cdef Py_ssize_t q = queries.shape[0]
    best_idx_arr = np.empty(q, dtype=np.int64)
    best_dist_arr = np.empty(q, dtype=np.int64)
    ties_arr = np.empty(q, dtype=np.int64)
    cdef cnp.int64_t[::1] best_idx = best_idx_arr
    cdef cnp.int64_t[::1] best_dist = best_dist_arr
    cdef cnp.int64_t[::1] ties = ties_arr
    cdef Py_ssize_t i, j, k
    cdef long long d, bd, bi, tie_count
    with nogil:
        for j in range(q):
            bd = 1 << 60
            bi = -1
            tie_count = 0
            for i in range(n):
                d = 0
                for k in range(w):
                    d += <long long> _popcountll(db[i, k] ^ queries[j, k])
                if d < bd:
                    bd = d
                    bi = i
                    tie_count = 1
                elif d == bd:
                    tie_count += 1
            best_idx[j] = bi
            best_dist[j] = bd
            ties[j] = tie_count
    return best_idx_arr, best_dist_arr, ties_arr


def scan_rank(cnp.uint64_t[:, ::1] db, cnp.uint64_t[:, ::1] queries,
              cnp.int64_t[::1] true_indices):
    cdef Py_ssize_t n = db.shape[0]
    cdef Py_ssize_t w = db.shape[1]
    cdef Py_ssize_t q = queries.shape[0]
    best_idx_arr = np.empty(q, dtype=np.int64)
    best_dist_arr = np.empty(q, dtype=np.int64)
    ties_arr = np.empty(q, dtype=np.int64)
    ranks_arr = np.empty(q, dtype=np.int64)
    cdef cnp.int64_t[::1] best_idx = best_idx_arr
    cdef cnp.int64_t[::1] best_dist = best_dist_arr
    cdef cnp.int64_t[::1] ties = ties_arr
    cdef cnp.int64_t[::1] ranks = ranks_arr
    cdef Py_ssize_t i, j, k, ti
    cdef long long d, bd, bi, tie_count, dt, below, eq_before
    with nogil:
        for j in range(q):
            ti = <Py_ssize_t> true_indices[j]
            dt = 0
            for k in range(w):
                dt += <long long> _popcountll(db[ti, k] ^ queries[j, k])
            bd = 1 << 60
            bi = -1
            tie_count = 0
            below = 0
            eq_before = 0
            for i in range(n):
                d = 0
                for k in range(w):
                    d += <long long> _popcountll(db[i, k] ^ queries[j, k])
                if d < bd:
                    bd = d
                    bi = i
                    tie_count = 1
                elif d == bd:
                    tie_count += 1
                if d < dt:
                    below += 1
                elif d == dt and i < ti:
                    eq_before += 1
            best_idx[j] = bi
            best_dist[j] = bd
            ties[j] = tie_count
            ranks[j] = 1 + below + eq_before
    return best_idx_arr, best_dist_arr, ties_arr, ranks_arr


def distances(cnp.uint64_t[:, ::1] db, cnp.uint64_t[::1] query):
    cdef Py_ssize_t n = db.shape[0]
    cdef Py_ssize_t w = db.shape[1]
    out_arr = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    cdef Py_ssize_t i, k
    cdef long long d
    with nogil:
        for i in range(n):
            d = 0
            for k in range(w):
                d += <long long> _popcountll(db[i, k] ^ query[k])
            out[i] = d
    return out_arr
