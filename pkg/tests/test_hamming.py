import numpy as np
import pytest

from diffmark import hamming
from diffmark._hamming_py import scan_argmin as py_argmin
from diffmark._hamming_py import scan_rank as py_rank


def brute_distance(a, b):
    return int((a != b).sum())


@pytest.fixture(scope="module")
def rng():
    return np.random.default_rng(7)


def test_pack_unpack_roundtrip(rng):
    for length in (8, 16, 63, 64, 65, 100, 128):
        bits = rng.integers(0, 2, (5, length), dtype=np.uint8)
        packed = hamming.pack_bits(bits)
        assert packed.shape == (5, hamming.words_for(length))
        assert np.array_equal(hamming.unpack_bits(packed, length), bits)


def test_popcount_matches_brute_force(rng):
    bits = rng.integers(0, 2, (40, 100), dtype=np.uint8)
    packed = hamming.pack_bits(bits)
    for j in range(0, 40, 7):
        d = hamming.distances(packed, packed[j])
        expected = np.array([brute_distance(bits[i], bits[j]) for i in range(40)])
        assert np.array_equal(d, expected)


def test_backends_agree(rng):
    backends = hamming.available_backends()
    bits = rng.integers(0, 2, (300, 64), dtype=np.uint8)
    queries = rng.integers(0, 2, (20, 64), dtype=np.uint8)
    db = hamming.pack_bits(bits)
    qs = hamming.pack_bits(queries)
    truth = np.arange(20, dtype=np.int64) * 3
    results = {}
    for name, impl in backends.items():
        results[name] = (
            impl.scan_argmin(db, qs),
            impl.scan_rank(db, qs, truth),
        )
    names = list(results)
    ref = results[names[0]]
    for name in names[1:]:
        for a, b in zip(ref[0], results[name][0]):
            assert np.array_equal(a, b)
        for a, b in zip(ref[1], results[name][1]):
            assert np.array_equal(a, b)


def test_argmin_tie_breaks_to_lowest_index(rng):
    bits = np.zeros((4, 16), dtype=np.uint8)
    bits[1, 0] = 1  # distance 1 from query
    bits[2, 1] = 1  # also distance 1
    bits[3, :3] = 1
    query = np.zeros((1, 16), dtype=np.uint8)
    query[0, 5] = 1
    idx, dist, ties = hamming.scan_argmin(hamming.pack_bits(bits), hamming.pack_bits(query))
    # distances: row0=1, row1=2, row2=2, row3=4 -> best row 0
    assert idx[0] == 0 and dist[0] == 1 and ties[0] == 1
    # force a tie between rows 1 and 2
    query2 = np.zeros((1, 16), dtype=np.uint8)
    idx2, dist2, ties2 = hamming.scan_argmin(hamming.pack_bits(bits[1:]), hamming.pack_bits(query2))
    assert idx2[0] == 0 and dist2[0] == 1 and ties2[0] == 2


def test_rank_semantics(rng):
    bits = rng.integers(0, 2, (50, 32), dtype=np.uint8)
    db = hamming.pack_bits(bits)
    q_bits = rng.integers(0, 2, (10, 32), dtype=np.uint8)
    qs = hamming.pack_bits(q_bits)
    truth = rng.integers(0, 50, 10).astype(np.int64)
    _, _, _, ranks = hamming.scan_rank(db, qs, truth)
    for j in range(10):
        d = np.array([brute_distance(bits[i], q_bits[j]) for i in range(50)])
        ti = truth[j]
        expected = 1 + int((d < d[ti]).sum()) + int((d[:ti] == d[ti]).sum())
        assert ranks[j] == expected


def test_hamming_distance_metric_properties(rng):
    for _ in range(30):
        a, b, c = rng.integers(0, 2, (3, 40), dtype=np.uint8)
        dab = hamming.hamming_distance(a, b)
        assert dab == hamming.hamming_distance(b, a)
        assert hamming.hamming_distance(a, a) == 0
        assert dab <= hamming.hamming_distance(a, c) + hamming.hamming_distance(c, b)


def test_benchmark_smoke():
    results = hamming.benchmark(n_keys=2000, n_queries=4, length=64, seed=1)
    assert "numpy" in results
    for row in results.values():
        assert row["seconds"] > 0


def test_python_fallback_directly(rng):
    bits = rng.integers(0, 2, (30, 64), dtype=np.uint8)
    db = hamming.pack_bits(bits)
    qs = hamming.pack_bits(bits[:3])
    idx, dist, ties = py_argmin(db, qs)
    assert np.array_equal(idx, [0, 1, 2])
    assert np.array_equal(dist, [0, 0, 0])
    _, _, _, ranks = py_rank(db, qs, np.array([0, 1, 2], dtype=np.int64))
    assert np.array_equal(ranks, [1, 1, 1])
