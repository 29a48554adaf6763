import math
from fractions import Fraction

import numpy as np
import pytest

from diffmark.identify import (
    DetectionThreshold,
    ber,
    binomial_tail,
    build_database,
    compute_threshold,
    identification_scaling,
    identify,
    identify_batch,
    key_flexibility_report,
    load_keys,
    matching_bits,
    metrics,
    pearson_with_p,
    save_keys,
)


@pytest.fixture(scope="module")
def rng():
    return np.random.default_rng(11)


class TestBuildDatabase:
    def test_equal_size_is_identity(self, rng):
        real = rng.integers(0, 2, (20, 16), dtype=np.uint8)
        db = build_database(real, 20, seed=0)
        assert np.array_equal(db.keys, real)
        assert db.tier_boundary == 20

    def test_singleton(self, rng):
        real = rng.integers(0, 2, (1, 16), dtype=np.uint8)
        db = build_database(real, 1, seed=0)
        assert db.size == 1

    def test_tier1_subsample_preserves_order(self, rng):
        real = rng.integers(0, 2, (50, 16), dtype=np.uint8)
        db = build_database(real, 10, seed=3)
        assert db.size == 10
        # each key appears in the real set, in original relative order
        positions = []
        for key in db.keys:
            match = np.where((real == key).all(axis=1))[0]
            positions.append(match[0])
        assert positions == sorted(positions)

    def test_tier2_pads_with_distractors(self, rng):
        real = rng.integers(0, 2, (10, 64), dtype=np.uint8)
        db = build_database(real, 500, seed=4)
        assert db.size == 500
        assert db.tier_boundary == 10
        assert np.array_equal(db.keys[:10], real)

    def test_duplicate_real_keys_rejected(self):
        real = np.zeros((2, 16), dtype=np.uint8)
        with pytest.raises(ValueError):
            build_database(real, 2, seed=0)

    def test_distractor_collisions_negligible(self, rng):
        # birthday bound: expected collisions < 1e-6 * N^2 for 64-bit keys;
        # verified empirically over 10 seeds at a desk-sized N
        real = rng.integers(0, 2, (4, 64), dtype=np.uint8)
        n = 20_000
        for seed in range(10):
            db = build_database(real, n, seed=seed)
            packed = db.packed
            assert len(np.unique(packed, axis=0)) == db.size  # no collisions at all


class TestIdentify:
    def test_exact_match_rank_one(self, rng):
        real = rng.integers(0, 2, (30, 32), dtype=np.uint8)
        res = identify(real[7], build_database(real, 30, seed=0), true_index=7)
        assert res.best_index == 7
        assert res.best_distance == 0
        assert res.rank == 1

    def test_singleton_always_wins(self, rng):
        real = rng.integers(0, 2, (1, 32), dtype=np.uint8)
        db = build_database(real, 1, seed=0)
        query = rng.integers(0, 2, 32).astype(np.uint8)
        res = identify(query, db)
        assert res.best_index == 0

    def test_permutation_equivariance(self, rng):
        real = rng.integers(0, 2, (25, 32), dtype=np.uint8)
        db = build_database(real, 25, seed=0)
        query = real[13] ^ (rng.random(32) < 0.05).astype(np.uint8)
        res = identify(query, db)
        perm = rng.permutation(25)
        db2 = build_database(real[perm], 25, seed=0)
        res2 = identify(query, db2)
        if not res.tied:
            assert np.array_equal(db.keys[res.best_index], db2.keys[res2.best_index])

    def test_length_mismatch(self, rng):
        real = rng.integers(0, 2, (5, 32), dtype=np.uint8)
        db = build_database(real, 5, seed=0)
        with pytest.raises(ValueError):
            identify(np.zeros(16, dtype=np.uint8), db)

    def test_batch_matches_scalar(self, rng):
        real = rng.integers(0, 2, (40, 24), dtype=np.uint8)
        db = build_database(real, 40, seed=0)
        queries = rng.integers(0, 2, (6, 24), dtype=np.uint8)
        truth = np.arange(6, dtype=np.int64)
        idx, dist, ties, ranks = identify_batch(queries, db, truth)
        for j in range(6):
            res = identify(queries[j], db, true_index=int(truth[j]))
            assert res.best_index == idx[j]
            assert res.best_distance == dist[j]
            assert res.rank == ranks[j]


class TestThreshold:
    def test_example_l8(self):
        th = compute_threshold(8, 0.05)
        assert th.tau == 6
        assert binomial_tail(8, 6) == Fraction(9, 256)
        assert binomial_tail(8, 5) == Fraction(37, 256)

    def test_degenerate_fpr_one(self):
        assert compute_threshold(8, 1.0).tau == -1
        assert compute_threshold(64, 1.0).tau == -1

    def test_exactness_grid(self):
        for length in (8, 16, 32, 48, 64, 100):
            for fpr in (0.05, 0.01, 0.001):
                th = compute_threshold(length, fpr)
                target = Fraction(fpr)
                assert binomial_tail(length, th.tau) <= target
                if th.tau > -1:
                    assert binomial_tail(length, th.tau - 1) > target

    def test_decision_rule(self):
        th = DetectionThreshold(8, 0.05, 6)
        assert th.decide(7) and not th.decide(6)

    def test_invalid_fpr(self):
        with pytest.raises(ValueError):
            compute_threshold(8, 0.0)

    def test_empirical_fpr_monte_carlo(self, rng):
        # random secrets against random keys: matches ~ Bin(L, 1/2)
        length, fpr, n = 64, 0.001, 2_000_000
        th = compute_threshold(length, fpr)
        a = rng.integers(0, 2**63, n, dtype=np.int64).view(np.uint64)
        b = rng.integers(0, 2**63, n, dtype=np.int64).view(np.uint64)
        # use full 64 random bits via two draws
        a ^= rng.integers(0, 2**63, n, dtype=np.int64).view(np.uint64) << np.uint64(1)
        b ^= rng.integers(0, 2**63, n, dtype=np.int64).view(np.uint64) << np.uint64(1)
        m = 64 - np.bitwise_count(a ^ b)
        emp = float((m > th.tau).mean())
        assert emp <= 2 * fpr


class TestMetrics:
    def test_exact_and_complement(self, rng):
        s = rng.integers(0, 2, (4, 16), dtype=np.uint8)
        out = metrics(s, s)
        assert out["ber"] == 0.0 and out["bit_acc"] == 1.0
        out2 = metrics(1 - s, s)
        assert out2["ber"] == 1.0

    def test_random_pairs_near_half(self, rng):
        a = rng.integers(0, 2, (100_000, 64), dtype=np.uint8)
        b = rng.integers(0, 2, (100_000, 64), dtype=np.uint8)
        assert metrics(a, b)["ber"] == pytest.approx(0.5, abs=0.005)

    def test_tpr_at_fpr(self, rng):
        s = rng.integers(0, 2, (50, 64), dtype=np.uint8)
        out = metrics(s, s, fpr=0.001)
        assert out["tpr_at_fpr"] == 1.0

    def test_matching_bits(self):
        a = np.array([1, 0, 1, 1])
        b = np.array([1, 1, 1, 0])
        assert matching_bits(a, b) == 2

    def test_ber_shape_mismatch(self):
        with pytest.raises(ValueError):
            ber(np.zeros((2, 8)), np.zeros((2, 4)))


class TestPearson:
    def test_degenerate_variance_flag(self):
        r, p, flag = pearson_with_p(np.ones(10), np.arange(10))
        assert r == 0.0 and flag

    def test_perfect_correlation(self):
        x = np.arange(20, dtype=float)
        r, p, flag = pearson_with_p(x, x)
        assert r == pytest.approx(1.0)
        assert p == pytest.approx(0.0, abs=1e-12)
        assert not flag

    def test_independent_is_insignificant(self, rng):
        x = rng.normal(size=500)
        y = rng.normal(size=500)
        r, p, flag = pearson_with_p(x, y)
        assert abs(r) < 0.2 and p > 1e-4


class TestFlexibilityReport:
    def test_ber_equals_distance(self, rng):
        keys = rng.integers(0, 2, (60, 16), dtype=np.uint8)
        training = keys[0]
        d = np.array([(k != training).sum() for k in keys], dtype=float)
        report = key_flexibility_report(d / 16, d / 16, keys, training)
        assert report["pearson_r"] == pytest.approx(1.0)
        assert not report["degenerate_variance"]
        assert [b["bin"] for b in report["bins"]] == ["low", "mid", "high"]

    def test_all_equal_bers_flagged(self, rng):
        keys = rng.integers(0, 2, (30, 16), dtype=np.uint8)
        report = key_flexibility_report(
            np.full(30, 0.1), np.full(30, 0.1), keys, keys[0]
        )
        assert report["pearson_r"] == 0.0
        assert report["degenerate_variance"]


class TestScaling:
    def test_clean_decoding_perfect_at_small_scale(self, rng):
        real = rng.integers(0, 2, (100, 64), dtype=np.uint8)
        rows = identification_scaling(
            real, real, np.arange(100), sizes=[10, 100, 2000], trials=3, seed=5
        )
        for row in rows:
            assert row["top1_acc"] == 1.0

    def test_accuracy_degrades_with_heavy_flips(self, rng):
        real = rng.integers(0, 2, (200, 64), dtype=np.uint8)
        flips = (rng.random((200, 64)) < 0.5).astype(np.uint8)
        decoded = real ^ flips
        rows = identification_scaling(
            real, decoded, np.arange(200), sizes=[10_000], trials=2, seed=6
        )
        for row in rows:
            assert row["top1_acc"] < 0.05

    def test_top1_non_increasing_in_db_size(self, rng):
        real = rng.integers(0, 2, (300, 64), dtype=np.uint8)
        flips = (rng.random((300, 64)) < 0.25).astype(np.uint8)
        decoded = real ^ flips
        sizes = [300, 3000, 30000]
        rows = identification_scaling(real, decoded, np.arange(300), sizes, trials=10, seed=7)
        means = [
            np.mean([r["top1_acc"] for r in rows if r["db_size"] == n]) for n in sizes
        ]
        assert means[0] >= means[1] >= means[2]


def test_key_file_roundtrip(tmp_path, rng):
    keys = rng.integers(0, 2, (12, 64), dtype=np.uint8)
    save_keys(tmp_path / "keys.txt", keys)
    loaded = load_keys(tmp_path / "keys.txt", 64)
    assert np.array_equal(loaded, keys)
    lines = (tmp_path / "keys.txt").read_text().strip().splitlines()
    assert all(len(line) == 16 for line in lines)
