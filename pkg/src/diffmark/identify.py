"""Key databases, Hamming identification, detection thresholds, analytics.

Databases follow a two-tier construction: up to the real-key count, a
subsample of real keys; beyond it, every real key padded with uniform random
distractors. Identification is an exhaustive nearest-key scan with ties
broken by lowest index, and detection thresholds come from the exact
binomial tail of random bit agreement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import stats

from . import hamming
from .codec import hex_to_secret, secret_to_hex


@dataclass
class KeyDatabase:
    keys: np.ndarray  # (N, L) uint8 bits; real keys first
    tier_boundary: int  # number of real keys
    seed: int
    packed: np.ndarray  # (N, ceil(L/64)) uint64

    @property
    def size(self) -> int:
        return self.keys.shape[0]

    @property
    def secret_length(self) -> int:
        return self.keys.shape[1]


def build_database(real_keys, n: int, seed: int = 0) -> KeyDatabase:
    """Two-tier database: subsample real keys, or pad them with distractors.

    Tier 1 (n <= #real): a random n-subset of the real keys in their original
    order. Tier 2 (n > #real): all real keys followed by uniform random
    distractor keys.
    """
    real = np.asarray(real_keys, dtype=np.uint8)
    if real.ndim != 2:
        raise ValueError("real_keys must be a (count, length) bit array")
    packed_real = hamming.pack_bits(real)
    if len(np.unique(packed_real, axis=0)) != len(real):
        raise ValueError("duplicate keys in the real tier")
    rng = np.random.default_rng(seed)
    if n < 1:
        raise ValueError("database size must be >= 1")
    if n <= len(real):
        if n == len(real):
            keys = real.copy()
        else:
            chosen = np.sort(rng.choice(len(real), size=n, replace=False))
            keys = real[chosen]
        boundary = n
    else:
        distractors = rng.integers(0, 2, (n - len(real), real.shape[1]), dtype=np.uint8)
        keys = np.concatenate([real, distractors], axis=0)
        boundary = len(real)
    return KeyDatabase(
        keys=keys,
        tier_boundary=boundary,
        seed=seed,
        packed=hamming.pack_bits(keys),
    )


@dataclass
class IdentifyResult:
    best_index: int
    best_distance: int
    tied: bool
    rank: int | None = None


def identify(decoded, db: KeyDatabase, true_index: int | None = None) -> IdentifyResult:
    """Nearest registered key by Hamming distance (lowest index on ties).

    With a ground-truth index supplied, also reports the 1-based rank of the
    true key under ascending distance with index tie-breaking.
    """
    bits = np.asarray(decoded, dtype=np.uint8).reshape(1, -1)
    if bits.shape[1] != db.secret_length:
        raise ValueError("decoded secret length does not match the database")
    q = hamming.pack_bits(bits)
    if true_index is None:
        idx, dist, ties = hamming.scan_argmin(db.packed, q)
        return IdentifyResult(int(idx[0]), int(dist[0]), bool(ties[0] > 1))
    idx, dist, ties, ranks = hamming.scan_rank(db.packed, q, [true_index])
    return IdentifyResult(int(idx[0]), int(dist[0]), bool(ties[0] > 1), int(ranks[0]))


def identify_batch(decoded_bits: np.ndarray, db: KeyDatabase, true_indices=None):
    """Vectorized identification; returns (best_idx, best_dist, ties[, ranks])."""
    q = hamming.pack_bits(np.asarray(decoded_bits, dtype=np.uint8))
    if true_indices is None:
        return hamming.scan_argmin(db.packed, q)
    return hamming.scan_rank(db.packed, q, true_indices)


@dataclass(frozen=True)
class DetectionThreshold:
    secret_length: int
    fpr_target: float
    tau: int

    def decide(self, matching_bits: int) -> bool:
        return matching_bits > self.tau


def binomial_tail(length: int, tau: int) -> Fraction:
    """Exact P[Bin(length, 1/2) > tau] as a fraction."""
    if tau >= length:
        return Fraction(0)
    count = sum(math.comb(length, m) for m in range(max(tau + 1, 0), length + 1))
    return Fraction(count, 2**length)


def compute_threshold(length: int, fpr: float) -> DetectionThreshold:
    """Minimal integer tau with exact tail P[Bin(L, 1/2) > tau] <= fpr."""
    if not (0 < fpr <= 1):
        raise ValueError("fpr must lie in (0, 1]")
    target = Fraction(fpr)
    tau = length
    while tau - 1 >= -1 and binomial_tail(length, tau - 1) <= target:
        tau -= 1
    return DetectionThreshold(length, fpr, tau)


def matching_bits(decoded, key) -> int:
    decoded = np.asarray(decoded).reshape(-1)
    key = np.asarray(key).reshape(-1)
    return int((decoded == key).sum())


def ber(decoded, truth) -> np.ndarray:
    """Per-pair bit error rate for (Q, L) arrays."""
    decoded = np.asarray(decoded)
    truth = np.asarray(truth)
    if decoded.shape != truth.shape:
        raise ValueError("shape mismatch")
    if decoded.ndim == 1:
        decoded = decoded[None]
        truth = truth[None]
    return (decoded != truth).mean(axis=1)


def metrics(decoded, truth, fpr: float | None = None) -> dict:
    """BER / bit accuracy, plus TPR at an exact-binomial threshold if requested."""
    errs = ber(decoded, truth)
    out = {
        "ber": float(errs.mean()),
        "bit_acc": float(1.0 - errs.mean()),
        "per_image_ber": errs,
    }
    if fpr is not None:
        length = np.asarray(decoded).shape[-1]
        th = compute_threshold(length, fpr)
        matches = length - (np.atleast_2d(decoded) != np.atleast_2d(truth)).sum(axis=1)
        out["tpr_at_fpr"] = float((matches > th.tau).mean())
        out["tau"] = th.tau
    return out


def pearson_with_p(x: np.ndarray, y: np.ndarray) -> tuple[float, float, bool]:
    """Pearson r with two-sided p from the t approximation (n-2 dof).

    Degenerate variance in either input reports r = 0 with a flag instead of
    propagating a division by zero.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    x_floor = 1e-12 * max(1.0, float(np.abs(x).max(initial=0.0)))
    y_floor = 1e-12 * max(1.0, float(np.abs(y).max(initial=0.0)))
    if n < 3 or x.std() <= x_floor or y.std() <= y_floor:
        return 0.0, 1.0, True
    r = float(np.corrcoef(x, y)[0, 1])
    if abs(r) >= 1.0:
        return r, 0.0, False
    t = r * math.sqrt((n - 2) / (1 - r * r))
    p = 2.0 * float(stats.t.sf(abs(t), df=n - 2))
    return r, p, False


def key_flexibility_report(
    fixed_set_bers,
    random_set_bers,
    keys,
    training_key,
) -> dict:
    """Fixed-vs-random key BER summary, distance-binned BERs, and Pearson r.

    Keys are binned into terciles of Hamming distance to the training key;
    the correlation is computed between per-key distance and per-key BER.
    """
    fixed = np.asarray(fixed_set_bers, dtype=np.float64)
    rand = np.asarray(random_set_bers, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.uint8)
    training_key = np.asarray(training_key, dtype=np.uint8).reshape(-1)
    dists = np.array([hamming.hamming_distance(k, training_key) for k in keys])
    r, p, degenerate = pearson_with_p(dists, rand)

    order = np.argsort(dists, kind="stable")
    thirds = np.array_split(order, 3)
    bins = []
    for name, idx in zip(("low", "mid", "high"), thirds):
        bins.append(
            {
                "bin": name,
                "count": int(len(idx)),
                "mean_distance": float(dists[idx].mean()) if len(idx) else float("nan"),
                "mean_ber": float(rand[idx].mean()) if len(idx) else float("nan"),
            }
        )
    return {
        "fixed": {"mean_ber": float(fixed.mean()), "std_ber": float(fixed.std())},
        "random": {"mean_ber": float(rand.mean()), "std_ber": float(rand.std())},
        "bins": bins,
        "pearson_r": r,
        "pearson_p": p,
        "degenerate_variance": degenerate,
    }


def identification_scaling(
    real_keys: np.ndarray,
    decoded: np.ndarray,
    true_indices: np.ndarray,
    sizes,
    trials: int = 10,
    seed: int = 0,
) -> list[dict]:
    """Top-1 accuracy per database size over independent trials.

    For sizes below the real-key count, queries whose true key was not
    sampled into the database are skipped (they have no correct answer).
    """
    rows = []
    for n in sizes:
        for trial in range(trials):
            db = build_database(real_keys, n, seed=seed + trial * 7919 + n % 7919)
            if n <= len(real_keys):
                if n == len(real_keys):
                    kept = np.arange(len(real_keys))
                else:
                    rng = np.random.default_rng(db.seed)
                    kept = np.sort(rng.choice(len(real_keys), size=n, replace=False))
                lookup = {int(orig): pos for pos, orig in enumerate(kept)}
                mask = np.array([int(i) in lookup for i in true_indices])
                if not mask.any():
                    continue
                sub_truth = np.array([lookup[int(i)] for i in true_indices[mask]])
                _, _, _, ranks = identify_batch(decoded[mask], db, sub_truth)
            else:
                _, _, _, ranks = identify_batch(decoded, db, true_indices)
            rows.append(
                {
                    "db_size": int(n),
                    "trial": trial,
                    "top1_acc": float((ranks == 1).mean()),
                    "queries": int(len(ranks)),
                }
            )
    return rows


def save_keys(path, keys: np.ndarray) -> None:
    import torch

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for row in np.asarray(keys, dtype=np.uint8):
            f.write(secret_to_hex(torch.from_numpy(row)) + "\n")


def load_keys(path, length: int) -> np.ndarray:
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(hex_to_secret(line, length).numpy().astype(np.uint8))
    return np.stack(rows) if rows else np.zeros((0, length), dtype=np.uint8)
