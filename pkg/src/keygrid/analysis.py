"""Table-usage statistics, a VQ baseline, key-precision sweeps and F1."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import hashgrid
from .hashgrid import HashTableGroup


@dataclass
class HitStats:
    counts: list[np.ndarray]  # per level, one u64 counter per entry
    queries: int = 0

    @classmethod
    def empty(cls, group: HashTableGroup) -> "HitStats":
        return cls([np.zeros(len(lv.entries), dtype=np.uint64) for lv in group.levels], 0)

    def merge(self, other: "HitStats") -> "HitStats":
        if [len(c) for c in self.counts] != [len(c) for c in other.counts]:
            raise ValueError("cannot merge hit statistics of different table layouts")
        return HitStats([a + b for a, b in zip(self.counts, other.counts)], self.queries + other.queries)


def collect_hits(group: HashTableGroup, queries, stats: HitStats | None = None) -> HitStats:
    """Count every corner touched by every query at every level.

    ``queries`` is an ``(N, D)`` array or an iterable of such arrays.
    """
    stats = stats or HitStats.empty(group)
    chunks = [queries] if isinstance(queries, np.ndarray) else queries
    for chunk in chunks:
        q = np.atleast_2d(np.asarray(chunk))
        if q.size == 0:
            continue
        for lvl, level in enumerate(group.levels):
            lattice, _, _ = hashgrid.corner_weights(q, level.resolution)
            idx = hashgrid.level_hash_index(level, lattice).ravel()
            stats.counts[lvl] += np.bincount(idx, minlength=len(level.entries)).astype(np.uint64)
        stats.queries += len(q)
    return stats


@dataclass
class LevelUsage:
    level: int
    entries: int
    hit_fraction: float
    mean_hits: float
    std_hits: float


def usage_report(stats: HitStats) -> list[LevelUsage]:
    rows = []
    for lvl, counts in enumerate(stats.counts):
        c = counts.astype(np.float64)
        frac = float(np.count_nonzero(c)) / len(c) if len(c) else 0.0
        rows.append(LevelUsage(lvl, len(c), frac, float(c.mean()), float(c.std())))
    return rows


def usage_csv(rows: list[LevelUsage]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["level", "entries", "hit_fraction", "mean_hits", "std_hits"])
    for r in rows:
        w.writerow([r.level, r.entries, f"{r.hit_fraction:.6f}", f"{r.mean_hits:.6f}", f"{r.std_hits:.6f}"])
    return buf.getvalue()


def histogram_csv(counts: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["entry", "count"])
    for i, c in enumerate(counts):
        w.writerow([i, int(c)])
    return buf.getvalue()


# -- vector quantisation baseline -------------------------------------------------------

@dataclass
class VQCodebook:
    entries: np.ndarray  # (K, D)
    counts: np.ndarray  # (K,) assignments in the final pass
    history: list[float] = field(default_factory=list)  # usage fraction per step

    @property
    def usage(self) -> float:
        return float(np.count_nonzero(self.counts)) / len(self.counts)


def vq_assign(entries: np.ndarray, features: np.ndarray) -> np.ndarray:
    d2 = (np.sum(features ** 2, axis=1)[:, None] - 2 * features @ entries.T
          + np.sum(entries ** 2, axis=1)[None, :])
    return np.argmin(d2, axis=1)


def vq_train(features: np.ndarray, k: int, steps: int, seed: int, decay: float = 0.99,
             init: np.ndarray | None = None, batch_size: int | None = None) -> VQCodebook:
    """Nearest-neighbour VQ with EMA codebook updates and no dead-entry revival.

    Entries start as a random subset of ``features`` unless ``init`` is given.
    An entry moves only toward features assigned to it, so an entry that never
    wins an assignment keeps its initial value.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) == 0:
        raise ValueError("vq_train needs a non-empty (N, D) feature array")
    if k < 1:
        raise ValueError("codebook size must be >= 1")
    rng = np.random.default_rng(seed)
    if init is not None:
        entries = np.array(init, dtype=np.float64)
        if entries.shape != (k, features.shape[1]):
            raise ValueError(f"init shape {entries.shape} != {(k, features.shape[1])}")
    else:
        pick = rng.choice(len(features), size=k, replace=len(features) < k)
        entries = features[pick].copy()
    ema_count = np.zeros(k)
    ema_sum = np.zeros_like(entries)
    history = []
    for _ in range(steps):
        batch = features if batch_size is None else features[rng.choice(len(features), batch_size)]
        assign = vq_assign(entries, batch)
        counts = np.bincount(assign, minlength=k).astype(np.float64)
        sums = np.zeros_like(entries)
        np.add.at(sums, assign, batch)
        ema_count = decay * ema_count + (1 - decay) * counts
        ema_sum = decay * ema_sum + (1 - decay) * sums
        live = ema_count > 0
        entries[live] = ema_sum[live] / ema_count[live, None]
        history.append(float(np.count_nonzero(counts)) / k)
    final = np.bincount(vq_assign(entries, features), minlength=k)
    return VQCodebook(entries, final, history)


def clustered_features(n: int = 1024, dim: int = 4, n_clusters: int = 4, spread: float = 0.01,
                       seed: int = 0) -> np.ndarray:
    """Tight Gaussian clusters with centres uniform in the unit cube."""
    rng = np.random.default_rng(seed)
    centres = rng.uniform(0, 1, size=(n_clusters, dim))
    labels = rng.integers(n_clusters, size=n)
    return centres[labels] + rng.normal(0, spread, size=(n, dim))


def far_init(features: np.ndarray, k: int, seed: int, distance: float = 10.0) -> np.ndarray:
    """Codebook entries scattered on a sphere far outside the data."""
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=(k, features.shape[1]))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    return features.mean(axis=0) + distance * direction


# -- metrics ---------------------------------------------------------------------------

def f1(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall."""
    if not (0 <= precision <= 1 and 0 <= recall <= 1):
        raise ValueError("precision and recall must lie in [0, 1]")
    if precision == 0 and recall == 0:
        raise ValueError("F1 is undefined when precision and recall are both 0")
    return 2 * precision * recall / (precision + recall)


# -- checkpoint-level analyses -------------------------------------------------------------

def epoch_queries(checkpoint, images: np.ndarray, seed: int, noise: bool = True,
                  batch_size: int = 64) -> list[list[np.ndarray]]:
    """Per-group query chunks produced by one pass over ``images``.

    With ``noise`` the keys get the training-time Gaussian perturbation.
    """
    from . import keycodes
    from .trainer import encode_images

    model = checkpoint.model
    sh = model.shape
    rng = np.random.default_rng(seed) if noise else None
    out: list[list[np.ndarray]] = [[] for _ in model.groups]
    for start in range(0, len(images), batch_size):
        keys = encode_images(model, images[start:start + batch_size])
        tiled = keycodes.tile_interleave(keys, sh.feature_size, sh.feature_size)
        for s in range(len(model.groups)):
            q, _ = keycodes.slice_queries(tiled, s, sh.grid.key_len, sh.grid.r_max, rng)
            out[s].append(q)
    return out


def epoch_hits(checkpoint, images: np.ndarray, seed: int, noise: bool = True) -> list[HitStats]:
    return [collect_hits(group, chunks)
            for group, chunks in zip(checkpoint.model.groups, epoch_queries(checkpoint, images, seed, noise))]


def precision_sweep(checkpoint, images: np.ndarray, amplitudes, seed: int,
                    batch_size: int = 64) -> list[tuple[float, float]]:
    """Evaluation loss when every key slice is shifted by ``U(-a, a)``, for each amplitude ``a``."""
    from .model import eval_loss

    amplitudes = [float(a) for a in amplitudes]
    if any(b < a for a, b in zip(amplitudes, amplitudes[1:])):
        raise ValueError("amplitudes must be ascending")
    model = checkpoint.model
    weight = checkpoint.config.l2_weight
    rows = []
    for a in amplitudes:
        rng = np.random.default_rng(seed)
        total = 0.0
        for start in range(0, len(images), batch_size):
            chunk = images[start:start + batch_size]
            total += eval_loss(model, chunk, weight, rng if a > 0 else None,
                               noise="uniform", scale=a) * len(chunk)
        rows.append((a, total / len(images)))
    return rows


def sweep_csv(rows: list[tuple[float, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["amplitude", "eval_loss", "ratio"])
    base = rows[0][1] if rows else 1.0
    for a, loss in rows:
        w.writerow([f"{a:.8g}", f"{loss:.8g}", f"{loss / base:.6f}"])
    return buf.getvalue()
