"""Per-field equi-frequency binning and posterior statistics.

Every fitted table carries a ``__GLOBAL__`` entry built from all samples;
field values with fewer than ``K * min_bin_count`` samples are served by it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .pava import pava

GLOBAL = "__GLOBAL__"
RIGHT_EXTENSION = 1e-9

__all__ = [
    "GLOBAL",
    "BinBounds",
    "PosteriorStats",
    "FieldBinning",
    "FieldBinningTable",
    "FieldFrequencyStats",
    "fit_equifreq_bounds",
    "assign_bin",
    "assign_bins",
    "fit_field_binning",
    "compute_frequency_stats",
]


@dataclass(frozen=True)
class BinBounds:
    """Ascending bin edges; ``len(bounds) == k + 1``.

    ``requested_k`` is what the caller asked for; ``k`` can be smaller when tied
    scores produced duplicate quantiles that were merged away.
    """

    bounds: np.ndarray
    requested_k: int

    def __post_init__(self):
        b = np.asarray(self.bounds, dtype=np.float64)
        if b.ndim != 1 or b.size < 2:
            raise ValueError("bounds need at least two edges")
        if np.any(np.diff(b) < 0):
            raise ValueError("bounds must be non-decreasing")
        b.setflags(write=False)
        object.__setattr__(self, "bounds", b)

    @property
    def k(self) -> int:
        return self.bounds.size - 1

    @property
    def merged(self) -> bool:
        return self.k < self.requested_k


@dataclass(frozen=True)
class PosteriorStats:
    avg_rate: float
    positive_sum: int
    count: int


def fit_equifreq_bounds(scores, K: int) -> BinBounds:
    """Edges at the empirical 0, 1/K, ..., (K-1)/K quantiles plus ``max + 1e-9``.

    With N distinct scores, bin ``j`` holds sorted positions
    ``floor(j*N/K) .. floor((j+1)*N/K) - 1``. Duplicate edges (tied scores)
    are merged, which lowers the effective bin count.
    """
    s = np.sort(np.asarray(scores, dtype=np.float64).reshape(-1))
    if s.size == 0:
        raise ValueError("cannot bin an empty score list")
    if K < 1:
        raise ValueError("K must be >= 1")
    n = s.size
    left = s[(np.arange(K) * n) // K]
    edges = np.append(left, s[-1] + RIGHT_EXTENSION)
    edges = np.unique(edges)
    return BinBounds(edges, K)


def assign_bins(scores, bounds) -> np.ndarray:
    """Vectorised 1-based bin index under ``b[k-1] <= s < b[k]``, clamped to ``[1, K]``."""
    b = bounds.bounds if isinstance(bounds, BinBounds) else np.asarray(bounds, dtype=np.float64)
    k = b.size - 1
    idx = np.searchsorted(b, np.asarray(scores, dtype=np.float64), side="right")
    return np.clip(idx, 1, k)


def assign_bin(score: float, bounds) -> int:
    return int(assign_bins(np.array([score]), bounds)[0])


@dataclass(frozen=True)
class FieldBinning:
    """Bounds and per-bin posterior statistics for one field value (or GLOBAL)."""

    bounds: BinBounds
    avg_rate: np.ndarray
    positive_sum: np.ndarray
    count: np.ndarray

    @property
    def k(self) -> int:
        return self.bounds.k

    @property
    def stats(self) -> list[PosteriorStats]:
        return [
            PosteriorStats(float(r), int(p), int(c))
            for r, p, c in zip(self.avg_rate, self.positive_sum, self.count)
        ]

    def to_dict(self) -> dict:
        return {
            "bounds": [float(b) for b in self.bounds.bounds],
            "requested_k": self.bounds.requested_k,
            "stats": [
                {"avg_rate": float(r), "positive_sum": int(p), "count": int(c)}
                for r, p, c in zip(self.avg_rate, self.positive_sum, self.count)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FieldBinning":
        bounds = BinBounds(np.asarray(d["bounds"], dtype=np.float64), int(d.get("requested_k", len(d["bounds"]) - 1)))
        stats = d["stats"]
        if len(stats) != bounds.k:
            raise ValueError("stats length must equal number of bins")
        return cls(
            bounds,
            np.array([s["avg_rate"] for s in stats], dtype=np.float64),
            np.array([s["positive_sum"] for s in stats], dtype=np.int64),
            np.array([s["count"] for s in stats], dtype=np.int64),
        )


def _fit_entry(scores, labels, K, smooth):
    bounds = fit_equifreq_bounds(scores, K)
    bins = assign_bins(scores, bounds) - 1
    count = np.bincount(bins, minlength=bounds.k).astype(np.int64)
    pos = np.bincount(bins, weights=labels, minlength=bounds.k).round().astype(np.int64)
    keep = count > 0
    if not np.all(keep):
        # cannot happen for edges taken from the data itself, kept as a guard
        edges = np.append(bounds.bounds[:-1][keep], bounds.bounds[-1])
        bounds = BinBounds(edges, K)
        count, pos = count[keep], pos[keep]
    rate = pos / count
    if smooth:
        rate = pava(rate, count)
    return FieldBinning(bounds, rate, pos, count)


@dataclass
class FieldBinningTable:
    """``field value -> FieldBinning`` with a mandatory GLOBAL entry."""

    K: int
    entries: dict
    min_bin_count: int = 10

    def __post_init__(self):
        if GLOBAL not in self.entries:
            raise ValueError("binning table needs a GLOBAL entry")

    def has_field(self, value: str) -> bool:
        return value != GLOBAL and value in self.entries

    def lookup(self, value: str) -> FieldBinning:
        return self.entries.get(value, self.entries[GLOBAL])

    def entry_key(self, value: str) -> str:
        return value if value in self.entries else GLOBAL

    @property
    def field_values(self) -> list[str]:
        return sorted(k for k in self.entries if k != GLOBAL)

    def keys(self) -> list[str]:
        """Deterministic entry order: sorted field values, then GLOBAL."""
        return self.field_values + [GLOBAL]

    def to_dict(self) -> dict:
        return {k: self.entries[k].to_dict() for k in self.keys()}

    @classmethod
    def from_dict(cls, d: dict, K: int | None = None, min_bin_count: int = 10) -> "FieldBinningTable":
        entries = {k: FieldBinning.from_dict(v) for k, v in d.items()}
        if K is None:
            K = entries[GLOBAL].bounds.requested_k
        return cls(K, entries, min_bin_count)


def fit_field_binning(
    data: Dataset,
    K: int,
    min_bin_count: int = 10,
    smooth: bool = False,
    global_only: bool = False,
) -> FieldBinningTable:
    """Fit equi-frequency bins and per-bin stats for each sufficiently large field.

    ``smooth`` applies PAVA over each entry's bin rates (count-weighted); the
    resulting ``avg_rate`` then no longer equals ``positive_sum / count``.
    ``global_only`` skips per-field entries entirely.
    """
    if len(data) == 0:
        raise ValueError("cannot fit binning on an empty dataset")
    if min_bin_count < 1:
        raise ValueError("min_bin_count must be >= 1")
    labels = data.labels.astype(np.float64)
    entries = {GLOBAL: _fit_entry(data.scores, labels, K, smooth)}
    if not global_only:
        threshold = K * min_bin_count
        for value in data.field_values:
            mask = data.fields == value
            if mask.sum() >= threshold:
                entries[value] = _fit_entry(data.scores[mask], labels[mask], K, smooth)
    return FieldBinningTable(K, entries, min_bin_count)


@dataclass
class FieldFrequencyStats:
    """Per-field ``(total_count, positive_count)``."""

    counts: dict

    def total(self, value: str) -> int:
        return self.counts.get(value, (0, 0))[0]

    def positives(self, value: str) -> int:
        return self.counts.get(value, (0, 0))[1]

    def to_dict(self) -> dict:
        return {k: {"total_count": t, "positive_count": p} for k, (t, p) in sorted(self.counts.items())}

    @classmethod
    def from_dict(cls, d: dict) -> "FieldFrequencyStats":
        return cls({k: (int(v["total_count"]), int(v["positive_count"])) for k, v in d.items()})


def compute_frequency_stats(data: Dataset) -> FieldFrequencyStats:
    if len(data) == 0:
        raise ValueError("cannot compute frequency stats of an empty dataset")
    values, inverse = np.unique(data.fields.astype(str), return_inverse=True)
    totals = np.bincount(inverse, minlength=values.size)
    positives = np.bincount(inverse, weights=data.labels, minlength=values.size).round().astype(np.int64)
    return FieldFrequencyStats({str(v): (int(t), int(p)) for v, t, p in zip(values, totals, positives)})
