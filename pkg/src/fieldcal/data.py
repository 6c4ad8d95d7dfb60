"""Samples, datasets, file I/O, stratified splitting and synthetic data.

A :class:`Dataset` stores its columns as read-only numpy arrays; iterating it
(or reading :attr:`Dataset.samples`) yields :class:`Sample` records.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

SCORE_EPS = 1e-6

__all__ = [
    "SCORE_EPS",
    "DataFormatError",
    "Sample",
    "Dataset",
    "RateCurve",
    "FieldSpec",
    "SyntheticSpec",
    "load_dataset",
    "save_dataset",
    "iter_rows",
    "split_indices",
    "split_dataset",
    "generate_synthetic",
    "save_ground_truth",
    "load_ground_truth",
    "sigmoid",
    "logit",
]


class DataFormatError(ValueError):
    """Raised for unreadable or invalid dataset files."""


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    out = np.log(p) - np.log1p(-p)
    return out if out.ndim else float(out)


def clip_scores(scores):
    return np.clip(np.asarray(scores, dtype=np.float64), SCORE_EPS, 1.0 - SCORE_EPS)


@dataclass(frozen=True)
class Sample:
    score: float
    label: int
    field_value: str
    features: tuple[float, ...] = ()
    weight: float = 1.0


class Dataset:
    """Immutable column store of calibration samples.

    Scores are clipped into ``[1e-6, 1 - 1e-6]`` on construction.
    """

    def __init__(
        self,
        scores: Sequence[float] | np.ndarray,
        labels: Sequence[int] | np.ndarray,
        fields: Sequence[str] | np.ndarray,
        features: np.ndarray | None = None,
        weights: Sequence[float] | np.ndarray | None = None,
    ):
        scores = clip_scores(scores).reshape(-1)
        labels = np.asarray(labels)
        n = scores.shape[0]
        if labels.shape != (n,):
            raise ValueError("labels must have one entry per score")
        if n and not np.all((labels == 0) | (labels == 1)):
            raise ValueError("labels must be 0 or 1")
        labels = labels.astype(np.int64)
        fields = np.asarray([str(f) for f in fields], dtype=object)
        if fields.shape != (n,):
            raise ValueError("fields must have one entry per score")
        if any(f == "" for f in fields):
            raise ValueError("field_value must be non-empty")
        if features is None:
            features = np.zeros((n, 0), dtype=np.float64)
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != n:
            raise ValueError("features must be an (n, d) array")
        if weights is None:
            weights = np.ones(n, dtype=np.float64)
        weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        if weights.shape != (n,) or np.any(weights <= 0):
            raise ValueError("weights must be positive, one per score")
        for arr in (scores, labels, fields, features, weights):
            arr.setflags(write=False)
        self.scores = scores
        self.labels = labels
        self.fields = fields
        self.features = features
        self.weights = weights

    @classmethod
    def from_samples(cls, samples: Iterable[Sample]) -> "Dataset":
        samples = list(samples)
        dims = {len(s.features) for s in samples}
        if len(dims) > 1:
            raise ValueError("samples have inconsistent feature lengths")
        d = dims.pop() if dims else 0
        feats = np.array([s.features for s in samples], dtype=np.float64).reshape(len(samples), d)
        return cls(
            [s.score for s in samples],
            [s.label for s in samples],
            [s.field_value for s in samples],
            feats,
            [s.weight for s in samples],
        )

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def samples(self) -> list[Sample]:
        return list(self)

    @property
    def field_values(self) -> list[str]:
        """Distinct field values, sorted."""
        return sorted(set(self.fields.tolist()))

    def __len__(self) -> int:
        return self.scores.shape[0]

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Sample:
        return Sample(
            float(self.scores[i]),
            int(self.labels[i]),
            self.fields[i],
            tuple(self.features[i].tolist()),
            float(self.weights[i]),
        )

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.scores[idx], self.labels[idx], self.fields[idx], self.features[idx], self.weights[idx]
        )

    def field_mask(self, value: str) -> np.ndarray:
        return self.fields == value

    @staticmethod
    def concat(*datasets: "Dataset") -> "Dataset":
        dims = {d.feature_dim for d in datasets}
        if len(dims) > 1:
            raise ValueError("cannot concatenate datasets with different feature_dim")
        return Dataset(
            np.concatenate([d.scores for d in datasets]),
            np.concatenate([d.labels for d in datasets]),
            np.concatenate([d.fields for d in datasets]),
            np.concatenate([d.features for d in datasets]),
            np.concatenate([d.weights for d in datasets]),
        )

    def __repr__(self) -> str:
        return f"Dataset(n={len(self)}, fields={len(self.field_values)}, feature_dim={self.feature_dim})"


# ---------------------------------------------------------------------------
# file formats


def _detect_format(path, fmt):
    if fmt is not None:
        fmt = fmt.lower()
    else:
        ext = os.path.splitext(str(path))[1].lower()
        fmt = {".csv": "csv", ".jsonl": "jsonl"}.get(ext)
        if fmt is None:
            raise DataFormatError(f"cannot infer format from extension of {path!r}")
    if fmt not in ("csv", "jsonl"):
        raise DataFormatError(f"unknown format {fmt!r} (expected csv or jsonl)")
    return fmt


def _parse_score(raw, row, col="score"):
    try:
        v = float(raw)
    except (TypeError, ValueError):
        raise DataFormatError(f"row {row}, column {col!r}: not a number: {raw!r}") from None
    if not (0.0 <= v <= 1.0):
        raise DataFormatError(f"row {row}, column {col!r}: score {v} outside [0, 1]")
    return v


def _parse_label(raw, row):
    try:
        v = float(raw)
    except (TypeError, ValueError):
        raise DataFormatError(f"row {row}, column 'label': not a number: {raw!r}") from None
    if v not in (0.0, 1.0):
        raise DataFormatError(f"row {row}, column 'label': expected 0 or 1, got {raw!r}")
    return int(v)


def _parse_field(raw, row):
    if raw is None or str(raw) == "":
        raise DataFormatError(f"row {row}, column 'field_value': empty field value")
    return str(raw)


def _parse_real(raw, row, col):
    try:
        v = float(raw)
    except (TypeError, ValueError):
        raise DataFormatError(f"row {row}, column {col!r}: not a number: {raw!r}") from None
    if not math.isfinite(v):
        raise DataFormatError(f"row {row}, column {col!r}: non-finite value")
    return v


def _feature_columns(header):
    cols = [c for c in header if c.startswith("f") and c[1:].isdigit()]
    dim = len(cols)
    expected = [f"f{j}" for j in range(dim)]
    if sorted(cols, key=lambda c: int(c[1:])) != expected:
        raise DataFormatError(f"feature columns must be f0..f{dim - 1}, got {cols}")
    return expected


def iter_rows(path, format: str | None = None) -> Iterator[tuple[dict, Sample]]:
    """Yield ``(raw_row, sample)`` pairs from a dataset file, one row at a time.

    ``raw_row`` keeps the original string/JSON values so callers can echo rows.
    Row numbers in error messages count data rows from 1.
    """
    fmt = _detect_format(path, format)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, encoding="utf-8", newline="") as fh:
        if fmt == "csv":
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            missing = [c for c in ("score", "label", "field_value") if c not in header]
            if missing:
                raise DataFormatError(f"missing required columns: {missing}")
            fcols = _feature_columns(header)
            for row_no, raw in enumerate(reader, start=1):
                if None in raw or any(v is None for v in raw.values()):
                    raise DataFormatError(f"row {row_no}: wrong number of columns")
                yield raw, _sample_from_mapping(raw, row_no, fcols)
        else:
            dim = None
            for row_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    raw = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataFormatError(f"row {row_no}: invalid JSON ({exc.msg})") from None
                if not isinstance(raw, dict):
                    raise DataFormatError(f"row {row_no}: expected a JSON object")
                for col in ("score", "label", "field_value"):
                    if col not in raw:
                        raise DataFormatError(f"row {row_no}, column {col!r}: missing")
                feats = raw.get("features", [])
                if not isinstance(feats, list):
                    raise DataFormatError(f"row {row_no}, column 'features': expected an array")
                if dim is None:
                    dim = len(feats)
                elif len(feats) != dim:
                    raise DataFormatError(f"row {row_no}, column 'features': expected length {dim}")
                sample = Sample(
                    _parse_score(raw["score"], row_no),
                    _parse_label(raw["label"], row_no),
                    _parse_field(raw["field_value"], row_no),
                    tuple(_parse_real(v, row_no, "features") for v in feats),
                    _parse_weight(raw.get("weight", 1.0), row_no),
                )
                yield raw, sample


def _parse_weight(raw, row):
    w = _parse_real(raw, row, "weight")
    if w <= 0:
        raise DataFormatError(f"row {row}, column 'weight': must be positive")
    return w


def _sample_from_mapping(raw, row_no, fcols):
    weight = raw.get("weight")
    return Sample(
        _parse_score(raw["score"], row_no),
        _parse_label(raw["label"], row_no),
        _parse_field(raw["field_value"], row_no),
        tuple(_parse_real(raw[c], row_no, c) for c in fcols),
        1.0 if weight in (None, "") else _parse_weight(weight, row_no),
    )


def load_dataset(path, format: str | None = None) -> Dataset:
    """Read a CSV or JSONL dataset; scores are clipped into ``[1e-6, 1 - 1e-6]``."""
    samples = [s for _, s in iter_rows(path, format)]
    return Dataset.from_samples(samples)


def dataset_to_text(data: Dataset, format: str = "csv", include_weight: bool = False) -> str:
    buf = io.StringIO()
    d = data.feature_dim
    if format == "csv":
        writer = csv.writer(buf, lineterminator="\n")
        header = ["score", "label", "field_value"]
        if include_weight:
            header.append("weight")
        header += [f"f{j}" for j in range(d)]
        writer.writerow(header)
        for i in range(len(data)):
            row = [repr(float(data.scores[i])), int(data.labels[i]), data.fields[i]]
            if include_weight:
                row.append(repr(float(data.weights[i])))
            row += [repr(float(v)) for v in data.features[i]]
            writer.writerow(row)
    elif format == "jsonl":
        for i in range(len(data)):
            obj = {
                "score": float(data.scores[i]),
                "label": int(data.labels[i]),
                "field_value": data.fields[i],
            }
            if include_weight:
                obj["weight"] = float(data.weights[i])
            if d:
                obj["features"] = [float(v) for v in data.features[i]]
            buf.write(json.dumps(obj) + "\n")
    else:
        raise DataFormatError(f"unknown format {format!r} (expected csv or jsonl)")
    return buf.getvalue()


def save_dataset(data: Dataset, path, format: str | None = None, include_weight: bool = False) -> None:
    from ._io import atomic_write_text

    fmt = _detect_format(path, format)
    atomic_write_text(path, dataset_to_text(data, fmt, include_weight))


def save_ground_truth(true_prob, path) -> None:
    from ._io import atomic_write_text

    lines = ["true_prob"] + [repr(float(v)) for v in np.asarray(true_prob).reshape(-1)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_ground_truth(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "true_prob":
            raise DataFormatError(f"{path}: expected header 'true_prob', got {header!r}")
        vals = []
        for row_no, line in enumerate(fh, start=1):
            if line.strip():
                vals.append(_parse_real(line.strip(), row_no, "true_prob"))
    return np.asarray(vals, dtype=np.float64)


# ---------------------------------------------------------------------------
# splitting


def _allocate(n: int, fractions: np.ndarray) -> np.ndarray:
    """Largest-remainder rounding of ``n * fractions`` to integers summing to n."""
    raw = n * fractions
    counts = np.floor(raw).astype(np.int64)
    short = n - counts.sum()
    if short:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def split_indices(fields, fractions: Sequence[float], seed: int) -> list[np.ndarray]:
    """Stratified-by-field random partition of ``range(len(fields))``.

    Each returned index array is sorted, so splits keep the original row order.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.ndim != 1 or fr.size == 0 or np.any(fr <= 0):
        raise ValueError("fractions must be a nonempty list of positive reals")
    if abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fr.sum()}")
    fields = np.asarray(fields, dtype=object)
    if fields.size == 0:
        raise ValueError("cannot split an empty dataset")
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[] for _ in fr]
    for value in sorted(set(fields.tolist())):
        idx = np.flatnonzero(fields == value)
        idx = idx[rng.permutation(idx.size)]
        counts = _allocate(idx.size, fr)
        start = 0
        for j, c in enumerate(counts):
            parts[j].append(idx[start:start + c])
            start += c
    return [np.sort(np.concatenate(p)) for p in parts]


def split_dataset(d: Dataset, fractions: Sequence[float], seed: int) -> list[Dataset]:
    """Deterministic, field-stratified partition of ``d``."""
    if len(d) == 0:
        raise ValueError("cannot split an empty dataset")
    return [d.subset(idx) for idx in split_indices(d.fields, fractions, seed)]


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class RateCurve:
    """Distribution of true response probabilities within one field value.

    ``kind`` is one of ``constant`` (``rate``), ``beta`` (``a``, ``b``),
    ``logit_normal`` (``mean``, ``std`` on the logit scale) or ``uniform``
    (``low``, ``high``).
    """

    kind: str = "constant"
    params: dict = field(default_factory=lambda: {"rate": 0.1})

    _REQUIRED = {
        "constant": ("rate",),
        "beta": ("a", "b"),
        "logit_normal": ("mean", "std"),
        "uniform": ("low", "high"),
    }

    def __post_init__(self):
        req = self._REQUIRED.get(self.kind)
        if req is None:
            raise ValueError(f"unknown rate curve kind {self.kind!r}")
        missing = [k for k in req if k not in self.params]
        if missing:
            raise ValueError(f"rate curve {self.kind!r} needs {missing}")
        p = self.params
        if self.kind == "constant" and not 0 < p["rate"] < 1:
            raise ValueError("constant rate must lie in (0, 1)")
        if self.kind == "beta" and (p["a"] <= 0 or p["b"] <= 0):
            raise ValueError("beta parameters must be positive")
        if self.kind == "logit_normal" and p["std"] < 0:
            raise ValueError("logit_normal std must be nonnegative")
        if self.kind == "uniform" and not 0 < p["low"] <= p["high"] < 1:
            raise ValueError("uniform bounds must satisfy 0 < low <= high < 1")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        p = self.params
        if self.kind == "constant":
            q = np.full(n, float(p["rate"]))
        elif self.kind == "beta":
            q = rng.beta(p["a"], p["b"], size=n)
        elif self.kind == "logit_normal":
            q = sigmoid(p["mean"] + p["std"] * rng.standard_normal(n))
        else:
            q = rng.uniform(p["low"], p["high"], size=n)
        return clip_scores(q)

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params}

    @classmethod
    def from_dict(cls, d: dict) -> "RateCurve":
        d = dict(d)
        kind = d.pop("kind", "constant")
        return cls(kind, d)


@dataclass(frozen=True)
class FieldSpec:
    name: str
    sample_count: int
    curve: RateCurve
    score_bias: float = 1.0

    def __post_init__(self):
        if not self.name:
            raise ValueError("field name must be non-empty")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if not self.score_bias > 0:
            raise ValueError("score_bias (odds distortion) must be positive")


@dataclass(frozen=True)
class SyntheticSpec:
    """Ground-truth generator settings.

    The upstream "model" score is ``sigmoid(logit(q) + ln(score_bias) + eps)``
    with ``eps ~ N(0, noise_std^2)``, so each field value is over- or
    under-estimated by a fixed odds factor.
    """

    fields: tuple[FieldSpec, ...]
    noise_seed: int = 0
    noise_std: float = 0.0
    feature_dim: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if not self.fields:
            raise ValueError("at least one field is required")
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise ValueError("field names must be unique")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "fields": [
                {"name": f.name, "count": f.sample_count, "curve": f.curve.to_dict(), "score_bias": f.score_bias}
                for f in self.fields
            ],
            "noise_seed": self.noise_seed,
            "noise_std": self.noise_std,
            "feature_dim": self.feature_dim,
            "shuffle": self.shuffle,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        fields = tuple(
            FieldSpec(f["name"], int(f["count"]), RateCurve.from_dict(f.get("curve", {})), float(f.get("score_bias", 1.0)))
            for f in d["fields"]
        )
        return cls(
            fields,
            int(d.get("noise_seed", 0)),
            float(d.get("noise_std", 0.0)),
            int(d.get("feature_dim", 0)),
            bool(d.get("shuffle", True)),
        )


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, np.ndarray]:
    """Draw a dataset with known per-sample true probabilities.

    Returns ``(dataset, true_prob)`` where ``true_prob[i]`` is the Bernoulli
    parameter behind ``dataset.labels[i]``. Deterministic in ``noise_seed``.
    """
    rng = np.random.default_rng(spec.noise_seed)
    scores, labels, fields, truth, feats = [], [], [], [], []
    for f in spec.fields:
        n = f.sample_count
        q = f.curve.sample(rng, n)
        y = (rng.random(n) < q).astype(np.int64)
        z = logit(q) + math.log(f.score_bias)
        if spec.noise_std > 0:
            z = z + spec.noise_std * rng.standard_normal(n)
        scores.append(sigmoid(z))
        labels.append(y)
        fields.append(np.full(n, f.name, dtype=object))
        truth.append(q)
        if spec.feature_dim:
            # features carry a noisy view of the true logit so an auxiliary model can use them
            feats.append(logit(q)[:, None] + rng.standard_normal((n, spec.feature_dim)))
    scores = np.concatenate(scores)
    labels = np.concatenate(labels)
    fields = np.concatenate(fields)
    truth = np.concatenate(truth)
    features = np.concatenate(feats) if feats else None
    if spec.shuffle:
        order = rng.permutation(scores.size)
        scores, labels, fields, truth = scores[order], labels[order], fields[order], truth[order]
        if features is not None:
            features = features[order]
    return Dataset(scores, labels, fields, features), truth
