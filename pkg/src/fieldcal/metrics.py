"""Field-level and overall calibration / ranking metrics.

Inputs are parallel arrays ``fields``, ``labels``, ``preds``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from ._io import dumps_json
from .data import SCORE_EPS

LOGGER = logging.getLogger(__name__)

__all__ = [
    "field_rce",
    "field_rce_details",
    "log_loss",
    "auc",
    "field_auc",
    "reliability_table",
    "field_breakdown",
    "MethodMetrics",
    "EvalReport",
    "evaluate",
]


def _groups(fields):
    fields = np.asarray(fields, dtype=object)
    values, inverse = np.unique(fields.astype(str), return_inverse=True)
    return values, inverse


def field_rce_details(fields, labels, preds) -> tuple[float, list[str]]:
    """Field-RCE plus the field values skipped for having no positives.

    ``(1/|D|) * sum_z |sum_{D^z}(y - p)| / mean_{D^z}(y)`` over fields with at
    least one positive label; ``|D|`` counts every sample.
    """
    y = np.asarray(labels, dtype=np.float64)
    p = np.asarray(preds, dtype=np.float64)
    values, inv = _groups(fields)
    n_z = np.bincount(inv, minlength=values.size)
    pos_z = np.bincount(inv, weights=y, minlength=values.size)
    resid_z = np.bincount(inv, weights=y - p, minlength=values.size)
    ok = pos_z > 0
    skipped = [str(v) for v in values[~ok]]
    if skipped:
        warnings.warn(f"Field-RCE undefined for fields with no positives: {skipped}", RuntimeWarning, stacklevel=2)
    total = np.sum(np.abs(resid_z[ok]) / (pos_z[ok] / n_z[ok]))
    return float(total / y.size), skipped


def field_rce(fields, labels, preds) -> float:
    return field_rce_details(fields, labels, preds)[0]


def log_loss(labels, preds) -> float:
    y = np.asarray(labels, dtype=np.float64)
    p = np.clip(np.asarray(preds, dtype=np.float64), SCORE_EPS, 1 - SCORE_EPS)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def auc(labels, preds) -> float | None:
    """Mann-Whitney AUC with ties counted one half; ``None`` for a single class."""
    y = np.asarray(labels)
    n_pos = int(np.sum(y == 1))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(np.asarray(preds, dtype=np.float64))
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def field_auc(fields, labels, preds) -> float | None:
    """Sample-count weighted mean of per-field AUCs over fields with both classes."""
    y = np.asarray(labels)
    p = np.asarray(preds, dtype=np.float64)
    values, inv = _groups(fields)
    num = den = 0.0
    for j in range(values.size):
        mask = inv == j
        a = auc(y[mask], p[mask])
        if a is not None:
            w = mask.sum()
            num += w * a
            den += w
    return None if den == 0 else float(num / den)


def reliability_table(fields, labels, preds, bins: int = 10) -> dict:
    """Per-field equi-frequency bins of predictions: ``[(bin, mean_pred, mean_label, count)]``."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    y = np.asarray(labels, dtype=np.float64)
    p = np.asarray(preds, dtype=np.float64)
    values, inv = _groups(fields)
    out = {}
    for j, v in enumerate(values):
        idx = np.flatnonzero(inv == j)
        order = idx[np.argsort(p[idx], kind="stable")]
        rows = []
        for b, chunk in enumerate(np.array_split(order, min(bins, order.size)), start=1):
            rows.append((b, float(p[chunk].mean()), float(y[chunk].mean()), int(chunk.size)))
        out[str(v)] = rows
    return out


def field_breakdown(fields, labels, preds) -> list[dict]:
    y = np.asarray(labels, dtype=np.float64)
    p = np.asarray(preds, dtype=np.float64)
    values, inv = _groups(fields)
    rows = []
    for j, v in enumerate(values):
        mask = inv == j
        rows.append(
            {
                "field_value": str(v),
                "count": int(mask.sum()),
                "positives": int(y[mask].sum()),
                "mean_label": float(y[mask].mean()),
                "mean_pred": float(p[mask].mean()),
                "residual_sum": float((y[mask] - p[mask]).sum()),
                "auc": auc(y[mask], p[mask]),
            }
        )
    return rows


@dataclass
class MethodMetrics:
    field_rce: float | None
    logloss: float
    field_auc: float | None
    auc: float | None
    true_field_rce: float | None = None


COLUMNS = (("Field-RCE", "field_rce"), ("LogLoss", "logloss"), ("Field-AUC", "field_auc"), ("AUC", "auc"))


@dataclass
class EvalReport:
    """Metric table keyed by method name, plus per-field breakdowns."""

    methods: dict = field(default_factory=dict)
    breakdown: dict = field(default_factory=dict)
    n_samples: int = 0
    skipped_fields: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)

    def add(self, name: str, fields, labels, preds, true_prob=None) -> MethodMetrics:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            rce, skipped = field_rce_details(fields, labels, preds)
            true_rce = None
            if true_prob is not None:
                # Field-RCE measured against the true likelihoods instead of sampled labels
                true_rce, _ = field_rce_details(fields, true_prob, preds)
        if skipped:
            LOGGER.warning("%s: Field-RCE skipped fields with no positives: %s", name, skipped)
            self.skipped_fields[name] = skipped
        m = MethodMetrics(rce, log_loss(labels, preds), field_auc(fields, labels, preds), auc(labels, preds), true_rce)
        self.methods[name] = m
        self.breakdown[name] = field_breakdown(fields, labels, preds)
        self.n_samples = int(np.asarray(labels).size)
        return m

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "methods": {k: vars(v) for k, v in self.methods.items()},
            "breakdown": self.breakdown,
            "skipped_fields": self.skipped_fields,
            "errors": self.errors,
        }

    def to_json(self) -> str:
        return dumps_json(self.to_dict())

    def to_text(self) -> str:
        """Fixed-width table, four decimals, one row per method."""
        show_true = any(m.true_field_rce is not None for m in self.methods.values())
        cols = list(COLUMNS) + ([("True-RCE", "true_field_rce")] if show_true else [])
        width = max([len("Method")] + [len(k) for k in self.methods] + [len(k) for k in self.errors]) + 2
        lines = ["Method".ljust(width) + "".join(c.rjust(11) for c, _ in cols)]
        lines.append("-" * len(lines[0]))
        for name, m in self.methods.items():
            cells = []
            for _, attr in cols:
                v = getattr(m, attr)
                cells.append(("n/a" if v is None else f"{v:.4f}").rjust(11))
            lines.append(name.ljust(width) + "".join(cells))
        for name, err in self.errors.items():
            lines.append(name.ljust(width) + f"  FAILED: {err}")
        return "\n".join(lines) + "\n"


def evaluate(predictions: dict, fields, labels, true_prob=None) -> EvalReport:
    report = EvalReport()
    for name, preds in predictions.items():
        report.add(name, fields, labels, preds, true_prob)
    return report
