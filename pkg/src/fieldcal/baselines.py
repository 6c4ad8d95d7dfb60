"""Classical calibrators: histogram binning, isotonic regression, Platt scaling,
Gamma calibration and smoothed isotonic regression (SIR).

All calibrators share :class:`Calibrator`'s ``apply`` / ``to_dict`` surface and
are fitted on ``(score, label)`` pairs, ignoring the field value. A
:class:`PerFieldCalibrator` fits one instance per field value instead.
"""

from __future__ import annotations

import logging
from typing import Callable

import numpy as np

from .binning import assign_bins, fit_equifreq_bounds
from .data import SCORE_EPS, Dataset, logit, sigmoid
from .pava import pava

LOGGER = logging.getLogger(__name__)

FORMAT_VERSION = 1
DEFAULT_BINS = 10

# Newton settings for the parametric (Platt / Gamma) fits
MAX_ITER = 100
TOL = 1e-8
RIDGE = 1e-10

__all__ = [
    "CalibrationFitError",
    "Calibrator",
    "IdentityCalibrator",
    "HistogramCalibrator",
    "IsotonicCalibrator",
    "PlattCalibrator",
    "GammaCalibrator",
    "SIRCalibrator",
    "PerFieldCalibrator",
    "fit_histogram",
    "fit_isotonic",
    "fit_platt",
    "fit_gamma",
    "fit_sir",
    "fit_baseline",
    "apply",
    "calibrator_from_dict",
    "BASELINES",
]


class CalibrationFitError(ValueError):
    """Raised when a calibrator cannot be fitted to the given data."""


class Calibrator:
    variant = "base"

    def apply(self, scores, fields=None) -> np.ndarray:
        s = np.clip(np.asarray(scores, dtype=np.float64), SCORE_EPS, 1 - SCORE_EPS)
        return self._apply(s)

    def _apply(self, s: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> dict:
        return {}

    def to_dict(self) -> dict:
        return {"format": FORMAT_VERSION, "variant": self.variant, **self.params()}

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.params()})"


class IdentityCalibrator(Calibrator):
    variant = "identity"

    def apply(self, scores, fields=None):
        return np.asarray(scores, dtype=np.float64).copy()


class HistogramCalibrator(Calibrator):
    variant = "histogram"

    def __init__(self, bounds, values):
        self.bounds = np.asarray(bounds, dtype=np.float64)
        self.values = np.asarray(values, dtype=np.float64)

    def _apply(self, s):
        return self.values[assign_bins(s, self.bounds) - 1]

    def params(self):
        return {"bounds": self.bounds.tolist(), "values": self.values.tolist()}


class _StepCalibrator(Calibrator):
    """Right-continuous step function: value of the last threshold <= score."""

    def __init__(self, thresholds, values):
        self.thresholds = np.asarray(thresholds, dtype=np.float64)
        self.values = np.asarray(values, dtype=np.float64)

    def _apply(self, s):
        idx = np.searchsorted(self.thresholds, s, side="right") - 1
        return self.values[np.clip(idx, 0, self.values.size - 1)]

    def params(self):
        return {"thresholds": self.thresholds.tolist(), "values": self.values.tolist()}


class IsotonicCalibrator(_StepCalibrator):
    variant = "isotonic"


class SIRCalibrator(Calibrator):
    """Continuous piecewise-linear interpolation through isotonic points."""

    variant = "sir"

    def __init__(self, xs, ys):
        self.xs = np.asarray(xs, dtype=np.float64)
        self.ys = np.asarray(ys, dtype=np.float64)

    def _apply(self, s):
        return np.interp(s, self.xs, self.ys)

    def params(self):
        return {"xs": self.xs.tolist(), "ys": self.ys.tolist()}


class PlattCalibrator(Calibrator):
    """``sigmoid(a * logit(s) + b)``."""

    variant = "platt"

    def __init__(self, a=1.0, b=0.0):
        self.a, self.b = float(a), float(b)

    def _apply(self, s):
        return sigmoid(self.a * logit(s) + self.b)

    def params(self):
        return {"a": self.a, "b": self.b}


class GammaCalibrator(Calibrator):
    """``sigmoid(a * ln(s) + b * s + c)``: log-ratio of two Gamma densities."""

    variant = "gamma"

    def __init__(self, a=0.0, b=0.0, c=0.0):
        self.a, self.b, self.c = float(a), float(b), float(c)

    def _apply(self, s):
        return sigmoid(self.a * np.log(s) + self.b * s + self.c)

    def params(self):
        return {"a": self.a, "b": self.b, "c": self.c}

    def is_increasing_on(self, lo: float, hi: float) -> bool:
        # derivative of the logit is a / s + b, monotone in s
        return self.a / lo + self.b > 0 and self.a / hi + self.b > 0


class PerFieldCalibrator(Calibrator):
    """One calibrator per field value, with a global fallback for unseen values."""

    variant = "per_field"

    def __init__(self, members: dict, fallback: Calibrator):
        self.members = members
        self.fallback = fallback

    def apply(self, scores, fields=None):
        s = np.asarray(scores, dtype=np.float64)
        if fields is None:
            return self.fallback.apply(s)
        fields = np.asarray(fields, dtype=object)
        out = np.empty_like(s)
        for value in set(fields.tolist()):
            mask = fields == value
            out[mask] = self.members.get(value, self.fallback).apply(s[mask])
        return out

    def to_dict(self):
        return {
            "format": FORMAT_VERSION,
            "variant": self.variant,
            "members": {k: v.to_dict() for k, v in sorted(self.members.items())},
            "fallback": self.fallback.to_dict(),
        }


def apply(c: Calibrator, score: float) -> float:
    return float(c.apply(np.array([score]))[0])


# ---------------------------------------------------------------------------
# fitting


def fit_histogram(data: Dataset, K: int = DEFAULT_BINS) -> HistogramCalibrator:
    """Equi-frequency bins; each bin maps to its Laplace-smoothed rate ``(pos + 1) / (n + 2)``."""
    if len(data) < K:
        raise CalibrationFitError(f"histogram binning needs at least K={K} samples")
    bounds = fit_equifreq_bounds(data.scores, K)
    bins = assign_bins(data.scores, bounds) - 1
    count = np.bincount(bins, minlength=bounds.k)
    pos = np.bincount(bins, weights=data.labels, minlength=bounds.k)
    return HistogramCalibrator(bounds.bounds, (pos + 1.0) / (count + 2.0))


def _isotonic_points(x, y, w=None):
    """Pre-average ties in ``x``, then run PAVA. Returns (unique_x, fitted)."""
    order = np.argsort(x, kind="stable")
    x, y = x[order], y[order]
    w = np.ones_like(x) if w is None else w[order]
    ux, start = np.unique(x, return_index=True)
    wsum = np.add.reduceat(w, start)
    ymean = np.add.reduceat(w * y, start) / wsum
    return ux, pava(ymean, wsum)


def fit_isotonic(data: Dataset) -> IsotonicCalibrator:
    """PAVA on ``(score, label)`` sorted by score; output is the level-set step function."""
    if len(data) < 2:
        raise CalibrationFitError("isotonic regression needs at least 2 samples")
    ux, fitted = _isotonic_points(data.scores, data.labels.astype(np.float64))
    return IsotonicCalibrator(ux, fitted)


def fit_sir(data: Dataset, K: int = DEFAULT_BINS) -> SIRCalibrator:
    if len(data) < K:
        raise CalibrationFitError(f"SIR needs at least K={K} samples")
    bounds = fit_equifreq_bounds(data.scores, K)
    bins = assign_bins(data.scores, bounds) - 1
    count = np.bincount(bins, minlength=bounds.k).astype(np.float64)
    keep = count > 0
    mean_score = np.bincount(bins, weights=data.scores, minlength=bounds.k)[keep] / count[keep]
    rate = np.bincount(bins, weights=data.labels, minlength=bounds.k)[keep] / count[keep]
    return SIRCalibrator(mean_score, pava(rate, count[keep]))


def _check_two_classes(data: Dataset):
    if len(data) == 0 or data.labels.min() == data.labels.max():
        raise CalibrationFitError("degenerate labels: both classes are required")


def _bernoulli_loglik(Z, y, beta):
    eta = Z @ beta
    return float(np.mean(y * eta - np.logaddexp(0.0, eta)))


def _fit_logistic(X: np.ndarray, y: np.ndarray, theta0: np.ndarray) -> np.ndarray:
    """Maximise the mean Bernoulli log-likelihood of ``sigmoid(X @ theta)``.

    Damped Newton-Raphson from ``theta0``. The last column of ``X`` must be
    the intercept; the other columns are standardised internally and the
    returned parameters are on the original scale.
    """
    mu = X[:, :-1].mean(axis=0)
    sd = X[:, :-1].std(axis=0)
    flat = sd == 0
    mu[flat], sd[flat] = 0.0, 1.0
    Z = np.column_stack([(X[:, :-1] - mu) / sd, X[:, -1]])
    # constant feature columns carry no information; keep them out of the solve
    free = np.append(~flat, True)
    beta = np.append(theta0[:-1] * sd, theta0[-1] + np.dot(theta0[:-1], mu))
    n = y.size
    ll = _bernoulli_loglik(Z, y, beta)
    for it in range(MAX_ITER):
        p = sigmoid(Z @ beta)
        grad = Z[:, free].T @ (y - p) / n
        w = p * (1 - p)
        hess = (Z[:, free] * w[:, None]).T @ Z[:, free] / n + RIDGE * np.eye(free.sum())
        direction = np.zeros_like(beta)
        direction[free] = np.linalg.solve(hess, grad)
        step = 1.0
        while step > 1e-10:
            cand = beta + step * direction
            cand_ll = _bernoulli_loglik(Z, y, cand)
            if cand_ll >= ll - 1e-15:
                break
            step *= 0.5
        delta = cand - beta
        beta, ll = cand, cand_ll
        if np.max(np.abs(delta)) < TOL:
            break
    slopes = beta[:-1] / sd
    LOGGER.debug("newton stopped after %d iterations", it + 1)
    return np.append(slopes, beta[-1] - np.dot(slopes, mu))


def fit_platt(data: Dataset) -> PlattCalibrator:
    _check_two_classes(data)
    s = data.scores
    X = np.column_stack([logit(s), np.ones_like(s)])
    a, b = _fit_logistic(X, data.labels.astype(np.float64), np.array([1.0, 0.0]))
    return PlattCalibrator(a, b)


def fit_gamma(data: Dataset) -> GammaCalibrator:
    _check_two_classes(data)
    s = data.scores
    if np.any(s <= 0):
        raise CalibrationFitError("gamma calibration needs positive scores")
    y = data.labels.astype(np.float64)
    base = float(np.clip(y.mean(), SCORE_EPS, 1 - SCORE_EPS))
    X = np.column_stack([np.log(s), s, np.ones_like(s)])
    a, b, c = _fit_logistic(X, y, np.array([0.0, 0.0, logit(base)]))
    return GammaCalibrator(a, b, c)


BASELINES: dict[str, Callable[..., Calibrator]] = {
    "histogram": fit_histogram,
    "isotonic": fit_isotonic,
    "platt": fit_platt,
    "gamma": fit_gamma,
    "sir": fit_sir,
}


def fit_baseline(method: str, data: Dataset, K: int = DEFAULT_BINS, per_field: bool = False) -> Calibrator:
    """Fit baseline ``method`` globally, or once per field value when ``per_field``."""
    if method == "identity":
        return IdentityCalibrator()
    if method not in BASELINES:
        raise ValueError(f"unknown baseline {method!r}")

    def fit(d):
        if method in ("histogram", "sir"):
            return BASELINES[method](d, K)
        return BASELINES[method](d)

    fallback = fit(data)
    if not per_field:
        return fallback
    members = {}
    for value in data.field_values:
        sub = data.subset(np.flatnonzero(data.fields == value))
        try:
            members[value] = fit(sub)
        except CalibrationFitError as exc:
            LOGGER.warning("field %r falls back to the global %s fit: %s", value, method, exc)
    return PerFieldCalibrator(members, fallback)


def calibrator_from_dict(d: dict) -> Calibrator:
    if d.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported calibrator format {d.get('format')!r}")
    v = d.get("variant")
    if v == "identity":
        return IdentityCalibrator()
    if v == "histogram":
        return HistogramCalibrator(d["bounds"], d["values"])
    if v == "isotonic":
        return IsotonicCalibrator(d["thresholds"], d["values"])
    if v == "sir":
        return SIRCalibrator(d["xs"], d["ys"])
    if v == "platt":
        return PlattCalibrator(d["a"], d["b"])
    if v == "gamma":
        return GammaCalibrator(d["a"], d["b"], d["c"])
    if v == "per_field":
        return PerFieldCalibrator(
            {k: calibrator_from_dict(m) for k, m in d["members"].items()},
            calibrator_from_dict(d["fallback"]),
        )
    raise ValueError(f"unknown calibrator variant {v!r}")
