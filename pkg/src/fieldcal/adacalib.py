"""Doubly-adaptive field-level calibration (AdaCalib).

For each candidate bin count ``K_i`` and each field value ``z`` the model
holds ``K + 1`` calibrated-logit *anchors*, one per bin bound of ``z``'s
equi-frequency binning. An anchor is produced by a small MLP from the
discretised posterior statistics of its bin, so the per-bin slopes are
driven by the field's observed response rates. A score inside bin ``k`` is
mapped by linear interpolation between anchors ``k`` and ``k + 1``; a hinge
penalty on decreasing anchor pairs keeps the map monotone.

A selector MLP over the field's frequency bucket and ID embedding picks one
candidate per field value: Gumbel-softmax weights while training, a hard
argmax at inference.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields as dc_fields

import numpy as np

from ._io import atomic_write_json, read_json
from .binning import GLOBAL, FieldBinningTable, assign_bins, compute_frequency_stats, fit_field_binning
from .binning import FieldFrequencyStats
from .data import SCORE_EPS, Dataset, logit, sigmoid
from .nn import LayerSpec, ParameterStore, Tape, adam_step, gumbel_noise
from .pava import pava

LOGGER = logging.getLogger(__name__)

FORMAT_VERSION = 1

RATE_BUCKETS = 100
LOGIT_CLIP = 10.0
LOG_BUCKET_CAP = 30

__all__ = [
    "TrainConfig",
    "AdaCalibModel",
    "InsufficientDataError",
    "rate_bucket",
    "log_bucket",
    "apply_piecewise",
    "anchor_values",
    "forward",
    "loss",
    "fit",
    "calibrate",
    "save_model",
    "load_model",
    "export_unified",
    "load_unified",
    "UpstreamModel",
    "UnifiedModel",
    "ABLATION_VARIANTS",
]


class InsufficientDataError(ValueError):
    pass


@dataclass
class TrainConfig:
    """Hyperparameters and the four ablation switches.

    ``fixed_bin_count`` is the single K used when adaptive binning is off
    (default: the median candidate). ``interpolation`` chooses whether the
    position inside a bin is measured on raw scores (``"score"``) or on their
    logits (``"logit"``).

    Training runs ``max(epochs, ceil(min_steps / batches_per_epoch))`` epochs
    with an optional cosine learning-rate decay. The selector loss is held
    back for the first ``selector_warmup`` fraction of steps, so the candidate
    families have separated before the selector commits to one.
    """

    epochs: int = 30
    min_steps: int = 2000
    batch_size: int = 1024
    learning_rate: float = 3e-3
    tau: float = 1.0
    hinge_weight: float = 1.0
    selector_weight: float = 1.0
    aux_enabled: bool = True
    adaptive_binning_enabled: bool = True
    adaptive_function_enabled: bool = True
    posterior_guidance_enabled: bool = True
    seed: int = 0
    candidates: tuple = (5, 10, 20)
    fixed_bin_count: int | None = None
    min_bin_count: int = 10
    smooth_posteriors: bool = True
    posterior_include_train: bool = True
    hidden_dim: int = 32
    embed_dim: int = 8
    interpolation: str = "score"
    lr_schedule: str = "cosine"
    selector_warmup: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.candidates = tuple(int(k) for k in self.candidates)
        if not self.candidates:
            raise ValueError("at least one candidate bin count is required")
        if any(k < 1 for k in self.candidates) or any(
            b <= a for a, b in zip(self.candidates, self.candidates[1:])
        ):
            raise ValueError("candidate bin counts must be positive and strictly increasing")
        for name in ("epochs", "batch_size", "hidden_dim", "embed_dim", "min_bin_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("learning_rate", "tau"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.min_steps < 0:
            raise ValueError("min_steps must be >= 0")
        if self.hinge_weight < 0 or self.selector_weight < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.interpolation not in ("score", "logit"):
            raise ValueError("interpolation must be 'score' or 'logit'")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        if not 0.0 <= self.selector_warmup < 1.0:
            raise ValueError("selector_warmup must be in [0, 1)")
        if self.fixed_bin_count is not None and self.fixed_bin_count < 1:
            raise ValueError("fixed_bin_count must be >= 1")

    @property
    def active_candidates(self) -> tuple:
        if self.adaptive_binning_enabled:
            return self.candidates
        if self.fixed_bin_count is not None:
            return (self.fixed_bin_count,)
        return (sorted(self.candidates)[len(self.candidates) // 2],)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["candidates"] = list(self.candidates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dc_fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


# ablation rows, fullest first: (name, posterior guidance, adaptive function, adaptive binning, aux)
ABLATION_VARIANTS = (
    ("full", True, True, True, True),
    ("-aux", True, True, True, False),
    ("-aux-binning", True, True, False, False),
    ("-aux-binning-function", True, False, False, False),
    ("-all", False, False, False, False),
)


def rate_bucket(rate) -> np.ndarray:
    """100 equal-width buckets of ``logit(rate)`` clipped to [-10, 10]."""
    r = np.asarray(rate, dtype=np.float64)
    with np.errstate(divide="ignore"):
        z = np.clip(np.log(r) - np.log1p(-r), -LOGIT_CLIP, LOGIT_CLIP)
    b = np.floor((z + LOGIT_CLIP) / (2 * LOGIT_CLIP) * RATE_BUCKETS).astype(np.int64)
    return np.clip(b, 0, RATE_BUCKETS - 1)


def log_bucket(value) -> np.ndarray:
    """``floor(log2(1 + v))`` capped at 30."""
    v = np.asarray(value, dtype=np.float64)
    return np.minimum(np.floor(np.log2(1.0 + v)), LOG_BUCKET_CAP).astype(np.int64)


def _position(scores, lo, hi, space):
    """Fraction of the way from ``lo`` to ``hi``, clamped to [0, 1]; 0 for zero-width bins."""
    if space == "logit":
        scores, lo, hi = (logit(np.clip(x, SCORE_EPS, 1 - SCORE_EPS)) for x in (scores, lo, hi))
    width = hi - lo
    safe = np.where(width > 0, width, 1.0)
    t = np.where(width > 0, (scores - lo) / safe, 0.0)
    return np.clip(t, 0.0, 1.0)


def apply_piecewise(score: float, bounds, anchors, space: str = "score") -> float:
    """Calibrated logit of ``score`` under the continuous piecewise-linear map.

    Inside bin ``k`` the result is ``anchors[k] + (anchors[k+1] - anchors[k]) * t``
    with ``t`` the relative position of the score between ``bounds[k]`` and
    ``bounds[k+1]``. Outside the bounds the map is flat at the end anchors.
    """
    b = bounds.bounds if hasattr(bounds, "bounds") else np.asarray(bounds, dtype=np.float64)
    a = np.asarray(anchors, dtype=np.float64)
    if a.size != b.size:
        raise ValueError("need one anchor per bound")
    k = int(assign_bins(np.array([score]), b)[0])
    t = float(_position(np.array([score]), b[k - 1], b[k], space)[0])
    return float(a[k - 1] + (a[k] - a[k - 1]) * t)


@dataclass
class _Layout:
    """Flat anchor indexing for one candidate's binning table."""

    K: int
    table: FieldBinningTable
    smooth: bool = False
    keys: list = field(default_factory=list)
    offsets: np.ndarray = None
    rate_ids: np.ndarray = None
    pos_ids: np.ndarray = None
    count_ids: np.ndarray = None
    edge: np.ndarray = None
    pair_left: np.ndarray = None
    pair_entry: np.ndarray = None

    def __post_init__(self):
        self.keys = self.table.keys()
        self.key_index = {k: j for j, k in enumerate(self.keys)}
        sizes = [self.table.entries[k].k + 1 for k in self.keys]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        rate, pos, cnt, edge, pl, pe = [], [], [], [], [], []
        for j, key in enumerate(self.keys):
            e = self.table.entries[key]
            src = np.minimum(np.arange(e.k + 1), e.k - 1)
            # smoothing only changes what the anchor MLP sees; the table keeps raw rates
            r = pava(e.avg_rate, e.count) if self.smooth else e.avg_rate
            rate.append(rate_bucket(r[src]))
            pos.append(log_bucket(e.positive_sum[src]))
            cnt.append(log_bucket(e.count[src]))
            flag = np.zeros(e.k + 1)
            flag[-1] = 1.0
            edge.append(flag)
            pl.append(self.offsets[j] + np.arange(e.k))
            pe.append(np.full(e.k, j))
        self.rate_ids = np.concatenate(rate)
        self.pos_ids = np.concatenate(pos)
        self.count_ids = np.concatenate(cnt)
        self.edge = np.concatenate(edge)
        self.pair_left = np.concatenate(pl).astype(np.int64)
        self.pair_entry = np.concatenate(pe).astype(np.int64)

    @property
    def num_anchors(self) -> int:
        return int(self.offsets[-1])

    @property
    def identity_anchors(self) -> np.ndarray:
        """Anchors that reproduce the uncalibrated logit at every bin bound."""
        b = np.concatenate([self.table.entries[k].bounds.bounds for k in self.keys])
        return logit(np.clip(b, SCORE_EPS, 1 - SCORE_EPS))

    def entry_of(self, fields) -> np.ndarray:
        return np.array([self.key_index.get(f, self.key_index[GLOBAL]) for f in fields], dtype=np.int64)

    def locate(self, scores, fields, space):
        """Per-sample (left anchor index, position in bin, entry index)."""
        entry = self.entry_of(fields)
        left = np.empty(len(scores), dtype=np.int64)
        t = np.empty(len(scores))
        for j in np.unique(entry):
            mask = entry == j
            b = self.table.entries[self.keys[j]].bounds.bounds
            k = assign_bins(scores[mask], b)
            left[mask] = self.offsets[j] + k - 1
            t[mask] = _position(scores[mask], b[k - 1], b[k], space)
        return left, t, entry


@dataclass
class _Batch:
    labels: np.ndarray
    field_ids: np.ndarray
    score_ids: np.ndarray
    features: np.ndarray
    left: list
    t: list
    entry: list


class AdaCalibModel:
    """Field-level calibrator with ``n`` candidate bin counts.

    Typical use::

        model = AdaCalibModel(TrainConfig(seed=3)).fit(train, posterior_pool)
        probs = model.calibrate_batch(test.scores, test.fields, test.features)
    """

    def __init__(self, config: TrainConfig | None = None):
        self.config = config or TrainConfig()
        self.store: ParameterStore | None = None
        self.layouts: list[_Layout] = []
        self.vocab: list[str] = []
        self.freq_stats: FieldFrequencyStats | None = None
        self.feature_dim = 0
        self.base_rate = 0.5
        self.history: list[dict] = []
        self._cache: dict = {}

    # -- structure ---------------------------------------------------------
    @property
    def candidate_ks(self) -> list[int]:
        return [lay.K for lay in self.layouts]

    @property
    def tables(self) -> list[FieldBinningTable]:
        return [lay.table for lay in self.layouts]

    @property
    def n_candidates(self) -> int:
        return len(self.layouts)

    def field_id(self, value: str) -> int:
        return self._vocab_index.get(value, len(self.vocab))

    def prepare(self, train_data: Dataset, posterior_data: Dataset | None = None) -> "AdaCalibModel":
        """Fit binning tables and frequency stats, then initialise parameters."""
        cfg = self.config
        if len(train_data) == 0:
            raise ValueError("training data is empty")
        if posterior_data is None:
            pool = train_data
        elif cfg.posterior_include_train:
            pool = Dataset.concat(posterior_data, train_data)
        else:
            pool = posterior_data
        if len(pool) == 0:
            raise ValueError("posterior data is empty")
        if pool.feature_dim != train_data.feature_dim:
            raise ValueError("train and posterior data disagree on feature_dim")
        global_only = not cfg.adaptive_function_enabled
        tables = [
            fit_field_binning(pool, K, cfg.min_bin_count, global_only=global_only)
            for K in cfg.active_candidates
        ]
        if not global_only and all(not t.field_values for t in tables):
            raise InsufficientDataError(
                "insufficient data for all candidates: no field value has "
                f"min_bin_count={cfg.min_bin_count} samples per bin"
            )
        self.layouts = [_Layout(K, t, cfg.smooth_posteriors) for K, t in zip(cfg.active_candidates, tables)]
        self.freq_stats = compute_frequency_stats(pool)
        self.vocab = sorted(set(train_data.field_values) | set(pool.field_values))
        self.feature_dim = train_data.feature_dim
        self.base_rate = float(np.clip(pool.labels.mean(), 1e-4, 1 - 1e-4))
        self._init_params()
        return self

    def _init_params(self):
        cfg = self.config
        store = ParameterStore(cfg.seed)
        e, h = cfg.embed_dim, cfg.hidden_dim
        base_logit = logit(self.base_rate)
        if cfg.posterior_guidance_enabled:
            store.add_embedding("stat/rate", RATE_BUCKETS, e)
            store.add_embedding("stat/pos", LOG_BUCKET_CAP + 1, e)
            store.add_embedding("stat/count", LOG_BUCKET_CAP + 1, e)
        for i, lay in enumerate(self.layouts):
            if cfg.posterior_guidance_enabled:
                store.add_dense(f"cand{i}/anchor_hidden", LayerSpec(3 * e + 1, h, "relu"))
                store.add_dense(f"cand{i}/anchor_out", LayerSpec(h, 1, "identity"))
                store.params[f"cand{i}/anchor_out/b"][:] = base_logit
            else:
                # free anchors start from the uncalibrated map
                store.add(f"cand{i}/free_anchors", lay.identity_anchors)
        if cfg.aux_enabled or self.n_candidates > 1:
            store.add_embedding("field_id", len(self.vocab), e)
        if cfg.aux_enabled:
            store.add_embedding("aux/score", RATE_BUCKETS, e)
            store.add_dense("aux/hidden", LayerSpec(2 * e + self.feature_dim, h, "relu"))
            store.add_dense("aux/out", LayerSpec(h, 1, "identity"))
        if self.n_candidates > 1:
            store.add_embedding("selector/count", LOG_BUCKET_CAP + 1, e)
            store.add_dense("selector/hidden", LayerSpec(2 * e, h, "relu"))
            store.add_dense("selector/out", LayerSpec(h, self.n_candidates, "identity"))
        self.store = store
        self._cache = {}

    @property
    def _vocab_index(self) -> dict:
        idx = self._cache.get("vocab_index")
        if idx is None:
            idx = self._cache["vocab_index"] = {v: j for j, v in enumerate(self.vocab)}
        return idx

    # -- graph pieces --------------------------------------------------------
    def _anchors(self, tape: Tape, i: int):
        lay = self.layouts[i]
        if not self.config.posterior_guidance_enabled:
            return tape.param(f"cand{i}/free_anchors")
        x = tape.concat(
            [
                tape.embedding("stat/rate", lay.rate_ids),
                tape.embedding("stat/pos", lay.pos_ids),
                tape.embedding("stat/count", lay.count_ids),
                tape.constant(lay.edge[:, None]),
            ],
            axis=1,
        )
        hidden = tape.dense(f"cand{i}/anchor_hidden", x)
        return tape.reshape(tape.dense(f"cand{i}/anchor_out", hidden), (-1,))

    def _aux(self, tape: Tape, batch: _Batch):
        parts = [tape.embedding("field_id", batch.field_ids), tape.embedding("aux/score", batch.score_ids)]
        if self.feature_dim:
            parts.append(tape.constant(batch.features))
        hidden = tape.dense("aux/hidden", tape.concat(parts, axis=1))
        return tape.reshape(tape.dense("aux/out", hidden), (-1,))

    def _selector_logits(self, tape: Tape, field_ids: np.ndarray):
        counts = np.array(
            [self.freq_stats.total(self.vocab[f]) if f < len(self.vocab) else 0 for f in field_ids]
        )
        x = tape.concat(
            [tape.embedding("selector/count", log_bucket(counts)), tape.embedding("field_id", field_ids)], axis=1
        )
        return tape.dense("selector/out", tape.dense("selector/hidden", x))

    def _make_batch(self, scores, labels, fields, features) -> _Batch:
        fields = np.asarray(fields, dtype=object)
        scores = np.clip(np.asarray(scores, dtype=np.float64), SCORE_EPS, 1 - SCORE_EPS)
        left, ts, entries = [], [], []
        for lay in self.layouts:
            l, t, e = lay.locate(scores, fields, self.config.interpolation)
            left.append(l)
            ts.append(t)
            entries.append(e)
        n = scores.size
        feats = np.zeros((n, 0)) if features is None else np.asarray(features, dtype=np.float64).reshape(n, -1)
        if feats.shape[1] != self.feature_dim:
            raise ValueError(f"expected {self.feature_dim} features, got {feats.shape[1]}")
        return _Batch(
            labels=np.zeros(n) if labels is None else np.asarray(labels, dtype=np.float64),
            field_ids=np.array([self.field_id(f) for f in fields], dtype=np.int64),
            score_ids=rate_bucket(scores),
            features=feats,
            left=left,
            t=ts,
            entry=entries,
        )

    def batch_from(self, data: Dataset, idx=None) -> _Batch:
        if idx is None:
            idx = np.arange(len(data))
        return self._make_batch(data.scores[idx], data.labels[idx], data.fields[idx], data.features[idx])

    def _graph(self, tape: Tape, batch: _Batch, noise=None, train=True):
        """Build the forward graph. Returns a dict of nodes."""
        cfg = self.config
        aux = self._aux(tape, batch) if cfg.aux_enabled else None
        out = {"anchors": [], "logits": [], "probs": []}
        for i in range(self.n_candidates):
            A = self._anchors(tape, i)
            left = tape.take(A, batch.left[i])
            right = tape.take(A, batch.left[i] + 1)
            z = tape.add(left, tape.mul(tape.sub(right, left), tape.constant(batch.t[i])))
            if aux is not None:
                z = tape.add(z, aux)
            out["anchors"].append(A)
            out["logits"].append(z)
        n = self.n_candidates
        if n > 1:
            sel = self._selector_logits(tape, np.unique(batch.field_ids))
            inverse = np.searchsorted(np.unique(batch.field_ids), batch.field_ids)
            sel = tape.take(sel, inverse)
            out["selector_logits"] = sel
            if train:
                if noise is None:
                    noise = gumbel_noise(self.store.rng, (batch.labels.size, n))
                out["alpha"] = tape.gumbel_softmax(sel, cfg.tau, noise)
        return out

    def loss_graph(self, batch: _Batch, noise=None, detach_mixture: bool = True, selector_weight=None):
        """Record the training objective for ``batch``.

        Objective = sum over candidates of (mean cross-entropy + hinge_weight *
        hinge penalty) + selector_weight * cross-entropy of the Gumbel-weighted
        mixture. With ``detach_mixture`` the mixture term only trains the
        selector (and the shared field embedding through it).

        Returns ``(tape, total_node, parts)`` where ``parts`` holds floats.
        """
        cfg = self.config
        tape = Tape(self.store)
        g = self._graph(tape, batch, noise=noise, train=True)
        y = batch.labels
        # distinct field values in the batch weight the hinge penalty of their entry
        uniq = np.unique(batch.field_ids)
        parts = {"ce": [], "hinge": []}
        terms = []
        for i, lay in enumerate(self.layouts):
            ce = tape.mean(tape.bce_with_logits(g["logits"][i], y))
            A = g["anchors"][i]
            diffs = tape.relu(tape.sub(tape.take(A, lay.pair_left), tape.take(A, lay.pair_left + 1)))
            # GLOBAL always takes part: it serves unseen field values at inference
            ent_of_field = lay.entry_of([self.vocab[f] if f < len(self.vocab) else GLOBAL for f in uniq] + [GLOBAL])
            w_entry = np.bincount(ent_of_field, minlength=len(lay.keys)) / ent_of_field.size
            hinge = tape.sum(tape.mul(diffs, tape.constant(w_entry[lay.pair_entry])))
            terms.append(tape.add(ce, tape.scale(hinge, cfg.hinge_weight)))
            parts["ce"].append(float(ce.value))
            parts["hinge"].append(float(hinge.value))
        total = terms[0]
        for t_ in terms[1:]:
            total = tape.add(total, t_)
        parts["objective"] = float(total.value)
        parts["mixture"] = 0.0
        if "alpha" in g:
            probs = [tape.reshape(tape.sigmoid(z), (-1, 1)) for z in g["logits"]]
            if detach_mixture:
                probs = [tape.detach(p) for p in probs]
            P = tape.concat(probs, axis=1)
            mix = tape.sum(tape.mul(g["alpha"], P), axis=1)
            mix_ce = tape.mean(tape.bce(mix, y))
            parts["mixture"] = float(mix_ce.value)
            w = cfg.selector_weight if selector_weight is None else selector_weight
            if w > 0:
                total = tape.add(total, tape.scale(mix_ce, w))
        parts["total"] = parts["objective"] + parts["mixture"] * (cfg.selector_weight if selector_weight is None else selector_weight)
        return tape, total, parts

    # -- training ----------------------------------------------------------------
    def fit(self, train_data: Dataset, posterior_data: Dataset | None = None) -> "AdaCalibModel":
        """Mini-batch Adam on the training objective. Binning is fitted once, up front."""
        cfg = self.config
        self.prepare(train_data, posterior_data)
        full = self.batch_from(train_data)
        n = len(train_data)
        rng = self.store.rng
        self.history = []
        steps_per_epoch = -(-n // cfg.batch_size)
        # small datasets get extra epochs so the optimiser still takes min_steps steps
        epochs = max(cfg.epochs, -(-cfg.min_steps // steps_per_epoch))
        total_steps = steps_per_epoch * epochs
        step = 0
        for epoch in range(epochs):
            order = rng.permutation(n)
            sums = {"total": 0.0, "objective": 0.0, "mixture": 0.0}
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                batch = _Batch(
                    full.labels[idx],
                    full.field_ids[idx],
                    full.score_ids[idx],
                    full.features[idx],
                    [l[idx] for l in full.left],
                    [t[idx] for t in full.t],
                    [e[idx] for e in full.entry],
                )
                self.store.zero_grad()
                # the selector only learns once the candidates have had time to separate
                warm = step < cfg.selector_warmup * total_steps
                tape, total, parts = self.loss_graph(batch, selector_weight=0.0 if warm else None)
                tape.backward(total)
                lr = cfg.learning_rate
                if cfg.lr_schedule == "cosine":
                    lr *= 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
                step += 1
                adam_step(self.store, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
                for k in sums:
                    sums[k] += parts[k] * idx.size
            record = {"epoch": epoch + 1, **{k: v / n for k, v in sums.items()}}
            self.history.append(record)
            LOGGER.info("epoch %d: loss %.6f", epoch + 1, record["total"])
        self.store.zero_grad()
        self._cache = {}
        return self

    # -- inference -----------------------------------------------------------
    def anchor_table(self, i: int) -> np.ndarray:
        key = ("anchors", i)
        if key not in self._cache:
            self._cache[key] = self._anchors(Tape(self.store), i).value.copy()
        return self._cache[key]

    def anchors_for(self, i: int, value: str) -> np.ndarray:
        lay = self.layouts[i]
        j = lay.key_index[lay.table.entry_key(value)]
        return self.anchor_table(i)[lay.offsets[j]:lay.offsets[j + 1]].copy()

    def selector_logits(self, values) -> np.ndarray:
        ids = np.array([self.field_id(v) for v in values], dtype=np.int64)
        if self.n_candidates == 1:
            return np.zeros((ids.size, 1))
        return self._selector_logits(Tape(self.store), ids).value.copy()

    def selected_candidate(self, value: str) -> int:
        key = ("selected", value)
        if key not in self._cache:
            self._cache[key] = int(np.argmax(self.selector_logits([value])[0]))
        return self._cache[key]

    def selected_k(self, value: str) -> int:
        return self.layouts[self.selected_candidate(value)].K

    def candidate_logits(self, scores, fields, features=None) -> np.ndarray:
        """``(n_samples, n_candidates)`` calibrated logits (aux term included)."""
        batch = self._make_batch(scores, None, fields, features)
        tape = Tape(self.store)
        out = np.empty((batch.labels.size, self.n_candidates))
        for i in range(self.n_candidates):
            A = self.anchor_table(i)
            a_l, a_r = A[batch.left[i]], A[batch.left[i] + 1]
            out[:, i] = a_l + (a_r - a_l) * batch.t[i]
        if self.config.aux_enabled:
            out += self._aux(tape, batch).value[:, None]
        return out

    def forward_batch(self, scores, fields, features=None, train: bool = False, noise=None) -> dict:
        """Per-candidate probabilities, mixture weights and the mixed probability."""
        logits = self.candidate_logits(scores, fields, features)
        probs = sigmoid(logits)
        fields = np.asarray(fields, dtype=object)
        if self.n_candidates == 1:
            alpha = np.ones_like(probs)
        elif train:
            sel = self.selector_logits(fields)
            if noise is None:
                noise = gumbel_noise(self.store.rng, sel.shape)
            tape = Tape()
            alpha = tape.gumbel_softmax(tape.constant(sel), self.config.tau, noise).value
        else:
            chosen = np.array([self.selected_candidate(f) for f in fields], dtype=np.int64)
            alpha = np.zeros_like(probs)
            alpha[np.arange(chosen.size), chosen] = 1.0
        return {"candidate_probs": probs, "alpha": alpha, "prob": (alpha * probs).sum(axis=1), "logits": logits}

    def calibrate_batch(self, scores, fields, features=None) -> np.ndarray:
        """Inference-mode calibrated probabilities (hard candidate selection)."""
        logits = self.candidate_logits(scores, fields, features)
        fields = np.asarray(fields, dtype=object)
        chosen = np.array([self.selected_candidate(f) for f in fields], dtype=np.int64)
        return sigmoid(logits[np.arange(chosen.size), chosen])

    def calibrate_dataset(self, data: Dataset, chunk: int = 65536) -> np.ndarray:
        out = np.empty(len(data))
        for s in range(0, len(data), chunk):
            sl = slice(s, s + chunk)
            out[sl] = self.calibrate_batch(data.scores[sl], data.fields[sl], data.features[sl])
        return out

    def hinge_violations(self) -> dict:
        """Max decrease between consecutive anchors, per (entry key, candidate index)."""
        out = {}
        for i, lay in enumerate(self.layouts):
            A = self.anchor_table(i)
            for j, key in enumerate(lay.keys):
                a = A[lay.offsets[j]:lay.offsets[j + 1]]
                out[(key, i)] = float(np.max(np.maximum(a[:-1] - a[1:], 0.0), initial=0.0))
        return out

    # -- serialization ---------------------------------------------------------
    def to_dict(self) -> dict:
        if self.store is None:
            raise ValueError("model has not been prepared or fitted")
        return {
            "format": FORMAT_VERSION,
            "kind": "adacalib",
            "config": self.config.to_dict(),
            "candidates": [{"K": lay.K, "binning": lay.table.to_dict()} for lay in self.layouts],
            "freq_stats": self.freq_stats.to_dict(),
            "vocab": list(self.vocab),
            "feature_dim": self.feature_dim,
            "base_rate": self.base_rate,
            "store": self.store.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdaCalibModel":
        if d.get("format") != FORMAT_VERSION or d.get("kind") != "adacalib":
            raise ValueError("not an AdaCalib checkpoint (format/kind mismatch)")
        cfg = TrainConfig.from_dict(d["config"])
        model = cls(cfg)
        model.layouts = [
            _Layout(c["K"], FieldBinningTable.from_dict(c["binning"], c["K"], cfg.min_bin_count), cfg.smooth_posteriors)
            for c in d["candidates"]
        ]
        model.freq_stats = FieldFrequencyStats.from_dict(d["freq_stats"])
        model.vocab = list(d["vocab"])
        model.feature_dim = int(d["feature_dim"])
        model.base_rate = float(d["base_rate"])
        model.store = ParameterStore.from_dict(d["store"])
        return model


# ---------------------------------------------------------------------------
# functional surface


def anchor_values(model: AdaCalibModel, i: int, value: str) -> list[float]:
    return model.anchors_for(i, value).tolist()


def forward(model: AdaCalibModel, sample, train: bool = False, noise=None) -> dict:
    out = model.forward_batch([sample.score], [sample.field_value], _features_of(sample), train=train, noise=noise)
    return {
        "candidate_probs": out["candidate_probs"][0],
        "alpha": out["alpha"][0],
        "prob": float(out["prob"][0]),
    }


def loss(model: AdaCalibModel, batch: Dataset, noise=None) -> float:
    return model.loss_graph(model.batch_from(batch), noise=noise)[2]["total"]


def fit(model: AdaCalibModel, train_data: Dataset, posterior_data: Dataset | None = None) -> AdaCalibModel:
    return model.fit(train_data, posterior_data)


def _features_of(sample):
    return np.asarray([sample.features], dtype=np.float64) if sample.features else None


def calibrate(model: AdaCalibModel, sample) -> float:
    return float(model.calibrate_batch([sample.score], [sample.field_value], _features_of(sample))[0])


def save_model(model: AdaCalibModel, path) -> None:
    atomic_write_json(path, model.to_dict())


def load_model(path) -> AdaCalibModel:
    return AdaCalibModel.from_dict(read_json(path))


# ---------------------------------------------------------------------------
# unified checkpoint: upstream scorer + calibrator in one file


class UpstreamModel:
    """Stand-in for the un-calibrated predictor inside a unified checkpoint.

    ``identity`` passes the logged score through; ``logistic`` scores
    ``sigmoid(features @ upstream/weight + upstream/bias)``.
    """

    def __init__(self, kind: str = "identity", parameters: dict | None = None):
        if kind not in ("identity", "logistic"):
            raise ValueError(f"unknown upstream model kind {kind!r}")
        self.kind = kind
        self.parameters = {k: np.asarray(v, dtype=np.float64) for k, v in (parameters or {}).items()}
        if kind == "logistic" and not {"upstream/weight", "upstream/bias"} <= set(self.parameters):
            raise ValueError("logistic upstream model needs upstream/weight and upstream/bias")

    def predict(self, scores=None, features=None) -> np.ndarray:
        if self.kind == "identity":
            if scores is None:
                raise ValueError("identity upstream model needs logged scores")
            return np.asarray(scores, dtype=np.float64)
        x = np.asarray(features, dtype=np.float64)
        z = x @ self.parameters["upstream/weight"].reshape(-1) + float(self.parameters["upstream/bias"].reshape(-1)[0])
        return sigmoid(z)

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_VERSION,
            "kind": "upstream",
            "model": self.kind,
            "parameters": {
                k: {"shape": list(v.shape), "values": v.reshape(-1).tolist()} for k, v in sorted(self.parameters.items())
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UpstreamModel":
        if d.get("format") != FORMAT_VERSION or d.get("kind") != "upstream":
            raise ValueError("not an upstream checkpoint (format/kind mismatch)")
        params = {
            k: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in d.get("parameters", {}).items()
        }
        return cls(d.get("model", "identity"), params)


class UnifiedModel:
    def __init__(self, upstream: UpstreamModel, calibrator: AdaCalibModel):
        self.upstream = upstream
        self.calibrator = calibrator

    def predict(self, fields, scores=None, features=None) -> np.ndarray:
        """Upstream score, then field-level calibration."""
        s = self.upstream.predict(scores, features)
        return self.calibrator.calibrate_batch(s, fields, features if self.calibrator.feature_dim else None)


def export_unified(model: AdaCalibModel, upstream_checkpoint, out_path) -> None:
    """Merge an upstream checkpoint and a fitted model into one file."""
    upstream = UpstreamModel.from_dict(read_json(upstream_checkpoint))
    collisions = sorted(set(upstream.parameters) & set(model.store.params))
    if collisions:
        raise ValueError(f"parameter name collisions between checkpoints: {collisions}")
    doc = model.to_dict()
    doc["upstream"] = upstream.to_dict()
    atomic_write_json(out_path, doc)


def load_unified(path) -> UnifiedModel:
    d = read_json(path)
    if "upstream" not in d:
        raise ValueError(f"{path}: no upstream section; not a unified checkpoint")
    up = UpstreamModel.from_dict(d.pop("upstream"))
    return UnifiedModel(up, AdaCalibModel.from_dict(d))
