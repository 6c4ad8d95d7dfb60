"""Minimal reverse-mode autodiff on numpy arrays.

Only the handful of ops AdaCalib needs are provided: dense layers, embedding
lookups, gathers, elementwise arithmetic, relu/sigmoid, (log-)softmax and
binary cross-entropy. Everything runs in float64 and is deterministic.

A :class:`Tape` records each op as it is evaluated; :meth:`Tape.backward`
walks the record in reverse and accumulates gradients into the owning
:class:`ParameterStore`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

FORMAT_VERSION = 1
CE_EPS = 1e-6

__all__ = [
    "LayerSpec",
    "ParameterStore",
    "Node",
    "Tape",
    "dense_forward",
    "embedding_lookup",
    "backward",
    "gumbel_noise",
    "gumbel_softmax",
    "adam_step",
    "numerical_gradient",
    "relative_error",
]


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("layer dims must be >= 1")
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")


class ParameterStore:
    """Named float64 parameter arrays, gradient buffers, Adam moments and an RNG."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.layers: dict[str, LayerSpec] = {}
        self.embeddings: dict[str, int] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def add_dense(self, name: str, spec: LayerSpec) -> None:
        """Glorot-uniform weights of shape ``(output_dim, input_dim)``, zero bias."""
        s = math.sqrt(6.0 / (spec.input_dim + spec.output_dim))
        self.layers[name] = spec
        self.add(f"{name}/W", self.rng.uniform(-s, s, size=(spec.output_dim, spec.input_dim)))
        self.add(f"{name}/b", np.zeros(spec.output_dim))

    def add_embedding(self, name: str, num_ids: int, dim: int, scale: float = 0.01) -> None:
        """Table with ``num_ids`` regular rows plus one trailing OOV row."""
        self.embeddings[name] = int(num_ids)
        self.add(name, self.rng.uniform(-scale, scale, size=(num_ids + 1, dim)))

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def names(self) -> list[str]:
        return list(self.params)

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_VERSION,
            "seed": self.seed,
            "step_count": self.step_count,
            "layers": {
                k: {"input_dim": v.input_dim, "output_dim": v.output_dim, "activation": v.activation}
                for k, v in self.layers.items()
            },
            "embeddings": dict(self.embeddings),
            "parameters": {
                k: {"shape": list(v.shape), "values": v.reshape(-1).tolist()} for k, v in self.params.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParameterStore":
        if d.get("format") != FORMAT_VERSION:
            raise ValueError(f"unsupported parameter store format {d.get('format')!r}")
        store = cls(d.get("seed", 0))
        store.step_count = int(d.get("step_count", 0))
        store.layers = {k: LayerSpec(**v) for k, v in d.get("layers", {}).items()}
        store.embeddings = {k: int(v) for k, v in d.get("embeddings", {}).items()}
        for k, v in d["parameters"].items():
            store.add(k, np.asarray(v["values"], dtype=np.float64).reshape(v["shape"]))
        return store


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "param_name")

    def __init__(self, value, parents=(), backward_fn=None, param_name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.param_name = param_name

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Node(shape={self.shape})"


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _accumulate(node: Node, g):
    node.grad = g if node.grad is None else node.grad + g


class Tape:
    """Records a forward computation for one reverse pass."""

    def __init__(self, store: ParameterStore | None = None):
        self.store = store
        self.nodes: list[Node] = []
        self._params: dict[str, Node] = {}

    # -- leaves -----------------------------------------------------------
    def constant(self, value) -> Node:
        return Node(np.asarray(value, dtype=np.float64))

    def param(self, name: str) -> Node:
        if name not in self._params:
            node = Node(self.store.params[name], param_name=name)
            self.nodes.append(node)
            self._params[name] = node
        return self._params[name]

    def _op(self, value, parents, backward_fn) -> Node:
        node = Node(value, parents, backward_fn)
        self.nodes.append(node)
        return node

    # -- elementwise ------------------------------------------------------
    def add(self, a: Node, b: Node) -> Node:
        def bw(g):
            _accumulate(a, _unbroadcast(g, a.shape))
            _accumulate(b, _unbroadcast(g, b.shape))

        return self._op(a.value + b.value, (a, b), bw)

    def sub(self, a: Node, b: Node) -> Node:
        def bw(g):
            _accumulate(a, _unbroadcast(g, a.shape))
            _accumulate(b, _unbroadcast(-g, b.shape))

        return self._op(a.value - b.value, (a, b), bw)

    def mul(self, a: Node, b: Node) -> Node:
        def bw(g):
            _accumulate(a, _unbroadcast(g * b.value, a.shape))
            _accumulate(b, _unbroadcast(g * a.value, b.shape))

        return self._op(a.value * b.value, (a, b), bw)

    def scale(self, a: Node, c: float) -> Node:
        return self._op(a.value * c, (a,), lambda g: _accumulate(a, g * c))

    def relu(self, a: Node) -> Node:
        mask = a.value > 0
        return self._op(np.where(mask, a.value, 0.0), (a,), lambda g: _accumulate(a, g * mask))

    def sigmoid(self, a: Node) -> Node:
        out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
        return self._op(out, (a,), lambda g: _accumulate(a, g * out * (1.0 - out)))

    def detach(self, a: Node) -> Node:
        return Node(a.value)

    # -- shape / indexing -------------------------------------------------
    def matmul(self, a: Node, b: Node) -> Node:
        def bw(g):
            _accumulate(a, g @ b.value.T)
            _accumulate(b, a.value.T @ g)

        return self._op(a.value @ b.value, (a, b), bw)

    def take(self, a: Node, idx) -> Node:
        """Rows ``a[idx]`` (first axis); repeated indices accumulate gradient."""
        idx = np.asarray(idx, dtype=np.int64)

        def bw(g):
            full = np.zeros_like(a.value)
            np.add.at(full, idx, g)
            _accumulate(a, full)

        return self._op(a.value[idx], (a,), bw)

    def concat(self, parts: Sequence[Node], axis: int = -1) -> Node:
        sizes = [p.value.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]

        def bw(g):
            for p, gp in zip(parts, np.split(g, splits, axis=axis)):
                _accumulate(p, gp)

        return self._op(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), bw)

    def reshape(self, a: Node, shape) -> Node:
        return self._op(a.value.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(a.shape)))

    def sum(self, a: Node, axis=None) -> Node:
        def bw(g):
            if axis is None:
                _accumulate(a, np.broadcast_to(g, a.shape).copy())
            else:
                _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

        return self._op(np.asarray(a.value.sum(axis=axis)), (a,), bw)

    def mean(self, a: Node) -> Node:
        return self.scale(self.sum(a), 1.0 / a.value.size)

    # -- softmax family ---------------------------------------------------
    def log_softmax(self, a: Node) -> Node:
        shifted = a.value - a.value.max(axis=-1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        sm = np.exp(out)

        def bw(g):
            _accumulate(a, g - sm * g.sum(axis=-1, keepdims=True))

        return self._op(out, (a,), bw)

    def softmax(self, a: Node) -> Node:
        shifted = a.value - a.value.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=-1, keepdims=True)

        def bw(g):
            _accumulate(a, out * (g - (g * out).sum(axis=-1, keepdims=True)))

        return self._op(out, (a,), bw)

    # -- losses -----------------------------------------------------------
    def bce_with_logits(self, logits: Node, labels) -> Node:
        """Per-element ``softplus(l) - y * l``."""
        y = np.asarray(labels, dtype=np.float64)
        l = logits.value
        out = np.logaddexp(0.0, l) - y * l
        p = 0.5 * (1.0 + np.tanh(0.5 * l))
        return self._op(out, (logits,), lambda g: _accumulate(logits, g * (p - y)))

    def bce(self, probs: Node, labels) -> Node:
        """Per-element cross-entropy on probabilities clipped into ``[1e-6, 1 - 1e-6]``."""
        y = np.asarray(labels, dtype=np.float64)
        raw = probs.value
        p = np.clip(raw, CE_EPS, 1 - CE_EPS)
        inside = (raw > CE_EPS) & (raw < 1 - CE_EPS)
        out = -(y * np.log(p) + (1 - y) * np.log1p(-p))
        return self._op(out, (probs,), lambda g: _accumulate(probs, g * inside * (p - y) / (p * (1 - p))))

    # -- layers -----------------------------------------------------------
    def dense(self, name: str, x: Node) -> Node:
        spec = self.store.layers[name]
        if x.value.shape[-1] != spec.input_dim:
            raise ValueError(f"layer {name!r} expects input dim {spec.input_dim}, got {x.value.shape[-1]}")
        W = self.param(f"{name}/W")
        b = self.param(f"{name}/b")
        out = self.add(self.matmul(x, self._transpose(W)), b)
        return self.relu(out) if spec.activation == "relu" else out

    def _transpose(self, a: Node) -> Node:
        return self._op(a.value.T, (a,), lambda g: _accumulate(a, g.T))

    def embedding(self, name: str, ids) -> Node:
        """Rows of table ``name``; ids at or beyond the table size hit the OOV row."""
        num_ids = self.store.embeddings[name]
        ids = np.minimum(np.asarray(ids, dtype=np.int64), num_ids)
        if np.any(ids < 0):
            raise ValueError("embedding ids must be nonnegative")
        return self.take(self.param(name), ids)

    def gumbel_softmax(self, logits: Node, tau: float, noise) -> Node:
        """``softmax((log_softmax(logits) + noise) / tau)`` along the last axis."""
        shifted = self.add(self.log_softmax(logits), self.constant(noise))
        return self.softmax(self.scale(shifted, 1.0 / tau))

    # -- reverse pass -----------------------------------------------------
    def backward(self, loss: Node) -> None:
        if not self.nodes or loss not in self.nodes:
            raise RuntimeError("backward() needs a loss recorded by a forward pass on this tape")
        if np.size(loss.value) != 1:
            raise ValueError("backward() needs a scalar loss")
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is None:
                continue
            if node.backward_fn is not None:
                node.backward_fn(node.grad)
            elif node.param_name is not None:
                self.store.grads[node.param_name] += node.grad


# ---------------------------------------------------------------------------
# functional helpers


def backward(store: ParameterStore, tape: Tape, loss: Node) -> None:
    if tape.store is not store:
        raise ValueError("tape was recorded against a different parameter store")
    tape.backward(loss)


def dense_forward(store: ParameterStore, layer_name: str, x) -> np.ndarray:
    tape = Tape(store)
    x = np.asarray(x, dtype=np.float64)
    out = tape.dense(layer_name, tape.constant(np.atleast_2d(x)))
    return out.value[0] if x.ndim == 1 else out.value


def embedding_lookup(store: ParameterStore, table_name: str, id: int) -> np.ndarray:
    num_ids = store.embeddings[table_name]
    return store.params[table_name][min(int(id), num_ids)].copy()


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    """``g = -log(-log u)`` with ``u ~ U(0, 1)``."""
    u = rng.random(shape)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).eps)
    return -np.log(-np.log(u))


def gumbel_softmax(logits, tau: float, rng: np.random.Generator | None = None, noise=None) -> np.ndarray:
    """Relaxed one-hot sample over the last axis of ``logits``.

    The logits are first normalised with a log-softmax, so they are treated
    as the log-probabilities of the categorical being relaxed.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    logits = np.asarray(logits, dtype=np.float64)
    if noise is None:
        if rng is None:
            raise ValueError("either rng or noise must be given")
        noise = gumbel_noise(rng, logits.shape)
    tape = Tape()
    return tape.gumbel_softmax(tape.constant(logits), tau, noise).value


def adam_step(store: ParameterStore, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update of every parameter from its gradient buffer."""
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = store.grads[name]
        m = store._m.get(name)
        if m is None:
            m = store._m[name] = np.zeros_like(p)
            store._v[name] = np.zeros_like(p)
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def numerical_gradient(f: Callable[[], float], array: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of ``f()`` w.r.t. every entry of ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for j in range(flat.size):
        old = flat[j]
        flat[j] = old + h
        fp = f()
        flat[j] = old - h
        fm = f()
        flat[j] = old
        gflat[j] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
