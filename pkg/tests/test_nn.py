from __future__ import annotations

import numpy as np
import pytest

from fieldcal.nn import (
    LayerSpec,
    ParameterStore,
    Tape,
    adam_step,
    backward,
    dense_forward,
    embedding_lookup,
    gumbel_noise,
    gumbel_softmax,
    numerical_gradient,
    relative_error,
)
from oracles import hand_mlp

H = 1e-3


def check_gradients(store, build, tol=1e-4):
    """Compare tape gradients of ``build(tape)`` with central differences for every parameter."""
    store.zero_grad()
    tape = Tape(store)
    loss = build(tape)
    backward(store, tape, loss)

    def f():
        return float(build(Tape(store)).value)

    for name, p in store.params.items():
        num = numerical_gradient(f, p, H)
        assert relative_error(store.grads[name], num).max() <= tol, name


def two_layer_store(seed=0, d_in=3, hidden=5, d_out=2):
    store = ParameterStore(seed)
    store.add_dense("l1", LayerSpec(d_in, hidden, "relu"))
    store.add_dense("l2", LayerSpec(hidden, d_out, "identity"))
    for v in store.params.values():
        v[...] = store.rng.normal(0, 1, v.shape)
    return store


class TestDense:
    def test_identity_weights(self):
        s = ParameterStore()
        s.add_dense("d", LayerSpec(3, 3, "identity"))
        s.params["d/W"][...] = np.eye(3)
        np.testing.assert_array_equal(dense_forward(s, "d", [1.0, -2.0, 3.0]), [1.0, -2.0, 3.0])

    def test_zero_weights_give_activation_of_bias(self):
        s = ParameterStore()
        s.add_dense("d", LayerSpec(2, 2, "relu"))
        s.params["d/W"][...] = 0
        s.params["d/b"][...] = [-1.0, 2.0]
        np.testing.assert_array_equal(dense_forward(s, "d", [5.0, 7.0]), [0.0, 2.0])

    def test_matches_hand_evaluation(self):
        s = two_layer_store(4)
        x = np.array([0.3, -1.2, 2.0])
        tape = Tape(s)
        out = tape.dense("l2", tape.dense("l1", tape.constant(x[None, :]))).value[0]
        p = s.params
        np.testing.assert_allclose(out, hand_mlp(x, p["l1/W"], p["l1/b"], p["l2/W"], p["l2/b"]), atol=1e-12)

    def test_dimension_mismatch(self):
        s = two_layer_store()
        with pytest.raises(ValueError):
            dense_forward(s, "l1", [1.0, 2.0])

    def test_glorot_range(self):
        s = ParameterStore(1)
        s.add_dense("d", LayerSpec(30, 2))
        assert np.abs(s.params["d/W"]).max() <= np.sqrt(6 / 32)

    def test_layer_spec_validation(self):
        with pytest.raises(ValueError):
            LayerSpec(0, 1)
        with pytest.raises(ValueError):
            LayerSpec(1, 1, "tanh")


class TestGradients:
    def test_linear(self):
        s = ParameterStore()
        s.add("w", [2.0])
        t = Tape(s)
        loss = t.sum(t.mul(t.param("w"), t.constant([3.0])))
        t.backward(loss)
        assert s.grads["w"][0] == 3.0

    def test_sigmoid_at_zero(self):
        s = ParameterStore()
        s.add("u", [0.0])
        t = Tape(s)
        t.backward(t.sum(t.sigmoid(t.param("u"))))
        assert s.grads["u"][0] == pytest.approx(0.25)

    @pytest.mark.parametrize("seed", range(10))
    def test_two_layer_net(self, seed):
        s = two_layer_store(seed)
        x = s.rng.normal(size=(6, 3))
        y = (s.rng.random(6) < 0.5).astype(float)
        check_gradients(s, lambda t: t.mean(t.bce_with_logits(t.sum(t.dense("l2", t.dense("l1", t.constant(x))), axis=1), y)))

    def test_embedding_double_lookup_sums_paths(self):
        s = ParameterStore(3)
        s.add_embedding("e", 4, 3, scale=1.0)
        s.add("w", s.rng.normal(size=3))

        def build(t):
            rows = t.embedding("e", [1, 2, 1, 9])
            return t.sum(t.sigmoid(t.matmul(rows, t.reshape(t.param("w"), (3, 1)))))

        check_gradients(s, build)

    def test_softmax_and_log_softmax(self):
        s = ParameterStore(5)
        s.add("z", s.rng.normal(size=(4, 3)))
        c = s.rng.normal(size=(4, 3))
        check_gradients(s, lambda t: t.sum(t.mul(t.softmax(t.param("z")), t.constant(c))))
        check_gradients(s, lambda t: t.sum(t.mul(t.log_softmax(t.param("z")), t.constant(c))))

    def test_gumbel_softmax_and_bce(self):
        s = ParameterStore(6)
        s.add("z", s.rng.normal(size=(5, 3)))
        s.add("p", s.rng.uniform(0.1, 0.9, size=(5, 3)))
        noise = gumbel_noise(s.rng, (5, 3))
        y = np.array([1, 0, 1, 1, 0.0])

        def build(t):
            a = t.gumbel_softmax(t.param("z"), 0.7, noise)
            return t.mean(t.bce(t.sum(t.mul(a, t.param("p")), axis=1), y))

        check_gradients(s, build)

    def test_concat_take_sub_scale(self):
        s = ParameterStore(7)
        s.add("a", s.rng.normal(size=(3, 2)))
        s.add("b", s.rng.normal(size=(3, 1)))

        def build(t):
            x = t.concat([t.param("a"), t.param("b")], axis=1)
            flat = t.reshape(x, (-1,))
            d = t.sub(t.take(flat, [0, 4, 4]), t.take(flat, [8, 1, 2]))
            return t.sum(t.scale(t.mul(d, d), 0.5))

        check_gradients(s, build)

    def test_detach_blocks_gradient(self):
        s = ParameterStore()
        s.add("w", [1.5])
        t = Tape(s)
        w = t.param("w")
        t.backward(t.sum(t.add(t.detach(w), t.constant([0.0]))))
        assert s.grads["w"][0] == 0.0

    def test_backward_without_forward(self):
        s = ParameterStore()
        s.add("w", [1.0])
        other = Tape(s)
        loss = other.sum(other.param("w"))
        with pytest.raises(RuntimeError):
            Tape(s).backward(loss)


class TestEmbedding:
    def test_rows_and_oov(self):
        s = ParameterStore(0)
        s.add_embedding("e", 3, 2)
        np.testing.assert_array_equal(embedding_lookup(s, "e", 0), s.params["e"][0])
        np.testing.assert_array_equal(embedding_lookup(s, "e", 17), s.params["e"][3])
        t = Tape(s)
        np.testing.assert_array_equal(t.embedding("e", [5]).value[0], s.params["e"][3])

    def test_init_range(self):
        s = ParameterStore(0)
        s.add_embedding("e", 50, 8)
        assert np.abs(s.params["e"]).max() <= 0.01


class TestGumbel:
    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(0)
        a = gumbel_softmax(rng.normal(size=(1000, 4)) * 3, 1.0, rng)
        np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(a >= 0)

    def test_low_temperature_is_nearly_one_hot(self):
        rng = np.random.default_rng(1)
        a = gumbel_softmax(rng.normal(size=(1000, 3)), 1e-4, rng)
        assert a.max(axis=1).min() >= 0.999

    def test_rejects_nonpositive_tau(self):
        with pytest.raises(ValueError):
            gumbel_softmax([0.0, 1.0], 0.0, np.random.default_rng())

    def test_needs_noise_source(self):
        with pytest.raises(ValueError):
            gumbel_softmax([0.0, 1.0], 1.0)


class TestAdam:
    def test_first_step_magnitude(self):
        s = ParameterStore()
        s.add("w", [1.0, -1.0])
        s.grads["w"][...] = [50.0, -0.3]
        adam_step(s, 0.01)
        np.testing.assert_allclose(s.params["w"], [0.99, -0.99], atol=1e-6)

    def test_zero_gradient_is_a_no_op(self):
        s = ParameterStore()
        s.add("w", [1.0, 2.0])
        adam_step(s, 0.1)
        np.testing.assert_array_equal(s.params["w"], [1.0, 2.0])

    def test_deterministic_runs(self):
        def run():
            s = two_layer_store(9)
            x = np.random.default_rng(0).normal(size=(8, 3))
            for _ in range(20):
                s.zero_grad()
                t = Tape(s)
                loss = t.mean(t.bce_with_logits(t.sum(t.dense("l2", t.dense("l1", t.constant(x))), axis=1), np.ones(8)))
                t.backward(loss)
                adam_step(s, 0.05)
            return s

        a, b = run(), run()
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])


class TestStore:
    def test_round_trip(self):
        s = two_layer_store(2)
        s.add_embedding("e", 3, 2)
        back = ParameterStore.from_dict(s.to_dict())
        assert back.layers == s.layers and back.embeddings == s.embeddings
        for k in s.params:
            np.testing.assert_array_equal(back.params[k], s.params[k])

    def test_duplicate_name(self):
        s = ParameterStore()
        s.add("w", [1.0])
        with pytest.raises(KeyError):
            s.add("w", [2.0])
