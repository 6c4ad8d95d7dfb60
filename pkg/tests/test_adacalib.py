from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import biased_data
from fieldcal._io import atomic_write_json
from fieldcal.adacalib import (
    ABLATION_VARIANTS,
    AdaCalibModel,
    InsufficientDataError,
    TrainConfig,
    UpstreamModel,
    anchor_values,
    apply_piecewise,
    calibrate,
    export_unified,
    forward,
    load_model,
    load_unified,
    log_bucket,
    loss,
    rate_bucket,
    save_model,
)
from fieldcal.binning import GLOBAL
from fieldcal.data import Dataset, logit, sigmoid
from fieldcal.metrics import field_rce
from fieldcal.pava import pava
from oracles import hand_mlp

QUICK = dict(epochs=1, min_steps=60)


def free_model(data, anchors=None, **kw):
    """Single-candidate, global-only model with free anchors and no aux term."""
    cfg = TrainConfig(
        posterior_guidance_enabled=False,
        adaptive_function_enabled=False,
        adaptive_binning_enabled=False,
        aux_enabled=False,
        **kw,
    )
    m = AdaCalibModel(cfg).prepare(data)
    if anchors is not None:
        m.store.params["cand0/free_anchors"][...] = anchors
    return m


def mlp_rates(e):
    """Bin rates as the anchor MLP sees them (isotonic-smoothed by default)."""
    return pava(e.avg_rate, e.count)


class TestBuckets:
    def test_rate_bucket(self):
        np.testing.assert_array_equal(rate_bucket([0.0, 0.5, 1.0, sigmoid(-9.9)]), [0, 50, 99, 0])

    def test_log_bucket(self):
        np.testing.assert_array_equal(log_bucket([0, 1, 3, 7, 2**40]), [0, 1, 2, 3, 30])


class TestPiecewise:
    bounds = [0.1, 0.5, 0.9 + 1e-9]

    def test_interior_example(self):
        assert apply_piecewise(0.3, self.bounds, [-2.0, 0.0, 2.0]) == pytest.approx(-1.0, abs=1e-12)

    def test_left_endpoint_and_midpoint(self):
        a = [-2.0, 0.5, 2.0]
        assert apply_piecewise(0.5, self.bounds, a) == 0.5
        assert apply_piecewise(0.7, self.bounds, a) == pytest.approx(1.25, abs=1e-8)

    def test_flat_outside_range(self):
        a = [-2.0, 0.0, 2.0]
        assert apply_piecewise(0.01, self.bounds, a) == -2.0
        assert apply_piecewise(0.99, self.bounds, a) == 2.0

    def test_single_segment(self):
        assert apply_piecewise(0.4, [0.2, 0.6], [1.0, 3.0]) == pytest.approx(2.0)

    def test_logit_space(self):
        b = [0.2, 0.8]
        a = logit(np.array(b))
        assert apply_piecewise(0.5, b, a, space="logit") == pytest.approx(0.0, abs=1e-12)

    def test_anchor_count_mismatch(self):
        with pytest.raises(ValueError):
            apply_piecewise(0.3, self.bounds, [0.0, 1.0])


class TestStructure:
    def test_identity_anchors_reproduce_scores(self, small_data):
        m = free_model(small_data, interpolation="logit")
        s = np.linspace(small_data.scores.min(), small_data.scores.max(), 501)
        np.testing.assert_allclose(m.calibrate_batch(s, ["z1"] * s.size), s, atol=1e-9)

    def test_anchor_forward_by_hand(self, small_data):
        m = AdaCalibModel(TrainConfig(seed=4, aux_enabled=False, hidden_dim=5, embed_dim=3)).prepare(small_data)
        p = m.store.params
        for v in p.values():
            v[...] = m.store.rng.normal(0, 0.5, v.shape)
        m._cache = {}
        lay = m.layouts[1]
        e = lay.table.lookup("z2")
        for k in range(e.k + 1):
            src = min(k, e.k - 1)
            x = np.concatenate(
                [
                    p["stat/rate"][rate_bucket(mlp_rates(e)[src])],
                    p["stat/pos"][int(math.floor(math.log2(1 + e.positive_sum[src])))],
                    p["stat/count"][int(math.floor(math.log2(1 + e.count[src])))],
                    [1.0 if k == e.k else 0.0],
                ]
            )
            want = hand_mlp(x, p["cand1/anchor_hidden/W"], p["cand1/anchor_hidden/b"], p["cand1/anchor_out/W"], p["cand1/anchor_out/b"])[0]
            assert anchor_values(m, 1, "z2")[k] == pytest.approx(want, abs=1e-12)

    def test_anchor_count_is_k_plus_one(self, fitted_model):
        for i, K in enumerate(fitted_model.candidate_ks):
            assert len(anchor_values(fitted_model, i, "z1")) == K + 1

    def test_identical_bin_stats_give_equal_anchors(self):
        # every bin of 20 holds labels [1, 0, 0, 0, ...] in the same pattern
        n = 400
        y = (np.arange(n) % 4 == 0).astype(int)
        d = Dataset(np.linspace(0.01, 0.99, n), y, ["z"] * n)
        m = AdaCalibModel(TrainConfig(aux_enabled=False, candidates=(5,), **QUICK)).fit(d)
        a = anchor_values(m, 0, "z")
        # the right-edge anchor carries an extra flag input, the others see identical inputs
        assert max(a[:-1]) - min(a[:-1]) == 0.0

    def test_constant_anchor_mlp_gives_constant_map(self, small_data):
        m = AdaCalibModel(TrainConfig(aux_enabled=False, adaptive_binning_enabled=False)).prepare(small_data)
        m.store.params["cand0/anchor_out/W"][...] = 0.0
        m.store.params["cand0/anchor_out/b"][...] = -1.5
        out = m.calibrate_batch(np.linspace(0.001, 0.999, 50), ["z1"] * 50)
        np.testing.assert_allclose(out, sigmoid(-1.5), atol=1e-15)

    def test_unseen_value_uses_global_entry(self, fitted_model):
        s = np.linspace(0.01, 0.9, 30)
        np.testing.assert_array_equal(
            fitted_model.calibrate_batch(s, ["never-seen"] * 30), fitted_model.calibrate_batch(s, [GLOBAL] * 30)
        )
        for i in range(fitted_model.n_candidates):
            lay = fitted_model.layouts[i]
            j = lay.keys.index(GLOBAL)
            np.testing.assert_array_equal(
                fitted_model.anchors_for(i, "never-seen"),
                fitted_model.anchor_table(i)[lay.offsets[j]:lay.offsets[j + 1]],
            )

    def test_global_only_variant_ignores_field(self, small_data):
        cfg = TrainConfig(aux_enabled=False, adaptive_binning_enabled=False, adaptive_function_enabled=False, **QUICK)
        m = AdaCalibModel(cfg).fit(small_data)
        s = np.linspace(0.01, 0.99, 40)
        outs = [m.calibrate_batch(s, [z] * 40) for z in ("z1", "z2", "z3", "other")]
        for o in outs[1:]:
            np.testing.assert_array_equal(o, outs[0])

    def test_insufficient_data(self):
        d = Dataset([0.1, 0.2, 0.3], [0, 1, 0], ["a", "b", "c"])
        with pytest.raises(InsufficientDataError):
            AdaCalibModel(TrainConfig()).prepare(d)

    def test_feature_dim_mismatch(self, fitted_model):
        with pytest.raises(ValueError):
            fitted_model.calibrate_batch([0.5], ["z1"], np.ones((1, 2)))


class TestSelector:
    def test_argmax_selection(self, small_data):
        m = AdaCalibModel(TrainConfig(aux_enabled=False)).prepare(small_data)
        m.store.params["selector/out/W"][...] = 0.0
        m.store.params["selector/out/b"][...] = [0.1, 2.0, 0.3]
        assert m.selected_candidate("z1") == 1 and m.selected_k("z1") == 10
        out = m.forward_batch([0.3, 0.6], ["z1", "z3"])
        np.testing.assert_array_equal(out["alpha"], [[0, 1, 0], [0, 1, 0]])
        np.testing.assert_allclose(out["prob"], out["candidate_probs"][:, 1])

    def test_single_candidate(self, small_data):
        m = AdaCalibModel(TrainConfig(adaptive_binning_enabled=False)).prepare(small_data)
        out = forward(m, small_data[0], train=True)
        np.testing.assert_array_equal(out["alpha"], [1.0])
        assert out["prob"] == out["candidate_probs"][0]

    def test_training_mixture_weights(self, fitted_model, small_data):
        out = fitted_model.forward_batch(small_data.scores[:200], small_data.fields[:200], train=True)
        np.testing.assert_allclose(out["alpha"].sum(axis=1), 1.0, atol=1e-12)
        assert np.all((out["prob"] > 0) & (out["prob"] < 1))


class TestLoss:
    def tiny(self):
        return Dataset([0.2, 0.4, 0.6, 0.8], [0, 1, 0, 1], ["z"] * 4)

    def test_cross_entropy_at_one_half(self):
        m = free_model(self.tiny(), [0.0, 0.0], candidates=(1,), fixed_bin_count=1)
        d = Dataset([0.5], [1], ["z"])
        _, _, parts = m.loss_graph(m.batch_from(d))
        assert parts["ce"][0] == pytest.approx(math.log(2), abs=1e-12)

    def test_hinge_on_decreasing_pair(self):
        m = free_model(self.tiny(), [1.0, 0.5], fixed_bin_count=1, hinge_weight=2.0)
        _, total, parts = m.loss_graph(m.batch_from(self.tiny()))
        assert parts["hinge"][0] == pytest.approx(0.5, abs=1e-15)
        assert float(total.value) == pytest.approx(parts["ce"][0] + 2.0 * 0.5, abs=1e-12)

    def test_perfect_predictions(self):
        d = Dataset([0.2, 0.8], [0, 1], ["z"] * 2)
        m = free_model(d, logit(np.array([1e-6, 1 - 1e-6])), fixed_bin_count=1)
        assert loss(m, d) < 1e-5

    def test_objective_is_sum_of_standalone_candidates(self, small_data):
        cfg = dict(seed=2, **QUICK)
        full = AdaCalibModel(TrainConfig(**cfg)).fit(small_data)
        batch_idx = np.arange(300)
        noise = np.random.default_rng(0).gumbel(size=(300, 3))
        _, _, parts = full.loss_graph(full.batch_from(small_data, batch_idx), noise=noise)
        standalone = 0.0
        for i, K in enumerate(full.candidate_ks):
            one = AdaCalibModel(TrainConfig(candidates=(K,), **cfg)).prepare(small_data)
            for name in one.store.params:
                src = name.replace("cand0/", f"cand{i}/")
                one.store.params[name][...] = full.store.params[src]
            _, _, p = one.loss_graph(one.batch_from(small_data, batch_idx))
            standalone += p["total"]
        assert abs(parts["objective"] - standalone) <= 1e-12

    def test_hinge_small_after_training(self, fitted_model):
        assert max(fitted_model.hinge_violations().values()) < 1e-3


class TestTraining:
    def test_reduces_field_rce(self, fitted_model):
        test, _ = biased_data(100)
        p = fitted_model.calibrate_dataset(test)
        assert field_rce(test.fields, test.labels, p) < field_rce(test.fields, test.labels, test.scores)

    def test_min_steps_extends_epochs(self, small_data):
        m = AdaCalibModel(TrainConfig(epochs=1, min_steps=20, batch_size=1000, adaptive_binning_enabled=False)).fit(small_data)
        assert len(m.history) == 4

    def test_same_seed_same_checkpoint(self, small_data):
        cfg = TrainConfig(seed=5, **QUICK)
        a = json.dumps(AdaCalibModel(cfg).fit(small_data).to_dict())
        b = json.dumps(AdaCalibModel(cfg).fit(small_data).to_dict())
        assert a == b

    def test_functional_calibrate_matches_batch(self, fitted_model, small_data):
        s = small_data[3]
        assert calibrate(fitted_model, s) == fitted_model.calibrate_batch([s.score], [s.field_value])[0]


class TestMonotonicity:
    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from(["z1", "z2", "z3", "unseen"]), st.lists(st.floats(0, 1), min_size=2, max_size=50))
    def test_non_decreasing_without_aux(self, fitted_noaux, value, scores):
        s = np.sort(np.asarray(scores))
        out = logit(fitted_noaux.calibrate_batch(s, [value] * s.size))
        assert np.all(np.diff(out) >= -1e-3)


class TestSerialization:
    def test_save_load(self, fitted_model, tmp_path, small_data):
        save_model(fitted_model, tmp_path / "m.json")
        back = load_model(tmp_path / "m.json")
        np.testing.assert_array_equal(back.calibrate_dataset(small_data), fitted_model.calibrate_dataset(small_data))

    def test_unified_export(self, fitted_model, tmp_path, small_data):
        atomic_write_json(tmp_path / "up.json", UpstreamModel().to_dict())
        export_unified(fitted_model, tmp_path / "up.json", tmp_path / "uni.json")
        uni = load_unified(tmp_path / "uni.json")
        np.testing.assert_allclose(
            uni.predict(small_data.fields, small_data.scores), fitted_model.calibrate_dataset(small_data), atol=1e-12, rtol=0
        )

    def test_logistic_upstream(self, tmp_path):
        data, _ = biased_data(3, counts=(300, 300, 300), feature_dim=2)
        m = AdaCalibModel(TrainConfig(**QUICK)).fit(data)
        up = UpstreamModel("logistic", {"upstream/weight": [0.5, -0.2], "upstream/bias": [0.1]})
        atomic_write_json(tmp_path / "up.json", up.to_dict())
        export_unified(m, tmp_path / "up.json", tmp_path / "uni.json")
        uni = load_unified(tmp_path / "uni.json")
        s = up.predict(features=data.features)
        np.testing.assert_allclose(uni.predict(data.fields, features=data.features), m.calibrate_batch(s, data.fields, data.features), atol=1e-12)

    def test_missing_upstream(self, fitted_model, tmp_path):
        with pytest.raises(FileNotFoundError):
            export_unified(fitted_model, tmp_path / "nope.json", tmp_path / "uni.json")

    def test_plain_checkpoint_is_not_unified(self, fitted_model, tmp_path):
        save_model(fitted_model, tmp_path / "m.json")
        with pytest.raises(ValueError):
            load_unified(tmp_path / "m.json")

    def test_rejects_foreign_checkpoint(self):
        with pytest.raises(ValueError):
            AdaCalibModel.from_dict({"format": 1, "kind": "platt"})


class TestConfig:
    @pytest.mark.parametrize(
        "kw",
        [{"candidates": ()}, {"candidates": (10, 5)}, {"epochs": 0}, {"learning_rate": 0}, {"interpolation": "x"},
         {"selector_warmup": 1.0}, {"hinge_weight": -1}],
    )
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_dict_round_trip(self):
        c = TrainConfig(candidates=(3, 7), seed=9)
        assert TrainConfig.from_dict(c.to_dict()) == c
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"bogus": 1})

    def test_fixed_bin_count(self):
        assert TrainConfig(adaptive_binning_enabled=False).active_candidates == (10,)
        assert TrainConfig(adaptive_binning_enabled=False, fixed_bin_count=7).active_candidates == (7,)

    def test_ablation_variants(self):
        assert len(ABLATION_VARIANTS) == 5
        assert ABLATION_VARIANTS[0][1:] == (True, True, True, True)
        assert ABLATION_VARIANTS[-1][1] is False
        # each row switches off one more component
        on = [sum(r[1:]) for r in ABLATION_VARIANTS]
        assert on == [4, 3, 2, 1, 0]
