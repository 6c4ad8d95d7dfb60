from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fieldcal.baselines import (
    CalibrationFitError,
    GammaCalibrator,
    IdentityCalibrator,
    PerFieldCalibrator,
    PlattCalibrator,
    SIRCalibrator,
    apply,
    calibrator_from_dict,
    fit_baseline,
    fit_gamma,
    fit_histogram,
    fit_isotonic,
    fit_platt,
    fit_sir,
)
from fieldcal.data import Dataset, FieldSpec, RateCurve, SyntheticSpec, generate_synthetic, sigmoid
from fieldcal.metrics import log_loss
from oracles import brute_force_isotonic

rows_st = st.lists(st.tuples(st.floats(0.01, 0.99), st.integers(0, 1)), min_size=2, max_size=40)


def identity_data(n, seed=0):
    d, _ = generate_synthetic(SyntheticSpec((FieldSpec("z", n, RateCurve("beta", {"a": 2, "b": 3})),), noise_seed=seed))
    return d


class TestHistogram:
    def test_all_positive_bin(self):
        c = fit_histogram(Dataset([0.1, 0.2, 0.3, 0.4], [1, 1, 1, 1], ["z"] * 4), K=1)
        assert apply(c, 0.25) == pytest.approx(5 / 6)

    def test_mixed_bin(self):
        c = fit_histogram(Dataset([0.1, 0.2], [0, 1], ["z"] * 2), K=1)
        assert apply(c, 0.15) == pytest.approx(0.5)

    def test_single_bin_rate(self):
        d = Dataset(np.linspace(0.01, 0.99, 1000), [1] * 300 + [0] * 700, ["z"] * 1000)
        c = fit_histogram(d, K=1)
        np.testing.assert_allclose(c.apply([0.001, 0.5, 0.999]), 301 / 1002)

    def test_too_few_samples(self):
        with pytest.raises(CalibrationFitError):
            fit_histogram(Dataset([0.1], [1], ["z"]), K=2)


class TestIsotonic:
    def test_no_violators(self):
        c = fit_isotonic(Dataset([0.1, 0.2, 0.3, 0.4], [0, 0, 1, 1], ["z"] * 4))
        np.testing.assert_array_equal(c.apply([0.1, 0.2, 0.3, 0.4]), [0, 0, 1, 1])

    def test_pooled_level(self):
        c = fit_isotonic(Dataset([0.1, 0.2, 0.3], [1, 0, 0], ["z"] * 3))
        np.testing.assert_allclose(c.apply([0.1, 0.2, 0.3]), [1 / 3] * 3, atol=1e-15)

    def test_ties_are_pooled_before_fitting(self):
        c = fit_isotonic(Dataset([0.2, 0.2, 0.5], [1, 0, 1], ["z"] * 3))
        np.testing.assert_allclose(c.apply([0.2, 0.5]), [0.5, 1.0])

    @settings(max_examples=60, deadline=None)
    @given(rows_st)
    def test_matches_oracle_on_distinct_scores(self, rows):
        s, y = map(np.array, zip(*rows))
        s, idx = np.unique(s, return_index=True)
        y = y[idx]
        if s.size < 2 or s.size > 10:
            return
        c = fit_isotonic(Dataset(s, y, ["z"] * s.size))
        np.testing.assert_allclose(c.apply(s), brute_force_isotonic(y.astype(float)), atol=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(rows_st, st.floats(0, 1), st.floats(0, 1))
    def test_monotone(self, rows, a, b):
        s, y = zip(*rows)
        c = fit_isotonic(Dataset(s, y, ["z"] * len(s)))
        lo, hi = sorted((a, b))
        assert apply(c, lo) <= apply(c, hi)


class TestSIR:
    def test_midpoint_interpolation(self):
        c = SIRCalibrator([0.25, 0.75], [0.2, 0.6])
        assert apply(c, 0.5) == pytest.approx(0.4)

    def test_clamps_below_first_mean(self):
        assert apply(SIRCalibrator([0.25, 0.75], [0.2, 0.6]), 0.01) == pytest.approx(0.2)

    def test_violating_rates_pool(self):
        # two bins with rates 0.5 then 0.3 pool to 0.4
        d = Dataset([0.1, 0.2, 0.3, 0.4, 0.6, 0.7, 0.8, 0.9, 0.95, 0.97],
                    [1, 0, 1, 0, 1, 1, 0, 0, 0, 0], ["z"] * 10)
        c = fit_sir(d, K=2)
        np.testing.assert_allclose(c.ys, [0.4, 0.4])
        np.testing.assert_allclose(c.apply([0.05, 0.5, 0.99]), 0.4)

    @settings(max_examples=60, deadline=None)
    @given(rows_st, st.floats(0, 1), st.floats(0, 1))
    def test_monotone(self, rows, a, b):
        s, y = zip(*rows)
        c = fit_sir(Dataset(s, y, ["z"] * len(s)), K=2)
        lo, hi = sorted((a, b))
        assert apply(c, lo) <= apply(c, hi) + 1e-15


class TestPlatt:
    def test_identity_parameters(self):
        s = np.array([0.01, 0.3, 0.77])
        np.testing.assert_allclose(PlattCalibrator(1, 0).apply(s), s, atol=1e-15)

    def test_recovers_identity_on_calibrated_data(self):
        c = fit_platt(identity_data(200_000, seed=1))
        assert abs(c.a - 1) < 0.05 and abs(c.b) < 0.05

    def test_constant_scores(self):
        d = Dataset([0.5] * 1000, [1] * 800 + [0] * 200, ["z"] * 1000)
        c = fit_platt(d)
        assert sigmoid(c.b) == pytest.approx(0.8, abs=1e-6)

    def test_needs_two_classes(self):
        with pytest.raises(CalibrationFitError):
            fit_platt(Dataset([0.1, 0.2], [1, 1], ["z", "z"]))


class TestGamma:
    def test_zero_parameters_give_one_half(self):
        np.testing.assert_array_equal(GammaCalibrator().apply([0.01, 0.5, 0.9]), 0.5)

    def test_recovers_generating_parameters(self):
        rng = np.random.default_rng(0)
        s = rng.uniform(0.01, 0.99, 1_000_000)
        y = (rng.random(s.size) < sigmoid(2 * np.log(s) + 0 * s + 1)).astype(int)
        c = fit_gamma(Dataset(s, y, np.full(s.size, "z")))
        assert abs(c.a - 2) < 0.1 and abs(c.b) < 0.1 and abs(c.c - 1) < 0.1

    def test_no_worse_logloss_on_calibrated_data(self):
        d = identity_data(20_000, seed=2)
        c = fit_gamma(d)
        assert log_loss(d.labels, c.apply(d.scores)) <= log_loss(d.labels, d.scores) + 1e-3

    def test_increasing_check(self):
        assert GammaCalibrator(1.0, 0.0, 0.0).is_increasing_on(0.01, 0.99)
        assert not GammaCalibrator(-1.0, 0.0, 0.0).is_increasing_on(0.01, 0.99)


class TestInterface:
    @pytest.mark.parametrize("method", ["histogram", "isotonic", "platt", "gamma", "sir", "identity"])
    def test_dict_round_trip(self, small_data, method):
        c = fit_baseline(method, small_data)
        back = calibrator_from_dict(c.to_dict())
        s = np.linspace(0.001, 0.999, 101)
        np.testing.assert_array_equal(back.apply(s), c.apply(s))

    def test_identity(self):
        s = np.array([0.1, 0.5])
        np.testing.assert_array_equal(IdentityCalibrator().apply(s), s)

    def test_unknown_method(self, small_data):
        with pytest.raises(ValueError):
            fit_baseline("nope", small_data)

    def test_per_field_uses_member_and_fallback(self, small_data):
        c = fit_baseline("platt", small_data, per_field=True)
        assert isinstance(c, PerFieldCalibrator) and set(c.members) == {"z1", "z2", "z3"}
        s = np.full(2, 0.3)
        expected = [c.members["z1"].apply(s[:1])[0], c.fallback.apply(s[:1])[0]]
        np.testing.assert_allclose(c.apply(s, ["z1", "unseen"]), expected)
        back = calibrator_from_dict(c.to_dict())
        np.testing.assert_array_equal(back.apply(s, ["z1", "z2"]), c.apply(s, ["z1", "z2"]))

    def test_per_field_skips_degenerate_field(self):
        d = Dataset([0.1, 0.2, 0.3, 0.4, 0.5], [0, 1, 0, 1, 1], ["a", "a", "a", "a", "b"])
        c = fit_baseline("platt", d, per_field=True)
        assert set(c.members) == {"a"}

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            calibrator_from_dict({"format": 1, "variant": "magic"})
