"""
Tests for the Z-score, Merton distance-to-default and percentile cutoff reports
"""

import math

import hypothesis.strategies as st
import numpy as np
import pandas as pd
import pytest
from hypothesis import given

from credit_scores import (ALTMAN_SPEC, Direction, LinearScoreSpec, MertonColumns, cross_validated_cutoff_report,
                           default_probability, distance_to_default, nearest_rank_cutoff, percentile_cutoff_report,
                           proxy_scores, z_score, z_scores)
from errors import ArityMismatch, BadDomain, MissingInput
from panel_data import stratify_labels


class TestZScore:
    def test_zero_ratios(self):
        assert z_score([0.0] * 5) == 0.0

    def test_unit_weights(self):
        spec = LinearScoreSpec(('a', 'b', 'c'), (1, 1, 1))
        assert z_score([0.5, 1.5, 1.0], spec) == pytest.approx(3.0)

    def test_altman_weights(self):
        assert z_score([0.1, 0.1, 0.1, 0.5, 1.0], ALTMAN_SPEC) == pytest.approx(1.89)

    def test_missing_ratio(self):
        with pytest.raises(MissingInput):
            z_score([0.1, None, 0.1, 0.5, 1.0])
        with pytest.raises(MissingInput):
            z_scores(pd.DataFrame({name: [0.1, np.nan] for name in ALTMAN_SPEC.ratio_names}))

    def test_arity(self):
        with pytest.raises(ArityMismatch):
            LinearScoreSpec(('a', 'b'), (1.0,))
        with pytest.raises(ArityMismatch):
            z_score([1.0, 2.0])

    def test_frame_matches_scalar(self, rng):
        frame = pd.DataFrame(rng.normal(size=(20, 5)), columns=list(ALTMAN_SPEC.ratio_names))
        expected = [z_score(row) for row in frame.to_numpy().tolist()]
        np.testing.assert_allclose(z_scores(frame), expected)


class TestDistanceToDefault:
    def test_cancelling_terms(self):
        assert distance_to_default(5.0, 5.0, 0.02, 0.2) == pytest.approx(0.0, abs=1e-15)

    def test_log_term_alone(self):
        assert distance_to_default(math.e, 1.0, 0.5, 1.0, 1.0) == pytest.approx(1.0)

    def test_direct_evaluation(self):
        assert distance_to_default(2.0, 1.0, 0.05, 0.3, 1.0) == pytest.approx((math.log(2) + 0.005) / 0.3)
        assert distance_to_default(2.0, 1.0, 0.05, 0.3, 1.0) == pytest.approx(2.3271, abs=1e-4)

    @pytest.mark.parametrize('kwargs', [
        {'asset_value': 0.0}, {'debt': -1.0}, {'volatility': 0.0}, {'horizon': 0.0},
    ])
    def test_bad_domain(self, kwargs):
        values = dict(asset_value=2.0, debt=1.0, drift=0.0, volatility=0.3, horizon=1.0)
        values.update(kwargs)
        with pytest.raises(BadDomain):
            distance_to_default(**values)

    def test_monotone_in_assets_and_debt(self):
        grid = np.linspace(0.5, 5.0, 40)
        assert np.all(np.diff(distance_to_default(grid, 1.0, 0.03, 0.25)) > 0)
        assert np.all(np.diff(distance_to_default(2.0, grid, 0.03, 0.25)) < 0)

    def test_default_probability(self):
        assert default_probability(0.0) == pytest.approx(0.5)
        dtd = np.array([-1.0, 0.0, 2.0])
        np.testing.assert_allclose(default_probability(dtd) + default_probability(-dtd), 1.0)


def test_proxy_scores_columns(rng):
    n = 10
    frame = pd.DataFrame(rng.normal(size=(n, 5)), columns=list(ALTMAN_SPEC.ratio_names))
    frame['asset_value'] = rng.uniform(1, 3, size=n)
    frame['debt'] = 1.0
    frame['asset_drift'] = 0.02
    frame['asset_vol'] = 0.3
    scores = proxy_scores(frame, merton=MertonColumns())
    assert list(scores.columns) == ['z_score', 'dtd', 'merton_pd']
    np.testing.assert_allclose(scores['merton_pd'], default_probability(scores['dtd'].to_numpy()))


class TestNearestRank:
    def test_low_is_risky(self):
        values = np.arange(1.0, 101.0)
        assert nearest_rank_cutoff(values, 10, Direction.LOW_IS_RISKY) == 10.0
        assert nearest_rank_cutoff(values, 1, Direction.LOW_IS_RISKY) == 1.0

    def test_high_is_risky(self):
        assert nearest_rank_cutoff(np.arange(1.0, 101.0), 10, Direction.HIGH_IS_RISKY) == 91.0

    def test_small_samples_round_up(self):
        assert nearest_rank_cutoff(np.array([3.0, 1.0, 2.0]), 1, 'LowIsRisky') == 1.0


class TestPercentileReport:
    def test_perfect_ordering(self):
        scores = np.arange(100.0)
        labels = (scores < 10).astype(int)
        report = percentile_cutoff_report(scores, labels, Direction.LOW_IS_RISKY)
        row = report.set_index('percentile').loc[10]
        assert row['precision'] == 1.0
        assert row['fdr'] == 0.0
        assert report['precision'].is_monotonic_decreasing or report['precision'].nunique() == 1

    def test_precision_plus_fdr_is_one(self, rng):
        scores = rng.normal(size=300)
        labels = (rng.random(300) < 0.2).astype(int)
        report = percentile_cutoff_report(scores, labels)
        np.testing.assert_allclose(report['precision'] + report['fdr'], 1.0)
        assert list(report.columns) == ['percentile', 'cutoff', 'n_predicted', 'precision', 'fdr']

    def test_monotone_for_perfectly_ordered_scores(self, rng):
        labels = (rng.random(500) < 0.05).astype(int)
        scores = np.where(labels == 1, rng.uniform(0, 1, 500), rng.uniform(1, 2, 500))
        precision = percentile_cutoff_report(scores, labels)['precision'].to_numpy()
        assert np.all(np.diff(precision) <= 1e-12)

    def test_ties_at_the_cutoff_are_flagged(self):
        scores = [1.0, 2.0, 2.0, 2.0] + [5.0] * 16
        labels = [1, 1, 0, 0] + [0] * 16
        low = percentile_cutoff_report(scores, labels, Direction.LOW_IS_RISKY, percentiles=[10]).iloc[0]
        assert (low['cutoff'], low['n_predicted'], low['precision']) == (2.0, 4, 0.5)
        high = percentile_cutoff_report([-s for s in scores], labels, Direction.HIGH_IS_RISKY,
                                        percentiles=[10]).iloc[0]
        assert (high['cutoff'], high['n_predicted'], high['precision']) == (-2.0, 4, 0.5)

    def test_empty_prediction_set_is_undefined(self):
        report = percentile_cutoff_report([5.0, 6.0], [0, 1], in_sample_scores=[1.0, 2.0], percentiles=[10])
        assert report['n_predicted'].iloc[0] == 0
        assert np.isnan(report['precision'].iloc[0])
        assert np.isnan(report['fdr'].iloc[0])

    @given(st.lists(st.integers(-50, 50), min_size=5, max_size=60), st.integers(0, 2 ** 16))
    def test_low_on_scores_equals_high_on_negated(self, values, seed):
        scores = np.array(values, dtype=float)
        labels = np.random.Generator(np.random.PCG64(seed)).integers(0, 2, size=len(scores))
        low = percentile_cutoff_report(scores, labels, Direction.LOW_IS_RISKY)
        high = percentile_cutoff_report(-scores, labels, Direction.HIGH_IS_RISKY)
        pd.testing.assert_series_equal(low['n_predicted'], high['n_predicted'])
        pd.testing.assert_series_equal(low['precision'], high['precision'])
        np.testing.assert_array_equal(low['cutoff'], -high['cutoff'])

    @pytest.mark.slow
    def test_random_scores_recover_prevalence(self):
        precisions = []
        for seed in range(20):
            rng = np.random.Generator(np.random.PCG64(seed))
            labels = (rng.random(2000) < 0.1).astype(int)
            precisions.append(percentile_cutoff_report(rng.random(2000), labels, percentiles=[10])['precision'][0])
        assert abs(np.mean(precisions) - 0.10) < 0.05


def test_cross_validated_report_pools_held_out_folds(rng):
    labels = (rng.random(400) < 0.1).astype(int)
    scores = np.where(labels == 1, -1.0, 1.0) + rng.normal(scale=0.1, size=400)
    plan = stratify_labels(labels, 5, seed=0)
    report = cross_validated_cutoff_report(scores, labels, plan, Direction.LOW_IS_RISKY)
    assert report['percentile'].tolist() == list(range(1, 11))
    assert report.loc[4, 'precision'] == 1.0
    assert (report['n_predicted'].iloc[1:] > 0).all()
