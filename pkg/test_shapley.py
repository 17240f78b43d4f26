"""
Tests for exact and sampled Shapley values and the AUC payoff
"""

import itertools
import math

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given, settings
from scipy.special import expit

from errors import TooFewPermutations, TooManyFeatures, UnlabeledFeature
from metrics import roc_auc
from panel_data import SupervisedTable, lag_join
from shapley import (MISSINGNESS_GROUP, InterventionalAUC, explain_model, group_shapley, shapley_exact,
                     shapley_sampled)
from synth import SynthConfig, generate_panel
from tree_boost import BoostConfig, MissingStrategy, fit_boosted


def table_game(table):
    """Payoff from a lookup keyed by sorted tuples"""
    return lambda subset: table[tuple(sorted(subset))]


def direct_shapley(v, q):
    phi = np.zeros(q)
    for m in range(q):
        others = [k for k in range(q) if k != m]
        for size in range(q):
            weight = math.factorial(size) * math.factorial(q - size - 1) / math.factorial(q)
            for subset in itertools.combinations(others, size):
                phi[m] += weight * (v(frozenset(subset) | {m}) - v(frozenset(subset)))
    return phi


def interaction_game(q, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    weights = rng.normal(size=q)
    pair = rng.normal()

    def v(subset):
        return float(sum(weights[m] for m in subset) + pair * (0 in subset and 1 in subset) + math.sqrt(len(subset)))
    return v


class TestExact:
    def test_two_player_symmetric(self):
        v = table_game({(): 0.0, (0,): 1.0, (1,): 1.0, (0, 1): 2.0})
        np.testing.assert_allclose(shapley_exact(v, 2).phi, [1.0, 1.0])

    def test_dummy_player(self):
        v = lambda s: float(len(s - {2}) ** 2)
        assert shapley_exact(v, 4).phi[2] == 0.0

    def test_squared_size_game(self):
        report = shapley_exact(lambda s: float(len(s) ** 2), 3)
        np.testing.assert_allclose(report.phi, [3.0, 3.0, 3.0])
        assert report.v_full == 9.0 and report.v_empty == 0.0

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 7), st.integers(0, 2 ** 16))
    def test_matches_direct_summation_and_efficiency(self, q, seed):
        v = interaction_game(q, seed)
        report = shapley_exact(v, q)
        np.testing.assert_allclose(report.phi, direct_shapley(v, q), atol=1e-10)
        assert abs(report.efficiency_gap) < 1e-9

    def test_too_many_players(self):
        with pytest.raises(TooManyFeatures):
            shapley_exact(lambda s: 0.0, 15)


class TestSampled:
    def test_too_few_permutations(self):
        with pytest.raises(TooFewPermutations):
            shapley_sampled(lambda s: 0.0, 3, n_permutations=29)

    def test_same_seed_same_estimates(self):
        v = interaction_game(5, 1)
        first = shapley_sampled(v, 5, n_permutations=40, seed=3)
        second = shapley_sampled(v, 5, n_permutations=40, seed=3)
        np.testing.assert_array_equal(first.phi, second.phi)
        np.testing.assert_array_equal(first.se, second.se)

    def test_parallel_matches_sequential(self):
        v = interaction_game(4, 2)
        sequential = shapley_sampled(v, 4, n_permutations=30, seed=5)
        parallel = shapley_sampled(v, 4, n_permutations=30, seed=5, n_jobs=2)
        np.testing.assert_array_equal(sequential.phi, parallel.phi)

    def test_efficiency_holds_per_permutation(self):
        v = interaction_game(6, 4)
        report = shapley_sampled(v, 6, n_permutations=50, seed=0)
        assert abs(report.efficiency_gap) < 1e-9

    def test_dummy_player_is_zero(self):
        base = interaction_game(4, 7)
        v = lambda s: base(s - {3})
        report = shapley_sampled(v, 4, n_permutations=60, seed=2)
        assert report.phi[3] == 0.0
        assert report.se[3] == 0.0

    @pytest.mark.parametrize('q, seed', [(4, 0), (6, 1), (8, 2), (10, 3)])
    def test_within_standard_errors_of_exact(self, q, seed):
        v = interaction_game(q, seed)
        exact = shapley_exact(v, q).phi
        sampled = shapley_sampled(v, q, n_permutations=400, seed=seed)
        errors = np.abs(sampled.phi - exact)
        assert np.all(errors <= 5 * sampled.se + 1e-12)
        assert np.sum(errors > 3 * sampled.se + 1e-12) <= 1

    def test_symmetric_players_agree(self):
        v = lambda s: float(len(s & {0, 1}) ** 2 + 0.3 * (2 in s))
        report = shapley_sampled(v, 3, n_permutations=200, seed=9)
        combined = math.hypot(report.se[0], report.se[1])
        assert abs(report.phi[0] - report.phi[1]) <= 3 * combined + 1e-12


class TestGroups:
    def report(self):
        return shapley_exact(interaction_game(4, 11), 4, names=['a', 'b', 'c', 'd'])

    def test_single_group_is_total_gain(self):
        report = self.report()
        frame = group_shapley(report, dict.fromkeys('abcd', 'all'))
        assert frame['phi'].iloc[0] == pytest.approx(report.v_full - report.v_empty)
        assert frame['n_members'].iloc[0] == 4
        assert np.isnan(frame['se'].iloc[0])

    def test_singleton_groups_match_players(self):
        report = self.report()
        frame = group_shapley(report, {name: name for name in 'abcd'})
        np.testing.assert_allclose(frame['phi'], report.phi)
        assert frame['group'].tolist() == ['a', 'b', 'c', 'd']

    def test_group_sums_preserve_total(self):
        report = self.report()
        frame = group_shapley(report, {'a': 'g1', 'b': 'g2', 'c': 'g1', 'd': 'g2'})
        assert frame['phi'].sum() == pytest.approx(report.phi.sum())
        assert frame['group'].tolist() == ['g1', 'g2']

    def test_unlabeled_player(self):
        with pytest.raises(UnlabeledFeature):
            group_shapley(self.report(), {'a': 'g', 'b': 'g'})

    def test_sampled_groups_carry_standard_errors(self):
        report = shapley_sampled(interaction_game(4, 11), 4, n_permutations=50, names=['a', 'b', 'c', 'd'])
        frame = group_shapley(report, {'a': 'g1', 'b': 'g2', 'c': 'g1', 'd': 'g2'})
        assert (frame['se'] >= 0).all()


class ColumnModel:
    """Probability increasing in one column; NaN counts as high risk"""

    def __init__(self, column: int):
        self.column = column

    def predict_proba(self, X):
        values = np.asarray(X, dtype=float)[:, self.column]
        return expit(np.where(np.isnan(values), 3.0, values))


def risky_table(rng, n=400):
    X = rng.normal(size=(n, 3))
    y = (rng.random(n) < expit(2 * X[:, 0])).astype(int)
    X[rng.random(n) < 0.2, 1] = np.nan
    return SupervisedTable.from_arrays(X, y, ['signal', 'sparse', 'noise'])


class TestInterventionalAUC:
    def test_full_coalition_is_model_auc(self, rng):
        table = risky_table(rng)
        model = ColumnModel(0)
        for include in (False, True):
            v = InterventionalAUC(model, table.X, table.y, table.X[:50], table.feature_names,
                                  include_missingness=include, seed=1)
            assert v(frozenset(range(v.n_players))) == pytest.approx(roc_auc(model.predict_proba(table.X), table.y))

    def test_ignored_feature_gets_nothing(self, rng):
        table = risky_table(rng)
        v = InterventionalAUC(ColumnModel(0), table.X, table.y, table.X[:50], table.feature_names, seed=2)
        report = shapley_exact(v, v.n_players)
        assert report.phi[1] == 0.0 and report.phi[2] == 0.0
        assert report.phi[0] > 0.2

    def test_missing_bit_player_carries_missingness_signal(self, rng):
        table = risky_table(rng)
        y = np.isnan(table.X[:, 1]).astype(int)
        v = InterventionalAUC(ColumnModel(1), table.X, y, table.X[:80], table.feature_names,
                              include_missingness=True, seed=3)
        report = shapley_exact(v, v.n_players)
        names = v.player_names
        assert names[4] == 'missing:sparse'
        assert report.phi[4] > report.phi[1]
        groups = v.player_groups({'signal': 'core', 'sparse': 'core', 'noise': 'other'})
        assert groups['missing:noise'] == MISSINGNESS_GROUP
        assert groups['sparse'] == 'core'

    def test_deterministic_given_seed(self, rng):
        table = risky_table(rng)
        first = InterventionalAUC(ColumnModel(0), table.X, table.y, table.X[:30], table.feature_names, seed=4)
        second = InterventionalAUC(ColumnModel(0), table.X, table.y, table.X[:30], table.feature_names, seed=4)
        assert first(frozenset({1})) == second(frozenset({1}))


def test_explain_model_on_boosted_trees(rng):
    table = risky_table(rng, n=600)
    model = fit_boosted(table, BoostConfig(n_rounds=20, missing_strategy=MissingStrategy.MIA))
    report = explain_model(model, table, {'signal': 'core', 'sparse': 'core', 'noise': 'other'},
                           background_size=64, eval_size=300, include_missingness=True, seed=5)
    assert len(report.player_names) == 6
    assert abs(report.efficiency_gap) < 1e-9
    frame = report.to_frame()
    assert list(frame.columns) == ['feature', 'phi', 'se', 'group']
    assert frame.set_index('feature')['phi'].idxmax() == 'signal'
    assert set(frame['group']) == {'core', 'other', MISSINGNESS_GROUP}
    again = explain_model(model, table, background_size=64, eval_size=300, include_missingness=True, seed=5)
    np.testing.assert_array_equal(again.phi, report.phi)


def test_explain_model_samples_beyond_exact_limit(rng):
    table = risky_table(rng, n=300)
    model = fit_boosted(table, BoostConfig(n_rounds=5))
    report = explain_model(model, table, background_size=32, eval_size=100, include_missingness=True,
                           exact_limit=4, n_permutations=30, seed=1)
    assert report.se is not None
    assert abs(report.efficiency_gap) < 1e-9


@pytest.mark.slow
def test_signal_group_beats_noise_group():
    wins = 0
    for seed in range(10):
        panel, _ = generate_panel(SynthConfig(n_firms=600, n_years=6, n_features=6, n_signal=3, seed=seed))
        table = lag_join(panel)
        model = fit_boosted(table, BoostConfig(n_rounds=30, missing_strategy=MissingStrategy.MIA), seed=seed)
        report = explain_model(model, table, panel.group_labels, background_size=128, eval_size=1000,
                               include_missingness=False, seed=seed)
        groups = group_shapley(report, report.groups).set_index('group')['phi']
        if groups['signal'] > groups['noise']:
            wins += 1
    assert wins >= 9


@pytest.mark.slow
def test_missingness_group_earns_positive_value_under_mnar():
    positive = 0
    for seed in range(10):
        panel, _ = generate_panel(SynthConfig(n_firms=800, n_years=6, n_features=4, n_signal=2, mnar_strength=2.0,
                                              seed=seed))
        table = lag_join(panel)
        model = fit_boosted(table, BoostConfig(n_rounds=30, missing_strategy=MissingStrategy.MIA), seed=seed)
        report = explain_model(model, table, panel.group_labels, background_size=128, eval_size=1000,
                               include_missingness=True, exact_limit=8, seed=seed)
        groups = group_shapley(report, report.groups).set_index('group')['phi']
        if groups[MISSINGNESS_GROUP] > 0:
            positive += 1
    assert positive >= 8
