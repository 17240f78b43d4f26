"""
Tests for the logit, logit-LASSO, imputation and stacking baselines
"""

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given
from scipy.special import expit

from baselines import (OUT_OF_RANGE_VALUE, ImputeStrategy, Imputer, SuperLearner, _project_simplex, _stack_loss, bic,
                       ebic, fit_logit, fit_logit_lasso, fit_stacker, impute, lambda_max, lower_median,
                       penalized_gradient, penalized_loglik)
from conftest import make_panel
from errors import AllMissingFeature, DegenerateLabels, MissingInput, Separation, TooFewModels, exit_code_for
from panel_data import SupervisedTable
from tree_boost import BoostConfig, find_best_split


def logistic_table(rng, n=500, coefficients=(1.0, -1.0, 0.5), intercept=-1.0) -> SupervisedTable:
    X = rng.normal(size=(n, len(coefficients)))
    y = (rng.random(n) < expit(intercept + X @ np.asarray(coefficients))).astype(int)
    return SupervisedTable.from_arrays(X, y)


class TestLogit:
    def test_intercept_only_is_logit_of_mean(self):
        table = SupervisedTable.from_arrays(np.empty((8, 0)), [1, 1, 0, 0, 0, 0, 0, 0])
        model = fit_logit(table)
        assert model.intercept == pytest.approx(np.log(0.25 / 0.75), abs=1e-12)

    def test_zero_feature_gets_zero_coefficient(self, rng):
        table = logistic_table(rng, coefficients=(1.0,))
        X = np.column_stack([table.X, np.zeros(len(table))])
        model = fit_logit(SupervisedTable.from_arrays(X, table.y), l2=0.5)
        assert model.coefficients[1] == 0.0

    def test_gradient_matches_finite_differences(self, rng):
        table = logistic_table(rng, n=200)
        theta = rng.normal(size=4)
        eps = 1e-6
        numeric = np.array([
            (penalized_loglik(theta + eps * e, table.X, table.y, 0.3)
             - penalized_loglik(theta - eps * e, table.X, table.y, 0.3)) / (2 * eps)
            for e in np.eye(4)])
        np.testing.assert_allclose(penalized_gradient(theta, table.X, table.y, 0.3), numeric, rtol=1e-6, atol=1e-6)

    def test_optimum_has_zero_gradient(self, rng):
        table = logistic_table(rng)
        model = fit_logit(table)
        theta = np.concatenate([[model.intercept], model.coefficients])
        assert model.converged
        assert np.max(np.abs(penalized_gradient(theta, table.X, table.y.astype(float), 0.0))) < 1e-6

    def test_recovers_generating_coefficients(self, rng):
        model = fit_logit(logistic_table(rng, n=20000))
        np.testing.assert_allclose(model.coefficients, [1.0, -1.0, 0.5], atol=0.1)
        assert model.intercept == pytest.approx(-1.0, abs=0.1)

    def test_separation(self):
        X = np.array([-1.0, -1.0, -1.0, -1e-7, 1e-7, 1.0, 1.0, 1.0])
        with pytest.raises(Separation):
            fit_logit(SupervisedTable.from_arrays(X, [0, 0, 0, 0, 1, 1, 1, 1]))

    def test_missing_input(self):
        with pytest.raises(MissingInput):
            fit_logit(SupervisedTable.from_arrays([[1.0], [np.nan], [0.5]], [0, 1, 1]))

    def test_single_class(self):
        with pytest.raises(DegenerateLabels):
            fit_logit(SupervisedTable.from_arrays([[1.0], [2.0]], [0, 0]))


class TestLasso:
    def test_lambda_above_max_is_null_model(self, rng):
        table = logistic_table(rng)
        path = fit_logit_lasso(table, lambda_grid=[1.01 * lambda_max(table)])
        model = path.models[0]
        assert not model.coefficients.any()
        assert model.intercept == pytest.approx(np.log(table.y.mean() / (1 - table.y.mean())))
        assert path.support() == []

    def test_zero_lambda_matches_unpenalized_logit(self, rng):
        table = logistic_table(rng, n=400)
        path = fit_logit_lasso(table, lambda_grid=[0.0])
        np.testing.assert_allclose(path.models[0].coefficients, fit_logit(table).coefficients, atol=1e-4)

    def test_kkt_along_path_and_ebic_selection(self, rng):
        table = logistic_table(rng, n=600, coefficients=(1.0, -0.8, 0.0, 0.0, 0.3))
        path = fit_logit_lasso(table, n_lambdas=20)
        assert path.kkt.max() < 1e-6
        assert path.selected == int(np.argmin(path.ebic))
        assert np.all(np.diff(path.lambdas) < 0)

    def test_support_invariant_to_rescaling(self, rng):
        table = logistic_table(rng, n=500, coefficients=(1.0, 0.0, -0.7, 0.0))
        scaled = table.X.copy()
        scaled[:, 0] *= 10.0
        first = fit_logit_lasso(table, n_lambdas=15)
        second = fit_logit_lasso(SupervisedTable.from_arrays(scaled, table.y), n_lambdas=15)
        assert first.support() == second.support()

    def test_parallel_path_matches_sequential(self, rng):
        table = logistic_table(rng, n=300)
        sequential = fit_logit_lasso(table, n_lambdas=8)
        parallel = fit_logit_lasso(table, n_lambdas=8, n_jobs=2)
        assert sequential.selected == parallel.selected
        np.testing.assert_allclose(sequential.standardized_path, parallel.standardized_path, atol=1e-5)

    def test_ranking_orders_by_path_entry(self, rng):
        table = logistic_table(rng, n=1000, coefficients=(2.0, 0.0, 0.7))
        ranking = fit_logit_lasso(table, n_lambdas=30).ranking()
        assert list(ranking.columns) == ['rank', 'feature', 'entry_lambda', 'coefficient', 'selected']
        assert ranking['feature'].iloc[0] == 'x0'
        assert ranking['rank'].tolist() == [1, 2, 3]

    def test_missing_input(self):
        with pytest.raises(MissingInput):
            fit_logit_lasso(SupervisedTable.from_arrays([[1.0], [np.nan], [0.5], [2.0]], [0, 1, 1, 0]))

    @pytest.mark.slow
    def test_recovers_signal_support(self):
        hits = 0
        for seed in range(10):
            rng = np.random.Generator(np.random.PCG64(seed))
            table = logistic_table(rng, n=2000, coefficients=(1.0, -1.0, 0.8) + (0.0,) * 7, intercept=-2.0)
            if {'x0', 'x1', 'x2'} <= set(fit_logit_lasso(table).support()):
                hits += 1
        assert hits >= 8


@given(st.floats(-1e4, 0), st.integers(0, 20), st.integers(2, 10_000), st.integers(2, 500))
def test_ebic_with_zero_gamma_is_bic(loglik, k, n, p):
    assert ebic(loglik, k, n, p, gamma=0.0) == bic(loglik, k, n)


class TestImpute:
    def test_identity_without_missing(self):
        panel = make_panel([('A', 2010, 0, (1.0, 2.0)), ('B', 2010, 1, (3.0, 4.0))])
        assert impute(panel, ImputeStrategy.MEDIAN) == panel
        assert impute(panel, ImputeStrategy.OUT_OF_RANGE) == panel

    def test_odd_count_median(self):
        panel = make_panel([('A', 2010, 0, (1.0,)), ('B', 2010, 0, (2.0,)), ('C', 2010, 1, (3.0,)),
                            ('D', 2010, 0, (None,))], feature_names=('x',))
        filled = impute(panel, 'median')
        assert filled.records[3].features == (2.0,)
        assert not filled.missing_matrix.any()

    def test_even_count_takes_lower_middle(self):
        assert lower_median(np.array([4.0, 1.0, 3.0, 2.0])) == 2.0

    def test_out_of_range_value(self, tiny_panel):
        filled = impute(tiny_panel, ImputeStrategy.OUT_OF_RANGE)
        assert filled.records[0].features[1] == OUT_OF_RANGE_VALUE
        assert filled.records[4].features[0] == 1e20

    def test_all_missing_feature(self):
        panel = make_panel([('A', 2010, 0, (None, 1.0)), ('B', 2010, 0, (None, 2.0))])
        with pytest.raises(AllMissingFeature):
            impute(panel, ImputeStrategy.MEDIAN)

    def test_median_preserves_observed_median(self, small_synth):
        panel, _ = small_synth
        filled = impute(panel, ImputeStrategy.MEDIAN)
        X, mask = panel.feature_matrix, panel.missing_matrix
        for j in range(X.shape[1]):
            assert lower_median(filled.feature_matrix[:, j]) == lower_median(X[~mask[:, j], j])

    def test_imputer_fits_on_one_table_and_fills_another(self):
        imputer = Imputer('median').fit(np.array([[1.0], [5.0], [9.0]]))
        np.testing.assert_array_equal(imputer.transform(np.array([[np.nan], [2.0]])), [[5.0], [2.0]])

    def test_out_of_range_fill_lets_trees_isolate_missingness(self):
        X = np.array([[1.0], [2.0], [3.0], [4.0], [np.nan], [np.nan]])
        filled = Imputer(ImputeStrategy.OUT_OF_RANGE).fit(X).transform(X)
        found = find_best_split(filled, np.array([1.0, 1.0, 1.0, 1.0, -1.0, -1.0]), np.ones(6),
                                BoostConfig(lam=0.0, min_child_hessian=0.0))
        np.testing.assert_array_equal(found.rule.goes_left(filled[:, 0]), [True] * 4 + [False] * 2)


class TestStacker:
    def test_true_generator_dominates(self, rng):
        n = 10_000
        truth = expit(rng.normal(-1.0, 1.5, size=n))
        noisy = expit(np.log(truth / (1 - truth)) + rng.normal(scale=1.5, size=n))
        y = (rng.random(n) < truth).astype(int)
        weights = fit_stacker(np.column_stack([noisy, truth, np.full(n, y.mean())]), y)
        assert weights[1] >= 0.9

    def test_identical_models(self, rng):
        p = rng.uniform(0.1, 0.9, size=200)
        y = (rng.random(200) < p).astype(int)
        weights = fit_stacker(np.column_stack([p, p]), y)
        assert weights.sum() == pytest.approx(1.0)
        assert (weights >= 0).all()

    def test_never_worse_than_best_single_model(self, rng):
        P = rng.uniform(0.05, 0.95, size=(300, 4))
        y = (rng.random(300) < P[:, 2]).astype(int)
        weights = fit_stacker(P, y)
        best_single = min(_stack_loss(np.eye(4)[k], P, y) for k in range(4))
        assert _stack_loss(weights, P, y) <= best_single + 1e-9
        assert weights.sum() == pytest.approx(1.0)

    def test_needs_two_models(self):
        with pytest.raises(TooFewModels) as info:
            fit_stacker(np.full((5, 1), 0.5), [0, 1, 0, 1, 0])
        assert info.value.to_dict()['error'] == 'too_few_models'
        assert exit_code_for(info.value) == 1

    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=8))
    def test_projection_lands_on_simplex(self, values):
        projected = _project_simplex(np.array(values))
        assert (projected >= 0).all()
        assert projected.sum() == pytest.approx(1.0)
        np.testing.assert_allclose(_project_simplex(projected), projected, atol=1e-12)


def test_super_learner_combines_fitted_learners(rng):
    table = logistic_table(rng, n=400)
    learners = [('logit', lambda t, seed: fit_logit(t)), ('ridge', lambda t, seed: fit_logit(t, l2=50.0))]
    stack = SuperLearner(learners, inner_folds=3).fit(table, seed=1)
    assert stack.weights.sum() == pytest.approx(1.0)
    assert len(stack.models) == 2
    p = stack.predict_proba(table)
    assert ((p > 0) & (p < 1)).all()
