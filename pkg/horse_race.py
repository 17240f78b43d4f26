"""
Cross-validated horse race
Fits every configured model on the same stratified folds and reports fold-averaged
metrics, out-of-fold predictions and mean ROC/PR curves
"""

import logging
import time
import zlib
from dataclasses import dataclass, field, fields
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from baselines import Imputer, SuperLearner, fit_logit, fit_logit_lasso
from errors import ConfigError, DistressError
from metrics import average_reports, evaluate, mean_pr_curve, mean_roc_curve
from panel_data import FoldPlan, SupervisedTable
from run_config import ModelSpec
from tree_boost import BoostConfig, MissingStrategy, fit_boosted, fit_cart, fit_forest
from zombie import RiskPanel

logger = logging.getLogger(__name__)

BOOST_KEYS = frozenset(f.name for f in fields(BoostConfig)) | {'lambda'}
PARAM_KEYS = {
    'logit': frozenset({'l2'}),
    'logit_lasso': frozenset({'ebic_gamma', 'n_lambdas', 'min_ratio'}),
    'cart': BOOST_KEYS,
    'random_forest': BOOST_KEYS | {'n_trees', 'bootstrap'},
    'boost': BOOST_KEYS,
    'super_learner': frozenset({'inner_folds', 'n_trees'}),
}
CART_DEFAULTS = {'max_depth': 6, 'min_child_hessian': 5.0}
FOREST_DEFAULTS = {'max_depth': 8, 'min_child_hessian': 1.0, 'colsample': 0.5}
METRIC_COLUMNS = ('method', 'AUC', 'PR', 'F1-Score', 'BACC', 'R²', 'time_seconds')

Learner = Callable[[SupervisedTable, int], object]


def _tree_config(base: Dict, params: Dict) -> BoostConfig:
    values = dict(base)
    values.update({k: v for k, v in params.items() if k in BOOST_KEYS})
    return BoostConfig.from_dict(values)


def make_learner(spec: ModelSpec, boost_defaults: Optional[BoostConfig] = None) -> Learner:
    """
    Fit function (table, seed) -> model for a roster entry

    Raises:
        ConfigError: params the learner does not understand
    """
    boost_defaults = boost_defaults or BoostConfig()
    params = dict(spec.params)
    unknown = sorted(set(params) - PARAM_KEYS[spec.learner])
    if unknown:
        raise ConfigError(f"Model '{spec.name}' does not accept params {unknown}", model=spec.name)

    try:
        if spec.learner == 'logit':
            l2 = float(params.get('l2', 0.0))
            return lambda table, seed: fit_logit(table, l2=l2)

        if spec.learner == 'logit_lasso':
            return lambda table, seed: fit_logit_lasso(
                table, ebic_gamma=float(params.get('ebic_gamma', 0.5)),
                n_lambdas=int(params.get('n_lambdas', 50)), min_ratio=float(params.get('min_ratio', 1e-3)))

        if spec.learner == 'cart':
            config = _tree_config(CART_DEFAULTS, params)
            return lambda table, seed: fit_cart(table, config, seed=seed)

        if spec.learner == 'random_forest':
            config = _tree_config(FOREST_DEFAULTS, params)
            n_trees = int(params.get('n_trees', 100))
            bootstrap = bool(params.get('bootstrap', True))
            return lambda table, seed: fit_forest(table, config, n_trees=n_trees, seed=seed, bootstrap=bootstrap)

        if spec.learner == 'boost':
            config = _tree_config(boost_defaults.to_dict(), params)
            return lambda table, seed: fit_boosted(table, config, seed=seed)
    except DistressError as e:
        raise ConfigError(f"Model '{spec.name}': {e.message}", model=spec.name) from e

    # super_learner: convex stack of logit, CART, forest and booster on complete cases
    inner_folds = int(params.get('inner_folds', 5))
    members = [
        ('logit', make_learner(ModelSpec('logit', 'logit', sample='complete'))),
        ('cart', make_learner(ModelSpec('cart', 'cart', sample='complete'))),
        ('random_forest', make_learner(ModelSpec('random_forest', 'random_forest', sample='complete',
                                                 params={'n_trees': int(params.get('n_trees', 50))}))),
        ('xgboost', make_learner(ModelSpec('xgboost', 'boost', sample='complete',
                                           params={'missing_strategy': MissingStrategy.REQUIRE_COMPLETE.value}),
                                 boost_defaults)),
    ]
    return lambda table, seed: SuperLearner(members, inner_folds=inner_folds).fit(table, seed)


class FittedModel:
    """A roster model refitted on a full table, applying its training imputer before scoring"""

    def __init__(self, spec: ModelSpec, model, imputer: Optional[Imputer] = None):
        self.spec = spec
        self.model = model
        self.imputer = imputer

    def predict_proba(self, data) -> np.ndarray:
        X = data.X if isinstance(data, SupervisedTable) else np.asarray(data, dtype=float)
        if self.imputer is not None:
            X = self.imputer.transform(X)
        return np.asarray(self.model.predict_proba(X), dtype=float)


def fit_full(spec: ModelSpec, table: SupervisedTable, boost_defaults: Optional[BoostConfig] = None,
             seed: int = 0) -> Tuple[FittedModel, SupervisedTable]:
    """
    Fit one roster model on every usable row

    Returns:
        The fitted model and the rows it was trained on, still carrying NaN where
        an imputer fills them at scoring time
    """
    rows = table.complete_case() if spec.sample == 'complete' else table
    imputer = Imputer(spec.impute).fit(rows.X, rows.feature_names) if spec.impute is not None else None
    train = imputer.transform_table(rows) if imputer is not None else rows
    model = make_learner(spec, boost_defaults)(train, seed)
    return FittedModel(spec, model, imputer), rows


@dataclass
class FoldOutcome:
    model: str
    fold: int
    rows: np.ndarray
    probabilities: Optional[np.ndarray]
    seconds: float
    error: Optional[str] = None


def _run_fold(spec: ModelSpec, boost_defaults: BoostConfig, table: SupervisedTable, fold: int,
              train_rows: np.ndarray, test_rows: np.ndarray, seed: int) -> FoldOutcome:
    if spec.sample == 'complete':
        complete = table.complete_rows
        train_rows = train_rows[complete[train_rows]]
        test_rows = test_rows[complete[test_rows]]
    train, test = table.subset(train_rows), table.subset(test_rows)
    if spec.impute is not None:
        imputer = Imputer(spec.impute).fit(train.X, train.feature_names)
        train, test = imputer.transform_table(train), imputer.transform_table(test)

    started = time.perf_counter()
    try:
        model = make_learner(spec, boost_defaults)(train, seed)
        probabilities = np.asarray(model.predict_proba(test), dtype=float)
    except ConfigError:
        raise
    except DistressError as e:
        logger.warning("%s failed on fold %d: %s", spec.name, fold, e.message)
        return FoldOutcome(spec.name, fold, test_rows, None, time.perf_counter() - started, e.code)
    return FoldOutcome(spec.name, fold, test_rows, probabilities, time.perf_counter() - started)


@dataclass
class HorseRaceResult:
    """
    Args:
        metrics: One row per model in the horse-race layout
        fold_metrics: Per (model, fold) metrics
        outcomes: model -> fold outcomes in fold order
        curves: Long table of mean ROC/PR curves (model, curve, x, y)
    """
    table: SupervisedTable
    plan: FoldPlan
    metrics: pd.DataFrame
    fold_metrics: pd.DataFrame
    outcomes: Dict[str, List[FoldOutcome]]
    curves: pd.DataFrame = field(default_factory=pd.DataFrame)

    def out_of_fold(self, model: str) -> pd.DataFrame:
        """Held-out predictions with firm, year, label and fold"""
        rows, probabilities, folds = [], [], []
        for outcome in self.outcomes[model]:
            if outcome.probabilities is None:
                continue
            rows.append(outcome.rows)
            probabilities.append(outcome.probabilities)
            folds.append(np.full(len(outcome.rows), outcome.fold))
        if not rows:
            return pd.DataFrame(columns=['firm_id', 'year', 'probability', 'failed', 'fold', 'model'])
        rows = np.concatenate(rows)
        order = np.argsort(rows, kind='mergesort')
        rows = rows[order]
        return pd.DataFrame({
            'firm_id': self.table.firm_ids[rows],
            'year': self.table.years[rows],
            'probability': np.concatenate(probabilities)[order],
            'failed': self.table.y[rows].astype(int),
            'fold': np.concatenate(folds)[order],
            'model': model,
        })

    def risk_panel(self, model: str) -> RiskPanel:
        frame = self.out_of_fold(model)
        return RiskPanel(frame['firm_id'].to_numpy(), frame['year'].to_numpy(), frame['probability'].to_numpy(),
                         frame['failed'].to_numpy(), source=model, folds=frame['fold'].to_numpy())


def model_fold_seeds(seed: int, name: str, n_folds: int) -> List[int]:
    """Per-fold seeds keyed by model name, so a model's folds do not depend on the rest of the roster"""
    root = np.random.SeedSequence([seed, zlib.crc32(name.encode('utf-8'))])
    return [int(child.generate_state(1)[0]) for child in root.spawn(n_folds)]


def _summarize(name: str, outcomes: Sequence[FoldOutcome], table: SupervisedTable,
               timings: bool) -> Tuple[Dict, List[Dict]]:
    reports, fold_rows = [], []
    for outcome in outcomes:
        row = {'method': name, 'fold': outcome.fold, 'n_test': len(outcome.rows), 'error': outcome.error}
        if outcome.probabilities is not None:
            try:
                report = evaluate(outcome.probabilities, table.y[outcome.rows])
            except DistressError as e:
                logger.warning("%s fold %d cannot be scored: %s", name, outcome.fold, e.message)
                row['error'] = e.code
            else:
                reports.append(report)
                row.update({k: v for k, v in report.to_row(name).items() if k not in ('method', 'time_seconds')})
        fold_rows.append(row)
    seconds = sum(outcome.seconds for outcome in outcomes) if timings else None
    if not reports:
        return {column: (name if column == 'method' else None) for column in METRIC_COLUMNS}, fold_rows
    return average_reports(reports).to_row(name, seconds), fold_rows


def _curves(name: str, outcomes: Sequence[FoldOutcome], table: SupervisedTable) -> pd.DataFrame:
    folds = [(o.probabilities, table.y[o.rows]) for o in outcomes
             if o.probabilities is not None and 0 < table.y[o.rows].sum() < len(o.rows)]
    if not folds:
        return pd.DataFrame(columns=['model', 'curve', 'x', 'y'])
    roc = mean_roc_curve(folds).assign(model=name, curve='roc')
    pr = mean_pr_curve(folds).assign(model=name, curve='pr')
    return pd.concat([roc, pr], ignore_index=True)[['model', 'curve', 'x', 'y']]


def run_horse_race(table: SupervisedTable, specs: Sequence[ModelSpec], plan: FoldPlan,
                   boost_defaults: Optional[BoostConfig] = None, seed: int = 0, n_jobs: int = 1,
                   timings: bool = False, curve_models: Optional[Sequence[str]] = None) -> HorseRaceResult:
    """
    Evaluate every model on the same folds

    Complete-case models train and test on the complete rows of each fold; the
    others see every row. (model, fold) pairs run in parallel up to n_jobs and are
    reassembled in roster order, so the result does not depend on n_jobs.
    Folds that raise a toolkit error are logged and left out of the average.
    """
    boost_defaults = boost_defaults or BoostConfig()
    for spec in specs:
        make_learner(spec, boost_defaults)
    seeds = [model_fold_seeds(seed, spec.name, plan.k) for spec in specs]
    splits = list(plan.splits())
    tasks = [(m, f) for m in range(len(specs)) for f in range(plan.k)]
    results = Parallel(n_jobs=n_jobs)(
        delayed(_run_fold)(specs[m], boost_defaults, table, f, splits[f][0], splits[f][1], seeds[m][f])
        for m, f in tasks)

    outcomes: Dict[str, List[FoldOutcome]] = {spec.name: [] for spec in specs}
    for outcome in results:
        outcomes[outcome.model].append(outcome)

    rows, fold_rows, curves = [], [], []
    curve_models = set(curve_models) if curve_models is not None else set(outcomes)
    for spec in specs:
        row, per_fold = _summarize(spec.name, outcomes[spec.name], table, timings)
        rows.append(row)
        fold_rows.extend(per_fold)
        if spec.name in curve_models:
            curves.append(_curves(spec.name, outcomes[spec.name], table))
        logger.info("%s: AUC %s, PR %s", spec.name, row['AUC'], row['PR'])

    return HorseRaceResult(
        table=table,
        plan=plan,
        metrics=pd.DataFrame(rows, columns=list(METRIC_COLUMNS)),
        fold_metrics=pd.DataFrame(fold_rows),
        outcomes=outcomes,
        curves=pd.concat(curves, ignore_index=True) if curves else pd.DataFrame(columns=['model', 'curve', 'x', 'y']),
    )
