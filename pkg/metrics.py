"""
Evaluation metrics
Ranking scores, confusion-based scores, pseudo-R², chi-squared association tests
and missingness odds ratios for the failure models
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterator, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import chi2_contingency
from sklearn.metrics import (average_precision_score, confusion_matrix, precision_recall_curve,
                             roc_auc_score, roc_curve)

from baselines import fit_logit
from errors import DegenerateIndicator, NoPositives, OneClass, ZeroMargin
from panel_data import FirmPanel, SupervisedTable, lag_join

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5
# Upper 1% point of chi-squared with one degree of freedom
CHI2_CRITICAL_1PCT = 6.635
PROBABILITY_CLAMP = 1e-12


def _as_arrays(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).astype(np.int64).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels differ in length: {scores.shape[0]} vs {labels.shape[0]}")
    return scores, labels


def _require_both(labels: np.ndarray):
    if labels.size == 0 or labels.min() == labels.max():
        raise OneClass("Both outcomes must be present", n=int(labels.size))


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie)"""
    scores, labels = _as_arrays(scores, labels)
    _require_both(labels)
    return float(roc_auc_score(labels, scores))


def pr_auc(scores, labels) -> float:
    """Average precision, sum over thresholds of (R_i - R_{i-1}) P_i"""
    scores, labels = _as_arrays(scores, labels)
    if not labels.any():
        raise NoPositives("PR-AUC needs at least one positive label")
    return float(average_precision_score(labels, scores))


def log_loss(probabilities, labels) -> float:
    """Mean binary log-loss with probabilities clamped to [1e-12, 1 - 1e-12]"""
    p, y = _as_arrays(probabilities, labels)
    p = np.clip(p, PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def as_tuple(self) -> Tuple[int, int, int, int]:
        return (self.tp, self.fp, self.tn, self.fn)

    @classmethod
    def from_scores(cls, scores, labels, threshold: float = DEFAULT_THRESHOLD) -> 'Confusion':
        """Classify failed = score >= threshold"""
        scores, labels = _as_arrays(scores, labels)
        predicted = (scores >= threshold).astype(np.int64)
        tn, fp, fn, tp = confusion_matrix(labels, predicted, labels=[0, 1]).ravel()
        return cls(tp=int(tp), fp=int(fp), tn=int(tn), fn=int(fn))


@dataclass(frozen=True)
class BalancedScores:
    """F1 and balanced accuracy; `undefined` names terms whose denominator was zero"""
    f1: float
    bacc: float
    undefined: Tuple[str, ...] = ()

    def __iter__(self) -> Iterator[float]:
        yield self.f1
        yield self.bacc


def f1_bacc(confusion: Confusion) -> BalancedScores:
    tp, fp, tn, fn = confusion.as_tuple()
    if min(tp, fp, tn, fn) < 0:
        raise ValueError(f"Confusion counts must be nonnegative: {confusion}")
    undefined = []
    f1_denominator = 2 * tp + fp + fn
    if f1_denominator == 0:
        f1 = 0.0
        undefined.append('f1')
    else:
        f1 = 2.0 * tp / f1_denominator
    if tp + fn == 0:
        tpr = 0.0
        undefined.append('tpr')
    else:
        tpr = tp / (tp + fn)
    if tn + fp == 0:
        tnr = 0.0
        undefined.append('tnr')
    else:
        tnr = tn / (tn + fp)
    return BalancedScores(f1=f1, bacc=0.5 * (tpr + tnr), undefined=tuple(undefined))


def pseudo_r2(probabilities, labels) -> float:
    """Efron's R² = 1 - sum (y - p)^2 / sum (y - ybar)^2"""
    p, y = _as_arrays(probabilities, labels)
    _require_both(y)
    residual = np.sum((y - p) ** 2)
    total = np.sum((y - y.mean()) ** 2)
    return float(1.0 - residual / total)


@dataclass(frozen=True)
class ChiSquared:
    statistic: float
    reject_1pct: bool


def chi_squared_2x2(table) -> ChiSquared:
    """Pearson chi-squared on a 2x2 table without continuity correction"""
    observed = np.asarray(table, dtype=float)
    if observed.shape != (2, 2):
        raise ValueError(f"Expected a 2x2 table, got shape {observed.shape}")
    if (observed < 0).any():
        raise ValueError("Contingency cells must be nonnegative")
    if (observed.sum(axis=0) == 0).any() or (observed.sum(axis=1) == 0).any():
        raise ZeroMargin("Every row and column of the table needs a positive total",
                         table=observed.tolist())
    statistic = float(chi2_contingency(observed, correction=False)[0])
    return ChiSquared(statistic=statistic, reject_1pct=statistic > CHI2_CRITICAL_1PCT)


@dataclass
class MetricReport:
    auc: float
    pr_auc: float
    f1: float
    bacc: float
    pseudo_r2: float
    threshold_used: float
    confusion: Confusion
    undefined: Tuple[str, ...] = ()

    def to_row(self, method: str, time_seconds: Optional[float] = None) -> Dict:
        """Row in the horse-race table layout"""
        return {
            'method': method,
            'AUC': self.auc,
            'PR': self.pr_auc,
            'F1-Score': self.f1,
            'BACC': self.bacc,
            'R²': self.pseudo_r2,
            'time_seconds': time_seconds,
        }


def evaluate(probabilities, labels, threshold: float = DEFAULT_THRESHOLD) -> MetricReport:
    """All horse-race metrics for one set of predictions"""
    probabilities, labels = _as_arrays(probabilities, labels)
    confusion = Confusion.from_scores(probabilities, labels, threshold)
    scores = f1_bacc(confusion)
    return MetricReport(
        auc=roc_auc(probabilities, labels),
        pr_auc=pr_auc(probabilities, labels),
        f1=scores.f1,
        bacc=scores.bacc,
        pseudo_r2=pseudo_r2(probabilities, labels),
        threshold_used=threshold,
        confusion=confusion,
        undefined=scores.undefined,
    )


def average_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Fold average of the scalar metrics; confusion counts are summed"""
    if not reports:
        raise ValueError("No reports to average")
    def mean(attr):
        return float(np.mean([getattr(r, attr) for r in reports]))

    confusion = Confusion(*(sum(getattr(r.confusion, k) for r in reports) for k in ('tp', 'fp', 'tn', 'fn')))
    undefined = tuple(sorted({flag for r in reports for flag in r.undefined}))
    return MetricReport(auc=mean('auc'), pr_auc=mean('pr_auc'), f1=mean('f1'), bacc=mean('bacc'),
                        pseudo_r2=mean('pseudo_r2'), threshold_used=reports[0].threshold_used,
                        confusion=confusion, undefined=undefined)


# Curves

def roc_points(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    scores, labels = _as_arrays(scores, labels)
    _require_both(labels)
    fpr, tpr, _ = roc_curve(labels, scores, drop_intermediate=False)
    return fpr, tpr


def pr_points(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    """(recall, precision) in increasing recall order"""
    scores, labels = _as_arrays(scores, labels)
    if not labels.any():
        raise NoPositives("PR curve needs at least one positive label")
    precision, recall, _ = precision_recall_curve(labels, scores)
    return recall[::-1], precision[::-1]


def mean_roc_curve(folds: Sequence[Tuple[np.ndarray, np.ndarray]], grid: Optional[np.ndarray] = None) -> pd.DataFrame:
    """Vertical average of per-fold ROC curves on a common FPR grid"""
    grid = np.linspace(0.0, 1.0, 101) if grid is None else np.asarray(grid)
    curves = []
    for scores, labels in folds:
        fpr, tpr = roc_points(scores, labels)
        curve = np.interp(grid, fpr, tpr)
        curve[0] = 0.0
        curves.append(curve)
    return pd.DataFrame({'x': grid, 'y': np.mean(curves, axis=0)})


def mean_pr_curve(folds: Sequence[Tuple[np.ndarray, np.ndarray]], grid: Optional[np.ndarray] = None) -> pd.DataFrame:
    """Average interpolated precision (best precision at recall >= r) on a common recall grid"""
    grid = np.linspace(0.0, 1.0, 101) if grid is None else np.asarray(grid)
    curves = []
    for scores, labels in folds:
        recall, precision = pr_points(scores, labels)
        envelope = np.maximum.accumulate(precision[::-1])[::-1]
        idx = np.searchsorted(recall, grid, side='left')
        idx = np.minimum(idx, len(recall) - 1)
        curves.append(envelope[idx])
    return pd.DataFrame({'x': grid, 'y': np.mean(curves, axis=0)})


# Missingness diagnostics

def missing_window_indicators(panel: FirmPanel, window: int = 3) -> SupervisedTable:
    """
    Per supervised row (firm, t): for each predictor, 1 if it was missing at least once
    in the firm's records for t-1..t-window, paired with the failure outcome at t
    """
    if window < 1:
        raise ValueError("window must be at least 1")
    table = lag_join(panel)
    index = {record.key: i for i, record in enumerate(panel.records)}
    mask = panel.missing_matrix
    indicators = np.zeros((len(table), len(panel.feature_names)), dtype=bool)
    for row, (firm_id, year) in enumerate(zip(table.firm_ids, table.years)):
        for lag in range(1, window + 1):
            j = index.get((firm_id, int(year) - lag))
            if j is not None:
                indicators[row] |= mask[j]
    return SupervisedTable(firm_ids=table.firm_ids, years=table.years, X=indicators.astype(float),
                           mask=np.zeros_like(indicators), y=table.y,
                           feature_names=table.feature_names, dropped=table.dropped)


def missingness_odds_ratios(panel: FirmPanel, window: int = 3) -> pd.DataFrame:
    """
    Odds ratio of failure on the missing-at-least-once indicator, one logit per predictor

    Returns:
        DataFrame with feature, odds_ratio, coefficient, share_missing, n_rows
    """
    indicators = missing_window_indicators(panel, window)
    rows = []
    for j, name in enumerate(indicators.feature_names):
        column = indicators.X[:, j]
        if column.min() == column.max():
            raise DegenerateIndicator(f"Missing indicator for '{name}' is constant; odds ratio undefined",
                                      feature=name)
        model = fit_logit(SupervisedTable.from_arrays(column.reshape(-1, 1), indicators.y, [name]), l2=0.0)
        coefficient = float(model.coefficients[0])
        rows.append({
            'feature': name,
            'odds_ratio': float(np.exp(coefficient)),
            'coefficient': coefficient,
            'share_missing': float(column.mean()),
            'n_rows': int(len(column)),
        })
    logger.info("Fitted missingness odds ratios for %d predictors", len(rows))
    return pd.DataFrame(rows)


def missing_any_table(panel: FirmPanel) -> np.ndarray:
    """2x2 counts of (any feature missing at t-1) x (failed at t)"""
    table = lag_join(panel)
    missing_any = table.mask.any(axis=1).astype(np.int64)
    counts = np.zeros((2, 2), dtype=np.int64)
    np.add.at(counts, (missing_any, table.y.astype(np.int64)), 1)
    return counts


def missingness_chi_squared(panel: FirmPanel, window: int = 3) -> pd.DataFrame:
    """Per-predictor chi-squared of (missing within the window) x failure"""
    indicators = missing_window_indicators(panel, window)
    y = indicators.y.astype(np.int64)
    rows = []
    for j, name in enumerate(indicators.feature_names):
        counts = np.zeros((2, 2), dtype=np.int64)
        np.add.at(counts, (indicators.X[:, j].astype(np.int64), y), 1)
        try:
            result = chi_squared_2x2(counts)
            rows.append({'feature': name, 'statistic': result.statistic, 'reject_1pct': result.reject_1pct})
        except ZeroMargin:
            rows.append({'feature': name, 'statistic': np.nan, 'reject_1pct': False})
    return pd.DataFrame(rows)
