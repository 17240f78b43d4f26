"""
Proxy credit scores
Altman-style linear Z-score, Merton distance-to-default and the percentile-cutoff
precision report used to compare them with the learned models
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import norm

from errors import ArityMismatch, BadDomain, MissingInput
from panel_data import FoldPlan

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LinearScoreSpec:
    ratio_names: Tuple[str, ...]
    weights: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, 'ratio_names', tuple(self.ratio_names))
        object.__setattr__(self, 'weights', tuple(float(w) for w in self.weights))
        if len(self.ratio_names) != len(self.weights):
            raise ArityMismatch(f"{len(self.ratio_names)} ratios but {len(self.weights)} weights")
        if not all(math.isfinite(w) for w in self.weights):
            raise ValueError("Score weights must be finite")


# Altman (1968): WC/TA, RE/TA, EBIT/TA, MVE/TL, Sales/TA
ALTMAN_SPEC = LinearScoreSpec(
    ratio_names=('wc_ta', 're_ta', 'ebit_ta', 'mve_tl', 'sales_ta'),
    weights=(1.2, 1.4, 3.3, 0.6, 1.0),
)


def z_score(ratios: Sequence[Optional[float]], spec: LinearScoreSpec = ALTMAN_SPEC) -> float:
    """Weighted sum of ratios; lower means more distressed"""
    if len(ratios) != len(spec.weights):
        raise ArityMismatch(f"Expected {len(spec.weights)} ratios, got {len(ratios)}")
    if any(r is None or (isinstance(r, float) and math.isnan(r)) for r in ratios):
        raise MissingInput("Z-score needs every ratio observed")
    return float(np.dot(np.asarray(ratios, dtype=float), np.asarray(spec.weights)))


def z_scores(frame: pd.DataFrame, spec: LinearScoreSpec = ALTMAN_SPEC) -> np.ndarray:
    """Row-wise z_score over the ratio columns named by `spec`"""
    values = frame.loc[:, list(spec.ratio_names)].to_numpy(dtype=float)
    if np.isnan(values).any():
        raise MissingInput("Z-score needs every ratio observed",
                           n_missing=int(np.isnan(values).sum()))
    return values @ np.asarray(spec.weights)


ArrayLike = Union[float, np.ndarray]


def distance_to_default(asset_value: ArrayLike, debt: ArrayLike, drift: ArrayLike, volatility: ArrayLike,
                        horizon: ArrayLike = 1.0) -> ArrayLike:
    """
    Merton distance-to-default

    DtD = [ln(V/D) + (mu - sigma^2/2) T] / (sigma sqrt(T)); higher is safer.
    """
    V, D, mu, sigma, T = (np.asarray(x, dtype=float) for x in (asset_value, debt, drift, volatility, horizon))
    for name, value in (('asset_value', V), ('debt', D), ('volatility', sigma), ('horizon', T)):
        if not np.all(value > 0):
            raise BadDomain(f"{name} must be positive", field=name)
    dtd = (np.log(V / D) + (mu - 0.5 * sigma ** 2) * T) / (sigma * np.sqrt(T))
    return float(dtd) if np.ndim(dtd) == 0 else dtd


def default_probability(dtd: ArrayLike) -> ArrayLike:
    """Merton PD = Phi(-DtD)"""
    pd_ = norm.cdf(-np.asarray(dtd, dtype=float))
    return float(pd_) if np.ndim(pd_) == 0 else pd_


class Direction(str, Enum):
    LOW_IS_RISKY = 'LowIsRisky'
    HIGH_IS_RISKY = 'HighIsRisky'


def nearest_rank_cutoff(values: np.ndarray, percentile: float, direction: Direction) -> float:
    """ceil(p/100 * n)-th smallest (LowIsRisky) or largest (HighIsRisky) value"""
    ordered = np.sort(np.asarray(values, dtype=float))
    if len(ordered) == 0:
        raise ValueError("Cutoffs need at least one in-sample score")
    rank = max(1, math.ceil(percentile / 100.0 * len(ordered)))
    if Direction(direction) is Direction.LOW_IS_RISKY:
        return float(ordered[rank - 1])
    return float(ordered[len(ordered) - rank])


def _flagged(scores: np.ndarray, cutoff: float, direction: Direction) -> np.ndarray:
    if direction is Direction.LOW_IS_RISKY:
        return scores <= cutoff
    return scores >= cutoff


def percentile_cutoff_report(scores, labels, direction: Direction = Direction.LOW_IS_RISKY,
                             percentiles: Iterable[int] = range(1, 11),
                             in_sample_scores=None) -> pd.DataFrame:
    """
    Precision and false discovery rate when the riskiest p% of in-sample scores
    define the failure cutoff

    The cutoff is the nearest-rank p-th smallest in-sample score (LowIsRisky) or
    p-th largest (HighIsRisky), and firms at the cutoff are predicted to fail:
    flags are score <= cutoff or score >= cutoff. Ties at the cutoff are all
    flagged, so a row can hold more than p% of the scores.

    Args:
        scores: Scores to classify
        labels: Realized failures for `scores`
        direction: Whether low or high scores signal risk
        percentiles: Cutoff percentiles, 1..10 by default
        in_sample_scores: Scores the cutoffs are taken from; defaults to `scores`

    Returns:
        DataFrame with percentile, cutoff, n_predicted, precision, fdr. Rows whose
        prediction set is empty carry NaN precision and fdr.
    """
    direction = Direction(direction)
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(np.int64)
    reference = scores if in_sample_scores is None else np.asarray(in_sample_scores, dtype=float)
    rows = []
    for p in percentiles:
        cutoff = nearest_rank_cutoff(reference, p, direction)
        flagged = _flagged(scores, cutoff, direction)
        n_predicted = int(flagged.sum())
        true_positives = int(labels[flagged].sum())
        precision = true_positives / n_predicted if n_predicted else np.nan
        rows.append({
            'percentile': int(p),
            'cutoff': cutoff,
            'n_predicted': n_predicted,
            'precision': precision,
            'fdr': 1.0 - precision if n_predicted else np.nan,
        })
    return pd.DataFrame(rows)


def cross_validated_cutoff_report(scores, labels, plan: FoldPlan, direction: Direction = Direction.LOW_IS_RISKY,
                                  percentiles: Iterable[int] = range(1, 11)) -> pd.DataFrame:
    """Cutoffs from each training fold applied to its held-out fold; counts pooled over folds"""
    direction = Direction(direction)
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(np.int64)
    percentiles = list(percentiles)
    predicted = np.zeros(len(percentiles), dtype=np.int64)
    hits = np.zeros(len(percentiles), dtype=np.int64)
    for train_rows, test_rows in plan.splits():
        for k, p in enumerate(percentiles):
            cutoff = nearest_rank_cutoff(scores[train_rows], p, direction)
            flagged = _flagged(scores[test_rows], cutoff, direction)
            predicted[k] += int(flagged.sum())
            hits[k] += int(labels[test_rows][flagged].sum())
    precision = np.where(predicted > 0, hits / np.maximum(predicted, 1), np.nan)
    return pd.DataFrame({
        'percentile': percentiles,
        'n_predicted': predicted,
        'precision': precision,
        'fdr': 1.0 - precision,
    })


@dataclass(frozen=True)
class MertonColumns:
    """Truth/panel columns holding the Merton inputs"""
    asset_value: str = 'asset_value'
    debt: str = 'debt'
    drift: str = 'asset_drift'
    volatility: str = 'asset_vol'
    horizon: float = 1.0


def proxy_scores(frame: pd.DataFrame, spec: LinearScoreSpec = ALTMAN_SPEC,
                 merton: Optional[MertonColumns] = None) -> pd.DataFrame:
    """Z-score, distance-to-default and Merton PD per row of `frame`"""
    merton = merton or MertonColumns()
    dtd = distance_to_default(frame[merton.asset_value].to_numpy(float), frame[merton.debt].to_numpy(float),
                              frame[merton.drift].to_numpy(float), frame[merton.volatility].to_numpy(float),
                              merton.horizon)
    out = pd.DataFrame({
        'z_score': z_scores(frame, spec),
        'dtd': dtd,
        'merton_pd': default_probability(dtd),
    }, index=frame.index)
    return out
