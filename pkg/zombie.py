"""
Zombie-firm identification
Per-year risk deciles, the Q indicator, the three-year persistence rule,
BACC cutoff scans, decile transition matrices and zombie share reports
"""

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Hashable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from credit_scores import Direction, nearest_rank_cutoff
from errors import EmptyUnion, MissingYearThresholds, NoPairs, OneClass, TooFewPredictions
from metrics import Confusion, f1_bacc

logger = logging.getLogger(__name__)

DECILES = tuple(range(1, 10))
TRANSITION_BINS = ('9th', '8th', '7th', '6th', 'below_6th')
OUTCOMES = ('fail', 'remain_zombie', 'lower_distress', 'no_distress')
DEFAULT_CUTOFF_GRID = tuple(round(0.50 + 0.01 * k, 2) for k in range(50))


@dataclass(frozen=True, eq=False)
class RiskPanel:
    """Predicted failure probability per firm-year with the realized outcome"""
    firm_ids: np.ndarray
    years: np.ndarray
    probabilities: np.ndarray
    failed: np.ndarray
    source: str = 'model'
    folds: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, 'firm_ids', np.asarray(self.firm_ids, dtype=object))
        object.__setattr__(self, 'years', np.asarray(self.years, dtype=np.int64))
        object.__setattr__(self, 'probabilities', np.asarray(self.probabilities, dtype=float))
        object.__setattr__(self, 'failed', np.asarray(self.failed, dtype=np.int64))
        if self.folds is not None:
            object.__setattr__(self, 'folds', np.asarray(self.folds, dtype=np.int64))
        n = len(self.firm_ids)
        if not (len(self.years) == len(self.probabilities) == len(self.failed) == n):
            raise ValueError("RiskPanel columns differ in length")
        if self.folds is not None and len(self.folds) != n:
            raise ValueError("Fold provenance must cover every row")
        if n and not ((self.probabilities > 0) & (self.probabilities < 1)).all():
            raise ValueError("Risk probabilities must lie strictly inside (0, 1)")
        if not np.isin(self.failed, (0, 1)).all():
            raise ValueError("failed must be 0 or 1")
        if len(set(zip(self.firm_ids.tolist(), self.years.tolist()))) != n:
            raise ValueError("(firm_id, year) pairs must be unique in a RiskPanel")

    def __len__(self) -> int:
        return len(self.firm_ids)

    @property
    def year_values(self) -> List[int]:
        return sorted(set(self.years.tolist()))

    def keys(self) -> List[Tuple[str, int]]:
        return list(zip(self.firm_ids.tolist(), self.years.tolist()))

    def with_probabilities(self, probabilities) -> 'RiskPanel':
        return RiskPanel(self.firm_ids, self.years, probabilities, self.failed, self.source, self.folds)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({'firm_id': self.firm_ids, 'year': self.years,
                              'probability': self.probabilities, 'failed': self.failed})
        if self.folds is not None:
            frame['fold'] = self.folds
        frame['source'] = self.source
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, source: Optional[str] = None) -> 'RiskPanel':
        folds = frame['fold'].to_numpy() if 'fold' in frame.columns else None
        if source is None:
            source = str(frame['source'].iloc[0]) if 'source' in frame.columns and len(frame) else 'model'
        return cls(frame['firm_id'].astype(str).to_numpy(), frame['year'].to_numpy(),
                   frame['probability'].to_numpy(), frame['failed'].to_numpy(), source, folds)


@dataclass
class DecileThresholds:
    """year -> (q_1, ..., q_9)"""
    by_year: Dict[int, np.ndarray]
    survivors_only: bool = False

    def threshold(self, year: int, decile: int) -> float:
        if year not in self.by_year:
            raise MissingYearThresholds(f"No decile thresholds for year {year}", year=year)
        return float(self.by_year[year][decile - 1])

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for year in sorted(self.by_year):
            row = {'year': year}
            row.update({f"q{j}": float(self.by_year[year][j - 1]) for j in DECILES})
            rows.append(row)
        return pd.DataFrame(rows)


def decile_thresholds(risk: RiskPanel, survivors_only: bool = False) -> DecileThresholds:
    """
    Nearest-rank 10th..90th percentiles of each year's predictions

    All predictions of a year count unless survivors_only, in which case firms
    failing that year are left out.
    """
    by_year = {}
    for year in risk.year_values:
        in_year = risk.years == year
        if survivors_only:
            in_year &= risk.failed == 0
        values = risk.probabilities[in_year]
        if len(values) < 10:
            raise TooFewPredictions(year, len(values))
        by_year[year] = np.array([nearest_rank_cutoff(values, 10 * j, Direction.LOW_IS_RISKY) for j in DECILES])
    return DecileThresholds(by_year, survivors_only)


def _year_thresholds(risk: RiskPanel, thresholds: DecileThresholds, decile: int) -> np.ndarray:
    missing = sorted(set(risk.year_values) - set(thresholds.by_year))
    if missing:
        raise MissingYearThresholds(f"No decile thresholds for years {missing}", years=str(missing))
    lookup = {year: values[decile - 1] for year, values in thresholds.by_year.items()}
    return np.array([lookup[year] for year in risk.years.tolist()], dtype=float)


def q_indicator(risk: RiskPanel, thresholds: DecileThresholds, decile: int = 9) -> np.ndarray:
    """Q = 1 when the prediction is at or above q_decile for its year and the firm survives"""
    if decile not in DECILES:
        raise ValueError(f"decile must be in 1..9, got {decile}")
    above = risk.probabilities >= _year_thresholds(risk, thresholds, decile)
    return (above & (risk.failed == 0)).astype(np.int8)


def _firm_year_order(risk: RiskPanel) -> List[int]:
    return sorted(range(len(risk)), key=lambda i: (risk.firm_ids[i], risk.years[i]))


def zombie_flags(risk: RiskPanel, thresholds: DecileThresholds, window: int = 3, decile: int = 9) -> np.ndarray:
    """
    Flag firm-years ending a run of `window` consecutive calendar years with Q = 1

    A missing year breaks the run. Flags roll: a firm keeps being flagged while
    the run continues.
    """
    if window < 1:
        raise ValueError("window must be at least 1")
    q = q_indicator(risk, thresholds, decile)
    flags = np.zeros(len(risk), dtype=np.int8)
    run = 0
    previous_firm, previous_year = None, None
    for i in _firm_year_order(risk):
        firm, year = risk.firm_ids[i], int(risk.years[i])
        continues = firm == previous_firm and year == previous_year + 1
        if q[i]:
            run = run + 1 if continues else 1
        else:
            run = 0
        flags[i] = run >= window
        previous_firm, previous_year = firm, year
    return flags


def flags_frame(risk: RiskPanel, flags: np.ndarray) -> pd.DataFrame:
    frame = pd.DataFrame({'firm_id': risk.firm_ids, 'year': risk.years, 'flag': np.asarray(flags, dtype=int)})
    return frame.sort_values(['firm_id', 'year'], kind='mergesort').reset_index(drop=True)


@dataclass
class CutoffScan:
    frame: pd.DataFrame
    best_cutoff: float
    best_bacc: float
    scale: str


def bacc_cutoff_scan(risk: RiskPanel, grid: Optional[Sequence[float]] = None, scale: str = 'quantile') -> CutoffScan:
    """
    Balanced accuracy of classifying failed = prediction >= cutoff over a grid

    With scale='quantile' (the default) each grid point c is mapped to the
    nearest-rank c-quantile of all predictions, so c is one minus the share of
    firm-years flagged. With scale='probability' c is compared with the
    predictions directly; for rare failures the optimum then sits near the
    failure rate, below the default grid.
    """
    if scale not in ('probability', 'quantile'):
        raise ValueError(f"Unknown scan scale '{scale}'")
    if len(risk) == 0 or risk.failed.min() == risk.failed.max():
        raise OneClass("BACC scan needs both failures and survivors")
    grid = DEFAULT_CUTOFF_GRID if grid is None else tuple(grid)
    rows = []
    for cutoff in grid:
        threshold = cutoff
        if scale == 'quantile':
            threshold = nearest_rank_cutoff(risk.probabilities, 100.0 * cutoff, Direction.LOW_IS_RISKY)
        confusion = Confusion.from_scores(risk.probabilities, risk.failed, threshold)
        rows.append({'cutoff': float(cutoff), 'threshold': float(threshold), 'bacc': f1_bacc(confusion).bacc})
    frame = pd.DataFrame(rows)
    best = int(np.argmax(frame['bacc'].to_numpy()))
    return CutoffScan(frame=frame, best_cutoff=float(frame['cutoff'].iloc[best]),
                      best_bacc=float(frame['bacc'].iloc[best]), scale=scale)


def risk_bins(risk: RiskPanel, thresholds: DecileThresholds) -> np.ndarray:
    """Transition bin label per row: 9th, 8th, 7th, 6th or below_6th"""
    labels = np.full(len(risk), TRANSITION_BINS[-1], dtype=object)
    for decile, label in zip((6, 7, 8, 9), ('6th', '7th', '8th', '9th')):
        labels[risk.probabilities >= _year_thresholds(risk, thresholds, decile)] = label
    return labels


def _next_year_index(risk: RiskPanel) -> Dict[int, int]:
    index = {key: i for i, key in enumerate(risk.keys())}
    following = {}
    for i, (firm, year) in enumerate(risk.keys()):
        j = index.get((firm, year + 1))
        if j is not None:
            following[i] = j
    return following


@dataclass
class TransitionMatrix:
    counts: pd.DataFrame
    shares: Dict[str, Dict[str, Fraction]]

    def to_frame(self) -> pd.DataFrame:
        """Row-stochastic shares as floats; rows without survivors are NaN"""
        rows = []
        for origin in TRANSITION_BINS:
            row = {'from': origin}
            total = int(self.counts.loc[origin].sum())
            for target in TRANSITION_BINS:
                row[target] = float(self.shares[origin][target]) if total else np.nan
            row['n'] = total
            rows.append(row)
        return pd.DataFrame(rows)


def decile_transition_matrix(risk: RiskPanel, thresholds: DecileThresholds) -> TransitionMatrix:
    """
    Counts and exact shares of moves between risk bins from t to t+1, over firms
    surviving both years
    """
    bins = risk_bins(risk, thresholds)
    counts = pd.DataFrame(0, index=list(TRANSITION_BINS), columns=list(TRANSITION_BINS), dtype=np.int64)
    n_pairs = 0
    for i, j in _next_year_index(risk).items():
        if risk.failed[i] == 0 and risk.failed[j] == 0:
            counts.loc[bins[i], bins[j]] += 1
            n_pairs += 1
    if n_pairs == 0:
        raise NoPairs("No firm survives two consecutive years; transitions are undefined")
    shares = {}
    for origin in TRANSITION_BINS:
        total = int(counts.loc[origin].sum())
        shares[origin] = {target: (Fraction(int(counts.loc[origin, target]), total) if total else Fraction(0))
                          for target in TRANSITION_BINS}
    return TransitionMatrix(counts=counts, shares=shares)


def zombie_outcome_transitions(risk: RiskPanel, flags: np.ndarray, thresholds: DecileThresholds) -> pd.DataFrame:
    """
    What happens to year-t zombies in t+1: fail, remain zombie, lower distress
    (6th to 9th decile) or no distress (below the 6th)

    Zombies without a t+1 record, including every zombie of the final year, are left out.
    """
    flags = np.asarray(flags)
    bins = risk_bins(risk, thresholds)
    tallies: Dict[int, Dict[str, int]] = {}
    for i, j in _next_year_index(risk).items():
        if not flags[i]:
            continue
        if risk.failed[j]:
            outcome = 'fail'
        elif flags[j]:
            outcome = 'remain_zombie'
        elif bins[j] != 'below_6th':
            outcome = 'lower_distress'
        else:
            outcome = 'no_distress'
        year_tally = tallies.setdefault(int(risk.years[i]), dict.fromkeys(OUTCOMES, 0))
        year_tally[outcome] += 1
    rows = []
    for year in sorted(tallies):
        total = sum(tallies[year].values())
        row = {'year': year, 'n_zombies': total}
        row.update({outcome: tallies[year][outcome] / total for outcome in OUTCOMES})
        rows.append(row)
    return pd.DataFrame(rows, columns=['year', 'n_zombies', *OUTCOMES])


def zombie_share_series(risk: RiskPanel, flags: np.ndarray) -> pd.DataFrame:
    """Zombies over active (surviving) firms, per year"""
    flags = np.asarray(flags)
    rows = []
    for year in risk.year_values:
        active = (risk.years == year) & (risk.failed == 0)
        n_active = int(active.sum())
        n_zombies = int(flags[active].sum())
        rows.append({'year': year, 'n_active': n_active, 'n_zombies': n_zombies,
                     'share': n_zombies / n_active if n_active else 0.0})
    return pd.DataFrame(rows)


def zombie_share_by_group(risk: RiskPanel, flags: np.ndarray, groups: Mapping[Tuple[str, int], Hashable],
                          name: str = 'group') -> pd.DataFrame:
    """Pooled zombie share per group (e.g. region or industry)"""
    flags = np.asarray(flags)
    labels = np.array([groups.get(key) for key in risk.keys()], dtype=object)
    rows = []
    for group in sorted({g for g in labels.tolist() if g is not None}):
        active = (labels == group) & (risk.failed == 0)
        n_active = int(active.sum())
        n_zombies = int(flags[active].sum())
        rows.append({name: group, 'n_active': n_active, 'n_zombies': n_zombies,
                     'share': n_zombies / n_active if n_active else 0.0})
    return pd.DataFrame(rows)


@dataclass(frozen=True)
class Overlap:
    common_support: float
    zombie_only: float
    indicator_only: float
    n_union: int


def overlap_report(flags, indicator) -> Overlap:
    """Shares of the union of flagged firm-years held by both, only zombies, only the indicator"""
    flags = np.asarray(flags).astype(bool)
    indicator = np.asarray(indicator).astype(bool)
    if flags.shape != indicator.shape:
        raise ValueError("Flags and indicator must cover the same firm-years")
    union = int((flags | indicator).sum())
    if union == 0:
        raise EmptyUnion("Neither zombie flags nor the indicator mark any firm-year")
    both = int((flags & indicator).sum())
    zombie_only = int((flags & ~indicator).sum())
    return Overlap(common_support=both / union, zombie_only=zombie_only / union,
                   indicator_only=(union - both - zombie_only) / union, n_union=union)


def overlap_by_group(risk: RiskPanel, flags, indicator, groups: Mapping[Tuple[str, int], Hashable],
                     name: str = 'group') -> pd.DataFrame:
    """overlap_report within each group; groups with an empty union are skipped"""
    flags = np.asarray(flags)
    indicator = np.asarray(indicator)
    labels = np.array([groups.get(key) for key in risk.keys()], dtype=object)
    rows = []
    for group in sorted({g for g in labels.tolist() if g is not None}):
        members = labels == group
        try:
            overlap = overlap_report(flags[members], indicator[members])
        except EmptyUnion:
            continue
        rows.append({name: group, 'common_support': overlap.common_support, 'zombie_only': overlap.zombie_only,
                     'indicator_only': overlap.indicator_only, 'n_union': overlap.n_union})
    return pd.DataFrame(rows)


@dataclass
class ZombieReport:
    thresholds: DecileThresholds
    flags: np.ndarray
    shares: pd.DataFrame
    transitions: TransitionMatrix
    outcomes: pd.DataFrame
    extras: Dict[str, pd.DataFrame] = field(default_factory=dict)


def analyze(risk: RiskPanel, decile: int = 9, window: int = 3, survivors_only: bool = False) -> ZombieReport:
    """Thresholds, flags, share series and both transition tables in one pass"""
    thresholds = decile_thresholds(risk, survivors_only=survivors_only)
    flags = zombie_flags(risk, thresholds, window=window, decile=decile)
    logger.info("Flagged %d zombie firm-years out of %d (%s)", int(flags.sum()), len(risk), risk.source)
    return ZombieReport(
        thresholds=thresholds,
        flags=flags,
        shares=zombie_share_series(risk, flags),
        transitions=decile_transition_matrix(risk, thresholds),
        outcomes=zombie_outcome_transitions(risk, flags, thresholds),
    )
