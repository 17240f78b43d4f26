"""
Shapley attribution
Exact and permutation-sampled Shapley values over an arbitrary payoff, the
interventional AUC payoff for fitted failure models, and group aggregation
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from errors import TooFewPermutations, TooManyFeatures, UnlabeledFeature
from metrics import roc_auc
from panel_data import SupervisedTable

logger = logging.getLogger(__name__)

EXACT_LIMIT = 14
MIN_PERMUTATIONS = 30
MISSINGNESS_GROUP = 'Missingness'

Payoff = Callable[[FrozenSet[int]], float]


class InterventionalAUC:
    """
    v(S) = AUC of the model when players outside S are taken from a background row

    Each evaluation row is paired once with a background row, so v is deterministic.
    With missingness players, feature j contributes two players: its value and its
    missing bit. An inactive value is replaced by an observed background value; an
    inactive missing bit takes the background row's missing status.

    Args:
        model: Anything with predict_proba over a feature matrix with NaN
        X_eval, y_eval: Rows whose AUC is explained
        background: Rows used to neutralize inactive players
        feature_names: Names of the columns of X_eval
        include_missingness: Add one missing-bit player per feature
        seed: Seeds the eval-to-background pairing
    """

    def __init__(self, model, X_eval: np.ndarray, y_eval: np.ndarray, background: np.ndarray,
                 feature_names: Sequence[str], include_missingness: bool = False, seed: int = 0):
        self.model = model
        self.X_eval = np.asarray(X_eval, dtype=float)
        self.y_eval = np.asarray(y_eval)
        self.feature_names = tuple(feature_names)
        self.include_missingness = include_missingness
        n, p = self.X_eval.shape
        background = np.asarray(background, dtype=float)
        pairing_stream, fill_stream = np.random.SeedSequence(seed).spawn(2)
        pairs = np.random.Generator(np.random.PCG64(pairing_stream)).integers(0, len(background), size=n)
        self.X_background = background[pairs]

        # observed values standing in when a feature is present but its value player is inactive
        fill_rng = np.random.Generator(np.random.PCG64(fill_stream))
        self.X_fill = np.zeros((n, p))
        for j in range(p):
            observed = background[~np.isnan(background[:, j]), j]
            if len(observed):
                self.X_fill[:, j] = observed[fill_rng.integers(0, len(observed), size=n)]
        self._cache: Dict[FrozenSet[int], float] = {}

    @property
    def n_features(self) -> int:
        return self.X_eval.shape[1]

    @property
    def n_players(self) -> int:
        return self.n_features * (2 if self.include_missingness else 1)

    @property
    def player_names(self) -> List[str]:
        names = list(self.feature_names)
        if self.include_missingness:
            names += [f"missing:{name}" for name in self.feature_names]
        return names

    def player_groups(self, group_labels: Optional[Mapping[str, str]] = None) -> Dict[str, str]:
        groups = {}
        for name in self.feature_names:
            groups[name] = group_labels.get(name, name) if group_labels else name
        if self.include_missingness:
            for name in self.feature_names:
                groups[f"missing:{name}"] = MISSINGNESS_GROUP
        return groups

    def masked_inputs(self, subset: FrozenSet[int]) -> np.ndarray:
        p = self.n_features
        X = self.X_background.copy()
        if not self.include_missingness:
            for j in subset:
                X[:, j] = self.X_eval[:, j]
            return X
        for j in range(p):
            value_active = j in subset
            mask_active = (j + p) in subset
            if not value_active and not mask_active:
                continue
            missing = np.isnan(self.X_eval[:, j]) if mask_active else np.isnan(self.X_background[:, j])
            if value_active:
                values = np.where(np.isnan(self.X_eval[:, j]), self.X_fill[:, j], self.X_eval[:, j])
            else:
                values = np.where(np.isnan(self.X_background[:, j]), self.X_fill[:, j], self.X_background[:, j])
            X[:, j] = np.where(missing, np.nan, values)
        return X

    def __call__(self, subset: FrozenSet[int]) -> float:
        subset = frozenset(subset)
        if subset not in self._cache:
            probabilities = self.model.predict_proba(self.masked_inputs(subset))
            self._cache[subset] = roc_auc(probabilities, self.y_eval)
        return self._cache[subset]


@dataclass
class ShapleyReport:
    player_names: List[str]
    phi: np.ndarray
    v_full: float
    v_empty: float
    se: Optional[np.ndarray] = None
    contributions: Optional[np.ndarray] = field(default=None, repr=False)
    groups: Optional[Dict[str, str]] = None

    @property
    def efficiency_gap(self) -> float:
        return float(self.phi.sum() - (self.v_full - self.v_empty))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'feature': self.player_names,
            'phi': self.phi,
            'se': self.se if self.se is not None else np.full(len(self.phi), np.nan),
            'group': [self.groups.get(name) if self.groups else None for name in self.player_names],
        })


def _player_names(v, q: int, names: Optional[Sequence[str]]) -> List[str]:
    if names is not None:
        return list(names)
    if hasattr(v, 'player_names'):
        return list(v.player_names)
    return [f"x{m}" for m in range(q)]


def shapley_exact(v: Payoff, q: int, names: Optional[Sequence[str]] = None) -> ShapleyReport:
    """
    phi_m = sum over S without m of |S|!(q-|S|-1)!/q! [v(S + m) - v(S)]

    Evaluates v on all 2^q coalitions, so q is capped at 14.
    """
    if q > EXACT_LIMIT:
        raise TooManyFeatures(f"Exact Shapley values enumerate 2^q coalitions; q={q} exceeds {EXACT_LIMIT}",
                              q=q, limit=EXACT_LIMIT)
    masks = np.arange(1 << q)
    values = np.array([v(frozenset(m for m in range(q) if mask >> m & 1)) for mask in masks], dtype=float)
    sizes = np.array([bin(mask).count('1') for mask in masks])
    weights = np.array([math.factorial(s) * math.factorial(q - s - 1) / math.factorial(q) if s < q else 0.0
                        for s in range(q + 1)])
    phi = np.empty(q)
    for m in range(q):
        bit = 1 << m
        without = masks[(masks & bit) == 0]
        phi[m] = np.sum(weights[sizes[without]] * (values[without | bit] - values[without]))
    return ShapleyReport(player_names=_player_names(v, q, names), phi=phi,
                         v_full=float(values[-1]), v_empty=float(values[0]))


def _permutation_contributions(v: Payoff, order: np.ndarray) -> np.ndarray:
    contributions = np.empty(len(order))
    coalition = set()
    previous = v(frozenset())
    for m in order:
        coalition.add(int(m))
        current = v(frozenset(coalition))
        contributions[m] = current - previous
        previous = current
    return contributions


def shapley_sampled(v: Payoff, q: int, n_permutations: int = 200, seed: int = 0, n_jobs: int = 1,
                    names: Optional[Sequence[str]] = None) -> ShapleyReport:
    """
    Permutation-sampling estimate of the Shapley values

    Standard errors are the sample standard deviation of each player's marginal
    contributions over sqrt(n_permutations). Permutations are drawn up front from
    one seeded stream and results are combined by permutation index.
    """
    if n_permutations < MIN_PERMUTATIONS:
        raise TooFewPermutations(f"Need at least {MIN_PERMUTATIONS} permutations, got {n_permutations}",
                                 n_permutations=n_permutations)
    rng = np.random.Generator(np.random.PCG64(seed))
    orders = [rng.permutation(q) for _ in range(n_permutations)]
    if n_jobs == 1:
        rows = [_permutation_contributions(v, order) for order in orders]
    else:
        rows = Parallel(n_jobs=n_jobs)(delayed(_permutation_contributions)(v, order) for order in orders)
    contributions = np.vstack(rows)
    phi = contributions.mean(axis=0)
    se = contributions.std(axis=0, ddof=1) / np.sqrt(n_permutations)
    return ShapleyReport(player_names=_player_names(v, q, names), phi=phi, se=se,
                         v_full=float(v(frozenset(range(q)))), v_empty=float(v(frozenset())),
                         contributions=contributions)


def group_shapley(report: ShapleyReport, group_labels: Mapping[str, str]) -> pd.DataFrame:
    """
    Sum member values per group; groups appear in order of their first member

    Returns:
        DataFrame with group, phi, se (NaN in exact mode), n_members
    """
    unlabeled = [name for name in report.player_names if name not in group_labels]
    if unlabeled:
        raise UnlabeledFeature(f"Players without a group: {unlabeled}", players=str(unlabeled))
    order: List[str] = []
    for name in report.player_names:
        if group_labels[name] not in order:
            order.append(group_labels[name])
    rows = []
    for group in order:
        members = [k for k, name in enumerate(report.player_names) if group_labels[name] == group]
        se = np.nan
        if report.contributions is not None:
            sums = report.contributions[:, members].sum(axis=1)
            se = float(sums.std(ddof=1) / np.sqrt(len(sums)))
        rows.append({'group': group, 'phi': float(report.phi[members].sum()), 'se': se,
                     'n_members': len(members)})
    return pd.DataFrame(rows)


def explain_model(model, table: SupervisedTable, group_labels: Optional[Mapping[str, str]] = None,
                  background_size: int = 256, eval_size: int = 2000, include_missingness: bool = True,
                  n_permutations: int = 200, exact_limit: int = 10, seed: int = 0,
                  n_jobs: int = 1) -> ShapleyReport:
    """
    Attribute a fitted model's AUC on `table` to its features (and missing bits)

    Exact enumeration is used while the player count is at most exact_limit,
    permutation sampling beyond that.
    """
    background_stream, eval_stream, payoff_stream, sample_stream = np.random.SeedSequence(seed).spawn(4)
    n = len(table)
    background_rows = np.random.Generator(np.random.PCG64(background_stream)).choice(
        n, size=min(background_size, n), replace=False)
    eval_rows = np.sort(np.random.Generator(np.random.PCG64(eval_stream)).choice(
        n, size=min(eval_size, n), replace=False))
    payoff = InterventionalAUC(model, table.X[eval_rows], table.y[eval_rows], table.X[background_rows],
                               table.feature_names, include_missingness=include_missingness,
                               seed=int(payoff_stream.generate_state(1)[0]))
    q = payoff.n_players
    if q <= min(exact_limit, EXACT_LIMIT):
        report = shapley_exact(payoff, q)
    else:
        report = shapley_sampled(payoff, q, n_permutations=n_permutations,
                                 seed=int(sample_stream.generate_state(1)[0]), n_jobs=n_jobs)
    report.groups = payoff.player_groups(group_labels)
    logger.info("Shapley attribution over %d players: v(full)=%.4f v(empty)=%.4f",
                q, report.v_full, report.v_empty)
    return report
