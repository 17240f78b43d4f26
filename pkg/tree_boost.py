"""
Missing-aware tree learner
Greedy second-order regression trees whose splits carry a missing-value policy
(learned default directions or MIA three-way enumeration), gradient boosting under
logistic loss, and a bagged forest built from the same tree grower
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from scipy.special import expit

from errors import ArityMismatch, BadConfig, DegenerateLabels, MissingNotAllowed
from metrics import PROBABILITY_CLAMP, log_loss
from panel_data import SupervisedTable

logger = logging.getLogger(__name__)


class MissingPolicy(str, Enum):
    """Where missing rows go at a split; declaration order is the tie-break order"""
    DEFAULT_LEFT = 'DefaultLeft'
    DEFAULT_RIGHT = 'DefaultRight'
    MISSING_IS_LEFT = 'MissingIsLeft'
    MISSING_IS_RIGHT = 'MissingIsRight'
    MISSING_ONLY = 'MissingOnly'


class MissingStrategy(str, Enum):
    DEFAULT_DIRECTIONS = 'DefaultDirections'
    MIA = 'MIA'
    REQUIRE_COMPLETE = 'RequireComplete'


_MISSING_GOES_LEFT = {MissingPolicy.DEFAULT_LEFT, MissingPolicy.MISSING_IS_LEFT, MissingPolicy.MISSING_ONLY}

_THRESHOLD_POLICIES = {
    MissingStrategy.DEFAULT_DIRECTIONS: (MissingPolicy.DEFAULT_LEFT, MissingPolicy.DEFAULT_RIGHT),
    MissingStrategy.MIA: (MissingPolicy.MISSING_IS_LEFT, MissingPolicy.MISSING_IS_RIGHT),
    MissingStrategy.REQUIRE_COMPLETE: (MissingPolicy.DEFAULT_LEFT,),
}


@dataclass(frozen=True)
class SplitRule:
    feature: int
    threshold: Optional[float]
    policy: MissingPolicy

    def goes_left(self, values: np.ndarray) -> np.ndarray:
        """Boolean mask of rows routed to the left child"""
        missing = np.isnan(values)
        if self.policy is MissingPolicy.MISSING_ONLY:
            return missing
        with np.errstate(invalid='ignore'):
            below = values < self.threshold
        if self.policy in _MISSING_GOES_LEFT:
            return below | missing
        return below & ~missing


@dataclass(frozen=True)
class Leaf:
    weight: float


@dataclass(frozen=True)
class Split:
    rule: SplitRule
    left: 'TreeNode'
    right: 'TreeNode'


TreeNode = Union[Leaf, Split]


@dataclass(frozen=True)
class BoostConfig:
    n_rounds: int = 100
    learning_rate: float = 0.1
    max_depth: int = 4
    lam: float = 1.0
    gamma: float = 0.0
    min_child_hessian: float = 1.0
    n_bins: int = 64
    subsample: float = 1.0
    colsample: float = 1.0
    missing_strategy: MissingStrategy = MissingStrategy.DEFAULT_DIRECTIONS

    def __post_init__(self):
        object.__setattr__(self, 'missing_strategy', MissingStrategy(self.missing_strategy))
        if self.n_rounds < 0:
            raise BadConfig("n_rounds must be nonnegative", field='n_rounds')
        if not 0.0 < self.learning_rate <= 1.0:
            raise BadConfig("learning_rate must lie in (0, 1]", field='learning_rate')
        if self.max_depth < 0:
            raise BadConfig("max_depth must be nonnegative", field='max_depth')
        if self.lam < 0 or self.gamma < 0 or self.min_child_hessian < 0:
            raise BadConfig("lam, gamma and min_child_hessian must be nonnegative")
        if self.n_bins < 2:
            raise BadConfig("n_bins must be at least 2", field='n_bins')
        if not 0.0 < self.subsample <= 1.0 or not 0.0 < self.colsample <= 1.0:
            raise BadConfig("subsample and colsample must lie in (0, 1]")

    @classmethod
    def from_dict(cls, values: Dict) -> 'BoostConfig':
        known = {f.name for f in fields(cls)}
        values = dict(values)
        if 'lambda' in values:
            values['lam'] = values.pop('lambda')
        unknown = set(values) - known
        if unknown:
            raise BadConfig(f"Unknown booster settings: {sorted(unknown)}", unknown=sorted(unknown))
        return cls(**values)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['missing_strategy'] = self.missing_strategy.value
        return data


def split_gain(grad_left: float, hess_left: float, grad_right: float, hess_right: float,
               lam: float, gamma: float) -> float:
    """
    Second-order gain of splitting a node

    gain = 1/2 [G_L^2/(H_L+lam) + G_R^2/(H_R+lam) - (G_L+G_R)^2/(H_L+H_R+lam)] - gamma,
    with any 0/0 term taken as 0.
    """
    gain = _gain_arrays(np.asarray([grad_left], dtype=float), np.asarray([hess_left], dtype=float),
                        np.asarray([grad_right], dtype=float), np.asarray([hess_right], dtype=float),
                        lam, gamma)
    return float(gain[0])


def _score(grad: np.ndarray, hess: np.ndarray, lam: float) -> np.ndarray:
    denominator = hess + lam
    return np.divide(grad * grad, denominator, out=np.zeros_like(grad), where=denominator > 0)


def _gain_arrays(gl, hl, gr, hr, lam, gamma) -> np.ndarray:
    return 0.5 * (_score(gl, hl, lam) + _score(gr, hr, lam) - _score(gl + gr, hl + hr, lam)) - gamma


def leaf_weight(grad_sum: float, hess_sum: float, lam: float) -> float:
    denominator = hess_sum + lam
    if grad_sum == 0 or denominator <= 0:
        return 0.0
    return float(-grad_sum / denominator)


def logistic_grad_hess(margin: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Log-loss derivatives w.r.t. the margin: g = p - y, h = p(1 - p)"""
    p = expit(margin)
    return p - y, p * (1.0 - p)


def logistic_loss(margin: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-row log-loss as a function of the margin"""
    return np.logaddexp(0.0, margin) - y * margin


class FeatureBinner:
    """
    Percentile split candidates per feature, fitted once on the root rows

    A feature with at most n_bins distinct observed values keeps every distinct value;
    otherwise edges are the lower-interpolated quantiles at k/n_bins. Observed values
    land in bins 0..len(edges); missing values get their own bin len(edges) + 1.
    """

    def __init__(self, n_bins: int = 64):
        self.n_bins = n_bins
        self.edges_: List[np.ndarray] = []

    def fit(self, X: np.ndarray) -> 'FeatureBinner':
        self.edges_ = []
        for j in range(X.shape[1]):
            column = X[:, j]
            observed = column[~np.isnan(column)]
            distinct = np.unique(observed)
            if len(distinct) <= self.n_bins:
                edges = distinct[:-1]
            else:
                quantiles = np.arange(1, self.n_bins) / self.n_bins
                edges = np.unique(np.quantile(observed, quantiles, method='lower'))
            self.edges_.append(edges)
        return self

    @property
    def n_observed_bins(self) -> List[int]:
        return [len(edges) + 1 for edges in self.edges_]

    def transform(self, X: np.ndarray) -> np.ndarray:
        bins = np.empty(X.shape, dtype=np.int64)
        for j, edges in enumerate(self.edges_):
            column = X[:, j]
            missing = np.isnan(column)
            bins[:, j] = np.searchsorted(edges, np.where(missing, 0.0, column), side='left')
            bins[missing, j] = len(edges) + 1
        return bins


@dataclass
class BinnedMatrix:
    X: np.ndarray
    bins: np.ndarray
    n_observed_bins: List[int]

    @classmethod
    def build(cls, X: np.ndarray, n_bins: int) -> 'BinnedMatrix':
        binner = FeatureBinner(n_bins).fit(X)
        return cls(X=X, bins=binner.transform(X), n_observed_bins=binner.n_observed_bins)


@dataclass(frozen=True)
class SplitCandidate:
    rule: SplitRule
    gain: float


def _threshold_between(values: np.ndarray, node_bins: np.ndarray, cut: int) -> float:
    observed = ~np.isnan(values)
    below = values[observed & (node_bins <= cut)].max()
    above = values[observed & (node_bins > cut)].min()
    midpoint = below + (above - below) / 2.0
    return float(midpoint) if below < midpoint < above else float(above)


def find_best_split(X: np.ndarray, grads: np.ndarray, hesses: np.ndarray, config: BoostConfig,
                    rows: Optional[np.ndarray] = None, binned: Optional[BinnedMatrix] = None,
                    features: Optional[Sequence[int]] = None) -> Optional[SplitCandidate]:
    """
    Gain-maximizing split of the node holding `rows`

    Candidates are every (feature, cut between occupied bins, missing policy) the
    strategy allows; MIA also offers a MissingOnly split per feature. Ties go to the
    lowest feature, then the lowest cut, then the policy order of MissingPolicy.

    Returns:
        SplitCandidate, or None when no candidate has positive gain
    """
    X = np.asarray(X, dtype=float)
    rows = np.arange(X.shape[0]) if rows is None else np.asarray(rows)
    binned = binned or BinnedMatrix.build(X, config.n_bins)
    features = range(X.shape[1]) if features is None else sorted(features)
    strategy = config.missing_strategy

    if strategy is MissingStrategy.REQUIRE_COMPLETE and np.isnan(X[np.ix_(rows, list(features))]).any():
        raise MissingNotAllowed("RequireComplete trees cannot split rows with missing values")
    if len(rows) < 2:
        return None
    g = grads[rows]
    h = hesses[rows]
    total_g = g.sum()
    total_h = h.sum()
    if total_h <= 0:
        return None

    policies = _THRESHOLD_POLICIES[strategy]
    lam, gamma, min_h = config.lam, config.gamma, config.min_child_hessian
    best: Optional[SplitCandidate] = None

    for j in features:
        node_bins = binned.bins[rows, j]
        n_obs_bins = binned.n_observed_bins[j]
        size = n_obs_bins + 1
        hist_g = np.bincount(node_bins, weights=g, minlength=size)
        hist_h = np.bincount(node_bins, weights=h, minlength=size)
        hist_c = np.bincount(node_bins, minlength=size)
        miss_g, miss_h, miss_c = hist_g[n_obs_bins], hist_h[n_obs_bins], hist_c[n_obs_bins]
        obs_c = hist_c[:n_obs_bins].sum()

        feature_best: Optional[SplitCandidate] = None
        if n_obs_bins > 1:
            cum_g = np.cumsum(hist_g[:n_obs_bins])[:-1]
            cum_h = np.cumsum(hist_h[:n_obs_bins])[:-1]
            cum_c = np.cumsum(hist_c[:n_obs_bins])[:-1]
            occupied = (cum_c > 0) & (cum_c < obs_c)
            gains = np.full((len(cum_g), len(policies)), -np.inf)
            for k, policy in enumerate(policies):
                if policy in _MISSING_GOES_LEFT:
                    gl, hl = cum_g + miss_g, cum_h + miss_h
                else:
                    gl, hl = cum_g, cum_h
                gr, hr = total_g - gl, total_h - hl
                valid = occupied & (hl >= min_h) & (hr >= min_h)
                gains[valid, k] = _gain_arrays(gl[valid], hl[valid], gr[valid], hr[valid], lam, gamma)
            flat = int(np.argmax(gains))
            cut, k = divmod(flat, len(policies))
            if np.isfinite(gains[cut, k]):
                threshold = _threshold_between(X[rows, j], node_bins, cut)
                feature_best = SplitCandidate(SplitRule(j, threshold, policies[k]), float(gains[cut, k]))

        if strategy is MissingStrategy.MIA and miss_c > 0 and obs_c > 0:
            hr = total_h - miss_h
            if miss_h >= min_h and hr >= min_h:
                gain = split_gain(miss_g, miss_h, total_g - miss_g, hr, lam, gamma)
                if feature_best is None or gain > feature_best.gain:
                    feature_best = SplitCandidate(SplitRule(j, None, MissingPolicy.MISSING_ONLY), gain)

        if feature_best is not None and (best is None or feature_best.gain > best.gain):
            best = feature_best

    if best is None or best.gain <= 0:
        return None
    return best


FeatureSampler = Callable[[], Sequence[int]]


def fit_tree(X: np.ndarray, grads: np.ndarray, hesses: np.ndarray, config: BoostConfig,
             rows: Optional[np.ndarray] = None, binned: Optional[BinnedMatrix] = None,
             features: Optional[Sequence[int]] = None,
             feature_sampler: Optional[FeatureSampler] = None) -> TreeNode:
    """
    Grow one tree depth-wise on the second-order objective

    Leaves carry -G/(H+lam) for their rows. `feature_sampler`, when given, picks the
    candidate features afresh at every node (forest mode); otherwise `features` is
    used throughout.
    """
    X = np.asarray(X, dtype=float)
    rows = np.arange(X.shape[0]) if rows is None else np.asarray(rows)
    binned = binned or BinnedMatrix.build(X, config.n_bins)

    def grow(node_rows: np.ndarray, depth: int) -> TreeNode:
        weight = leaf_weight(grads[node_rows].sum(), hesses[node_rows].sum(), config.lam)
        if depth >= config.max_depth or len(node_rows) < 2:
            return Leaf(weight)
        candidates = feature_sampler() if feature_sampler is not None else features
        best = find_best_split(X, grads, hesses, config, rows=node_rows, binned=binned, features=candidates)
        if best is None:
            return Leaf(weight)
        left = best.rule.goes_left(X[node_rows, best.rule.feature])
        return Split(best.rule, grow(node_rows[left], depth + 1), grow(node_rows[~left], depth + 1))

    return grow(rows, 0)


def predict_tree(tree: TreeNode, X: np.ndarray) -> np.ndarray:
    out = np.empty(X.shape[0])

    def assign(node: TreeNode, idx: np.ndarray):
        if isinstance(node, Leaf):
            out[idx] = node.weight
            return
        left = node.rule.goes_left(X[idx, node.rule.feature])
        assign(node.left, idx[left])
        assign(node.right, idx[~left])

    assign(tree, np.arange(X.shape[0]))
    return out


def tree_depth(tree: TreeNode) -> int:
    if isinstance(tree, Leaf):
        return 0
    return 1 + max(tree_depth(tree.left), tree_depth(tree.right))


def iter_leaves(tree: TreeNode):
    if isinstance(tree, Leaf):
        yield tree
    else:
        yield from iter_leaves(tree.left)
        yield from iter_leaves(tree.right)


def node_to_dict(node: TreeNode) -> Dict:
    if isinstance(node, Leaf):
        return {'leaf': node.weight}
    return {
        'feature': node.rule.feature,
        'threshold': node.rule.threshold,
        'policy': node.rule.policy.value,
        'left': node_to_dict(node.left),
        'right': node_to_dict(node.right),
    }


def node_from_dict(data: Dict) -> TreeNode:
    if 'leaf' in data:
        return Leaf(float(data['leaf']))
    threshold = data['threshold']
    rule = SplitRule(int(data['feature']), None if threshold is None else float(threshold),
                     MissingPolicy(data['policy']))
    return Split(rule, node_from_dict(data['left']), node_from_dict(data['right']))


def _as_matrix(data: Union[SupervisedTable, np.ndarray], feature_names: Sequence[str]) -> np.ndarray:
    X = data.X if isinstance(data, SupervisedTable) else np.asarray(data, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[1] != len(feature_names):
        raise ArityMismatch(f"Model expects {len(feature_names)} features, got {X.shape[1]}",
                            expected=len(feature_names), got=X.shape[1])
    return X


def _to_probability(margin: np.ndarray) -> np.ndarray:
    return np.clip(expit(margin), PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP)


@dataclass
class BoostedEnsemble:
    """Additive margin model: base_margin + learning_rate * sum of tree outputs"""
    trees: Tuple[TreeNode, ...]
    base_margin: float
    config: BoostConfig
    feature_names: Tuple[str, ...]
    train_loss: Tuple[float, ...] = field(default=(), compare=False)
    train_predictions: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def predict_margin(self, data) -> np.ndarray:
        X = _as_matrix(data, self.feature_names)
        if self.config.missing_strategy is MissingStrategy.REQUIRE_COMPLETE and np.isnan(X).any():
            raise MissingNotAllowed("Model was trained with RequireComplete; inputs contain missing values")
        margin = np.full(X.shape[0], self.base_margin)
        for tree in self.trees:
            margin = margin + self.config.learning_rate * predict_tree(tree, X)
        return margin

    def predict_proba(self, data) -> np.ndarray:
        return _to_probability(self.predict_margin(data))

    def to_json(self) -> str:
        return json.dumps({
            'config': self.config.to_dict(),
            'base_margin': self.base_margin,
            'feature_names': list(self.feature_names),
            'trees': [node_to_dict(tree) for tree in self.trees],
        })

    @classmethod
    def from_json(cls, text: str) -> 'BoostedEnsemble':
        data = json.loads(text)
        return cls(
            trees=tuple(node_from_dict(tree) for tree in data['trees']),
            base_margin=float(data['base_margin']),
            config=BoostConfig.from_dict(data['config']),
            feature_names=tuple(data['feature_names']),
        )


def predict_proba(model, data) -> np.ndarray:
    """Failure probability for each row of `data` (SupervisedTable or matrix with NaN)"""
    return model.predict_proba(data)


def _check_labels(y: np.ndarray):
    if len(y) == 0 or y.min() == y.max():
        raise DegenerateLabels("Training labels contain a single class", n=int(len(y)))


def fit_boosted(table: SupervisedTable, config: Optional[BoostConfig] = None, seed: int = 0) -> BoostedEnsemble:
    """
    Second-order gradient boosting on logistic loss

    The margin starts at logit(mean y). Each round grows a tree on g = p - y and
    h = p(1 - p) over an optional row subsample and per-tree column subsample.
    """
    config = config or BoostConfig()
    X = np.asarray(table.X, dtype=float)
    y = np.asarray(table.y, dtype=float)
    _check_labels(y)
    if config.missing_strategy is MissingStrategy.REQUIRE_COMPLETE and np.isnan(X).any():
        raise MissingNotAllowed("RequireComplete boosting needs complete rows; filter or impute first")

    n, p = X.shape
    prevalence = y.mean()
    base_margin = float(np.log(prevalence / (1.0 - prevalence)))
    binned = BinnedMatrix.build(X, config.n_bins)
    rng = np.random.Generator(np.random.PCG64(seed))
    n_rows = max(1, int(round(config.subsample * n)))
    n_cols = max(1, int(round(config.colsample * p)))

    margin = np.full(n, base_margin)
    history = [log_loss(_to_probability(margin), y)]
    trees = []
    for round_index in range(config.n_rounds):
        grads, hesses = logistic_grad_hess(margin, y)
        rows = np.sort(rng.choice(n, size=n_rows, replace=False)) if n_rows < n else None
        features = np.sort(rng.choice(p, size=n_cols, replace=False)).tolist() if n_cols < p else None
        tree = fit_tree(X, grads, hesses, config, rows=rows, binned=binned, features=features)
        margin = margin + config.learning_rate * predict_tree(tree, X)
        trees.append(tree)
        history.append(log_loss(_to_probability(margin), y))
        logger.debug("Round %d train log-loss %.6f", round_index + 1, history[-1])

    logger.info("Boosted %d trees (%s) on %d rows, final train log-loss %.5f",
                len(trees), config.missing_strategy.value, n, history[-1])
    return BoostedEnsemble(
        trees=tuple(trees), base_margin=base_margin, config=config,
        feature_names=tuple(table.feature_names), train_loss=tuple(history),
        train_predictions=_to_probability(margin),
    )


def save_model(model: BoostedEnsemble, path: str) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        f.write(model.to_json())


def load_model(path: str) -> BoostedEnsemble:
    with open(path, 'r', encoding='utf-8') as f:
        return BoostedEnsemble.from_json(f.read())


@dataclass
class ForestEnsemble:
    """Bagged trees; probability is the mean of per-tree leaf class rates"""
    trees: Tuple[TreeNode, ...]
    config: BoostConfig
    feature_names: Tuple[str, ...]

    def predict_proba(self, data) -> np.ndarray:
        X = _as_matrix(data, self.feature_names)
        if self.config.missing_strategy is MissingStrategy.REQUIRE_COMPLETE and np.isnan(X).any():
            raise MissingNotAllowed("Forest was trained with RequireComplete; inputs contain missing values")
        total = np.zeros(X.shape[0])
        for tree in self.trees:
            total = total + predict_tree(tree, X)
        return np.clip(total / len(self.trees), PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP)

    def to_json(self) -> str:
        return json.dumps({
            'config': self.config.to_dict(),
            'feature_names': list(self.feature_names),
            'trees': [node_to_dict(tree) for tree in self.trees],
        })

    @classmethod
    def from_json(cls, text: str) -> 'ForestEnsemble':
        data = json.loads(text)
        return cls(trees=tuple(node_from_dict(tree) for tree in data['trees']),
                   config=BoostConfig.from_dict(data['config']),
                   feature_names=tuple(data['feature_names']))


def forest_tree_config(config: BoostConfig) -> BoostConfig:
    """Gini-equivalent growth: unit hessians with no leaf penalty"""
    return replace(config, lam=0.0, gamma=0.0)


def _fit_forest_tree(X: np.ndarray, y: np.ndarray, binned: BinnedMatrix, config: BoostConfig,
                     seed_sequence: np.random.SeedSequence, bootstrap: bool) -> TreeNode:
    rng = np.random.Generator(np.random.PCG64(seed_sequence))
    n, p = X.shape
    rows = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
    n_cols = max(1, int(round(config.colsample * p)))
    sampler = None
    if n_cols < p:
        def sampler():
            return np.sort(rng.choice(p, size=n_cols, replace=False)).tolist()
    # grads = -y with unit hessians make each leaf weight the leaf's failure rate
    return fit_tree(X, -y, np.ones(n), config, rows=rows, binned=binned, feature_sampler=sampler)


def fit_forest(table: SupervisedTable, config: Optional[BoostConfig] = None, n_trees: int = 100,
               seed: int = 0, bootstrap: bool = True, n_jobs: int = 1) -> ForestEnsemble:
    """
    Random forest of CART-style trees grown with the booster's split finder

    Each tree gets its own PCG64 stream spawned from `seed`, so results do not
    depend on n_jobs.
    """
    config = forest_tree_config(config or BoostConfig(max_depth=8, min_child_hessian=1.0, colsample=0.5))
    X = np.asarray(table.X, dtype=float)
    y = np.asarray(table.y, dtype=float)
    _check_labels(y)
    if n_trees < 1:
        raise BadConfig("n_trees must be at least 1", field='n_trees')
    if config.missing_strategy is MissingStrategy.REQUIRE_COMPLETE and np.isnan(X).any():
        raise MissingNotAllowed("RequireComplete forest needs complete rows; filter or impute first")

    binned = BinnedMatrix.build(X, config.n_bins)
    children = np.random.SeedSequence(seed).spawn(n_trees)
    trees = Parallel(n_jobs=n_jobs)(
        delayed(_fit_forest_tree)(X, y, binned, config, child, bootstrap) for child in children)
    logger.info("Grew %d forest trees on %d rows", n_trees, X.shape[0])
    return ForestEnsemble(trees=tuple(trees), config=config, feature_names=tuple(table.feature_names))


def fit_cart(table: SupervisedTable, config: Optional[BoostConfig] = None, seed: int = 0) -> ForestEnsemble:
    """Single unbagged tree on all features"""
    config = replace(config or BoostConfig(max_depth=6, min_child_hessian=5.0), colsample=1.0)
    return fit_forest(table, config, n_trees=1, seed=seed, bootstrap=False)
