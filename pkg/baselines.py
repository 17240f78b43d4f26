"""
Econometric and ensemble baselines
Newton logit, logit-LASSO path with EBIC selection, out-of-range and median
imputation, and the convex stacker behind the Super Learner
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.special import expit
from sklearn.preprocessing import StandardScaler

from errors import AllMissingFeature, DegenerateLabels, MissingInput, Separation, TooFewModels
from panel_data import FirmPanel, FirmYearRecord, SupervisedTable, stratify_labels

logger = logging.getLogger(__name__)

OUT_OF_RANGE_VALUE = 1e20
SEPARATION_NORM = 1e6


def _design(table: SupervisedTable) -> Tuple[np.ndarray, np.ndarray]:
    X = np.asarray(table.X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if np.isnan(X).any():
        raise MissingInput("Inputs contain missing values; impute or filter complete cases first",
                           n_missing=int(np.isnan(X).sum()))
    y = np.asarray(table.y, dtype=float)
    if len(y) == 0 or y.min() == y.max():
        raise DegenerateLabels("Both outcomes must be present to fit a logit", n=int(len(y)))
    return X, y


@dataclass
class LogitModel:
    intercept: float
    coefficients: np.ndarray
    feature_names: Tuple[str, ...]
    n_iter: int = 0
    converged: bool = True

    def decision_function(self, data) -> np.ndarray:
        X = data.X if isinstance(data, SupervisedTable) else np.asarray(data, dtype=float)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        if np.isnan(X).any():
            raise MissingInput("Logit cannot score rows with missing values")
        return self.intercept + X @ self.coefficients

    def predict_proba(self, data) -> np.ndarray:
        return np.clip(expit(self.decision_function(data)), 1e-12, 1.0 - 1e-12)

    def to_dict(self) -> Dict:
        return {'intercept': self.intercept, 'coefficients': self.coefficients.tolist(),
                'feature_names': list(self.feature_names)}


def penalized_loglik(theta: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float) -> float:
    """Log-likelihood minus l2/2 * ||beta||^2; theta = (intercept, beta)"""
    eta = theta[0] + X @ theta[1:]
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)) - 0.5 * l2 * np.dot(theta[1:], theta[1:]))


def penalized_gradient(theta: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float) -> np.ndarray:
    residual = y - expit(theta[0] + X @ theta[1:])
    gradient = np.empty_like(theta)
    gradient[0] = residual.sum()
    gradient[1:] = X.T @ residual - l2 * theta[1:]
    return gradient


def fit_logit(table: SupervisedTable, l2: float = 0.0, max_iter: int = 100, tol: float = 1e-8) -> LogitModel:
    """
    Maximum (ridge-penalized) likelihood logit by damped Newton

    Stops when the gradient's infinity norm drops below `tol` or after `max_iter`
    iterations. The intercept is never penalized.
    """
    if l2 < 0:
        raise ValueError("l2 must be nonnegative")
    X, y = _design(table)
    n, p = X.shape
    design = np.hstack([np.ones((n, 1)), X])
    penalty = np.full(p + 1, l2)
    penalty[0] = 0.0

    theta = np.zeros(p + 1)
    theta[0] = np.log(y.mean() / (1.0 - y.mean()))
    objective = penalized_loglik(theta, X, y, l2)
    n_iter = 0
    for _ in range(max_iter):
        gradient = penalized_gradient(theta, X, y, l2)
        if np.max(np.abs(gradient)) < tol:
            break
        prob = expit(design @ theta)
        weights = prob * (1.0 - prob)
        information = design.T @ (design * weights[:, None]) + np.diag(penalty)
        try:
            step = np.linalg.solve(information, gradient)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(information, gradient, rcond=None)[0]
        scale = 1.0
        for _ in range(50):
            candidate = theta + scale * step
            candidate_objective = penalized_loglik(candidate, X, y, l2)
            if candidate_objective >= objective:
                break
            scale *= 0.5
        else:
            # no ascent along the Newton direction at machine precision
            break
        theta, objective = candidate, candidate_objective
        n_iter += 1
        if l2 == 0 and np.linalg.norm(theta[1:]) > SEPARATION_NORM:
            raise Separation("Coefficients diverge; the outcome is perfectly separated",
                             norm=float(np.linalg.norm(theta[1:])))
    converged = bool(np.max(np.abs(penalized_gradient(theta, X, y, l2))) < tol)

    if l2 == 0 and not converged and p > 0:
        fitted = expit(design @ theta)
        if np.max(np.abs(fitted - y)) < 1e-6:
            raise Separation("Newton did not converge and the fit classifies every row perfectly",
                             norm=float(np.linalg.norm(theta[1:])))
    if not converged:
        logger.warning("Logit stopped after %d iterations without meeting tolerance %.1e", n_iter, tol)
    return LogitModel(float(theta[0]), theta[1:].copy(), tuple(table.feature_names), n_iter, converged)


# Logit-LASSO

def ebic(loglik: float, k: int, n: int, p: int, gamma: float = 0.5) -> float:
    """Extended BIC: -2 loglik + k ln n + 2 gamma k ln p"""
    return -2.0 * loglik + k * np.log(n) + 2.0 * gamma * k * np.log(p)


def bic(loglik: float, k: int, n: int) -> float:
    return -2.0 * loglik + k * np.log(n)


def _soft_threshold(value: float, threshold: float) -> float:
    if value > threshold:
        return value - threshold
    if value < -threshold:
        return value + threshold
    return 0.0


def _lasso_objective(b0: float, beta: np.ndarray, Z: np.ndarray, y: np.ndarray, lam: float) -> float:
    eta = b0 + Z @ beta
    return float(-np.mean(y * eta - np.logaddexp(0.0, eta)) + lam * np.abs(beta).sum())


def kkt_violation(b0: float, beta: np.ndarray, Z: np.ndarray, y: np.ndarray, lam: float) -> float:
    """Largest violation of the L1 optimality conditions in standardized units"""
    residual = y - expit(b0 + Z @ beta)
    score = Z.T @ residual / len(y)
    active = beta != 0
    violation = np.where(active, np.abs(score - lam * np.sign(beta)), np.maximum(np.abs(score) - lam, 0.0))
    return float(max(abs(residual.mean()), violation.max() if len(violation) else 0.0))


def _solve_lasso(Z: np.ndarray, y: np.ndarray, lam: float, b0: float, beta: np.ndarray,
                 tol: float = 1e-7, max_outer: int = 200, max_sweeps: int = 5000) -> Tuple[float, np.ndarray, float]:
    """Proximal Newton: quadratic approximation solved by coordinate descent, then a line search"""
    n, p = Z.shape
    beta = beta.copy()
    objective = _lasso_objective(b0, beta, Z, y, lam)
    violation = kkt_violation(b0, beta, Z, y, lam)
    for _ in range(max_outer):
        if violation < tol:
            break
        eta = b0 + Z @ beta
        prob = expit(eta)
        w = np.maximum(prob * (1.0 - prob), 1e-5)
        working = eta + (y - prob) / w
        new_b0, new_beta = b0, beta.copy()
        residual = working - new_b0 - Z @ new_beta
        curvature = (w[:, None] * Z * Z).sum(axis=0) / n
        for _ in range(max_sweeps):
            largest = 0.0
            shift = np.dot(w, residual) / w.sum()
            new_b0 += shift
            residual -= shift
            largest = max(largest, abs(shift))
            for j in range(p):
                if curvature[j] == 0:
                    continue
                old = new_beta[j]
                rho = np.dot(w * Z[:, j], residual) / n + curvature[j] * old
                new = _soft_threshold(rho, lam) / curvature[j]
                if new != old:
                    residual -= Z[:, j] * (new - old)
                    new_beta[j] = new
                    largest = max(largest, abs(new - old))
            if largest < 1e-13:
                break
        step = 1.0
        direction_b0, direction_beta = new_b0 - b0, new_beta - beta
        for _ in range(40):
            cand_b0 = b0 + step * direction_b0
            cand_beta = beta + step * direction_beta
            cand_objective = _lasso_objective(cand_b0, cand_beta, Z, y, lam)
            if cand_objective <= objective:
                break
            step *= 0.5
        else:
            break
        b0, beta, objective = cand_b0, cand_beta, cand_objective
        violation = kkt_violation(b0, beta, Z, y, lam)
    return b0, beta, violation


@dataclass
class LassoPath:
    lambdas: np.ndarray
    models: List[LogitModel]
    ebic: np.ndarray
    selected: int
    feature_names: Tuple[str, ...]
    standardized_path: np.ndarray
    kkt: np.ndarray
    ebic_gamma: float = 0.5

    @property
    def selected_model(self) -> LogitModel:
        return self.models[self.selected]

    def support(self, index: Optional[int] = None) -> List[str]:
        index = self.selected if index is None else index
        return [name for name, coef in zip(self.feature_names, self.standardized_path[index]) if coef != 0]

    def ranking(self) -> pd.DataFrame:
        """Predictors ordered by path entry, ties broken by |beta| at the selected lambda"""
        entry = []
        selected = self.standardized_path[self.selected]
        for j, name in enumerate(self.feature_names):
            nonzero = np.flatnonzero(self.standardized_path[:, j] != 0)
            first = int(nonzero[0]) if len(nonzero) else len(self.lambdas)
            entry.append((first, -abs(selected[j]), j, name))
        entry.sort()
        rows = []
        for rank, (first, neg_abs, j, name) in enumerate(entry, start=1):
            rows.append({
                'rank': rank,
                'feature': name,
                'entry_lambda': float(self.lambdas[first]) if first < len(self.lambdas) else np.nan,
                'coefficient': float(self.selected_model.coefficients[j]),
                'selected': bool(selected[j] != 0),
            })
        return pd.DataFrame(rows)

    def to_json(self) -> str:
        return json.dumps({
            'feature_names': list(self.feature_names),
            'ebic_gamma': self.ebic_gamma,
            'selected': self.selected,
            'lambdas': self.lambdas.tolist(),
            'ebic': self.ebic.tolist(),
            'models': [model.to_dict() for model in self.models],
        })

    def predict_proba(self, data) -> np.ndarray:
        return self.selected_model.predict_proba(data)


def lambda_max(table: SupervisedTable) -> float:
    X, y = _design(table)
    Z = StandardScaler().fit_transform(X)
    return float(np.max(np.abs(Z.T @ (y - y.mean()))) / len(y))


def fit_logit_lasso(table: SupervisedTable, lambda_grid: Optional[Sequence[float]] = None,
                    ebic_gamma: float = 0.5, n_lambdas: int = 50, min_ratio: float = 1e-3,
                    n_jobs: int = 1) -> LassoPath:
    """
    L1-penalized logit path on internally standardized features

    The default grid has n_lambdas log-spaced points from lambda_max down to
    min_ratio * lambda_max. Sequential fits warm-start from the previous lambda;
    with n_jobs > 1 each lambda starts from the null model.
    """
    X, y = _design(table)
    n, p = X.shape
    scaler = StandardScaler().fit(X)
    Z = scaler.transform(X)
    lam_max = float(np.max(np.abs(Z.T @ (y - y.mean()))) / n) if p else 0.0
    if lambda_grid is None:
        lambdas = lam_max * np.logspace(0.0, np.log10(min_ratio), n_lambdas) if lam_max > 0 else np.zeros(1)
    else:
        lambdas = np.sort(np.asarray(lambda_grid, dtype=float))[::-1]

    null_b0 = float(np.log(y.mean() / (1.0 - y.mean())))
    if n_jobs > 1:
        results = Parallel(n_jobs=n_jobs)(
            delayed(_solve_lasso)(Z, y, lam, null_b0, np.zeros(p)) for lam in lambdas)
    else:
        results = []
        b0, beta = null_b0, np.zeros(p)
        for lam in lambdas:
            b0, beta, violation = _solve_lasso(Z, y, lam, b0, beta)
            results.append((b0, beta, violation))

    models, ebics, path, kkt = [], [], [], []
    for b0, beta, violation in results:
        coefficients = beta / scaler.scale_
        intercept = b0 - float(np.dot(coefficients, scaler.mean_))
        loglik = float(np.sum(y * (b0 + Z @ beta) - np.logaddexp(0.0, b0 + Z @ beta)))
        k = int(np.count_nonzero(beta))
        models.append(LogitModel(intercept, coefficients, tuple(table.feature_names)))
        ebics.append(ebic(loglik, k, n, max(p, 1), ebic_gamma))
        path.append(beta)
        kkt.append(violation)

    ebics = np.asarray(ebics)
    selected = int(np.argmin(ebics))
    logger.info("LASSO path over %d lambdas selected index %d with %d predictors",
                len(lambdas), selected, int(np.count_nonzero(path[selected])))
    standardized = np.vstack(path) if p else np.zeros((len(lambdas), 0))
    return LassoPath(lambdas=np.asarray(lambdas), models=models, ebic=ebics, selected=selected,
                     feature_names=tuple(table.feature_names), standardized_path=standardized,
                     kkt=np.asarray(kkt), ebic_gamma=ebic_gamma)


# Imputation

class ImputeStrategy(str, Enum):
    OUT_OF_RANGE = 'out_of_range'
    MEDIAN = 'median'


def lower_median(values: np.ndarray) -> float:
    """Lower of the two middle order statistics for even counts"""
    ordered = np.sort(values)
    return float(ordered[(len(ordered) - 1) // 2])


class Imputer:
    """Fill values learned on one table and applied to others"""

    def __init__(self, strategy: ImputeStrategy):
        self.strategy = ImputeStrategy(strategy)
        self.fill_values_: Optional[np.ndarray] = None

    def fit(self, X: np.ndarray, feature_names: Optional[Sequence[str]] = None) -> 'Imputer':
        X = np.asarray(X, dtype=float)
        if self.strategy is ImputeStrategy.OUT_OF_RANGE:
            self.fill_values_ = np.full(X.shape[1], OUT_OF_RANGE_VALUE)
            return self
        fills = np.empty(X.shape[1])
        for j in range(X.shape[1]):
            observed = X[~np.isnan(X[:, j]), j]
            if len(observed) == 0:
                name = feature_names[j] if feature_names is not None else j
                raise AllMissingFeature(f"Feature '{name}' has no observed values to take a median of",
                                        feature=name)
            fills[j] = lower_median(observed)
        self.fill_values_ = fills
        return self

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.array(X, dtype=float, copy=True)
        missing = np.isnan(X)
        X[missing] = np.broadcast_to(self.fill_values_, X.shape)[missing]
        return X

    def transform_table(self, table: SupervisedTable) -> SupervisedTable:
        return table.with_features(self.transform(table.X))


def impute(panel: FirmPanel, strategy: ImputeStrategy) -> FirmPanel:
    """Panel copy with every missing entry filled; the returned mask is empty"""
    imputer = Imputer(strategy).fit(panel.feature_matrix, panel.feature_names)
    fills = imputer.fill_values_
    records = []
    for record in panel.records:
        features = tuple(float(fills[j]) if value is None else value for j, value in enumerate(record.features))
        records.append(FirmYearRecord(record.firm_id, record.year, features, record.failed))
    return FirmPanel(tuple(records), panel.feature_names, panel.group_labels)


# Convex stacking

def _project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)"""
    u = np.sort(v)[::-1]
    cumulative = np.cumsum(u) - 1.0
    index = np.arange(1, len(v) + 1)
    rho = np.flatnonzero(u - cumulative / index > 0)[-1]
    theta = cumulative[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def _stack_loss(weights: np.ndarray, P: np.ndarray, y: np.ndarray) -> float:
    q = np.clip(P @ weights, 1e-12, 1.0 - 1e-12)
    return float(-np.mean(y * np.log(q) + (1.0 - y) * np.log1p(-q)))


def _stack_gradient(weights: np.ndarray, P: np.ndarray, y: np.ndarray) -> np.ndarray:
    q = np.clip(P @ weights, 1e-12, 1.0 - 1e-12)
    return -(P.T @ (y / q - (1.0 - y) / (1.0 - q))) / len(y)


def fit_stacker(base_predictions: np.ndarray, labels, max_iter: int = 1000, tol: float = 1e-8) -> np.ndarray:
    """
    Simplex weights minimizing the log-loss of the weighted probability

    Projected gradient with backtracking, started at the best single model.
    """
    P = np.asarray(base_predictions, dtype=float)
    y = np.asarray(labels, dtype=float)
    if P.ndim != 2 or P.shape[1] < 2:
        raise TooFewModels("Stacking needs a prediction matrix with at least two models",
                           shape=str(P.shape))
    m = P.shape[1]
    losses = [_stack_loss(np.eye(m)[k], P, y) for k in range(m)]
    weights = np.eye(m)[int(np.argmin(losses))]
    loss = min(losses)
    step = 1.0
    for _ in range(max_iter):
        gradient = _stack_gradient(weights, P, y)
        while True:
            candidate = _project_simplex(weights - step * gradient)
            delta = candidate - weights
            candidate_loss = _stack_loss(candidate, P, y)
            if candidate_loss <= loss + gradient @ delta + (delta @ delta) / (2.0 * step) or step < 1e-12:
                break
            step *= 0.5
        if candidate_loss > loss:
            break
        mapping_norm = np.linalg.norm(delta) / step
        weights, loss = candidate, candidate_loss
        if mapping_norm < tol:
            break
        step *= 2.0
    return weights


Learner = Callable[[SupervisedTable, int], object]


@dataclass
class SuperLearner:
    """
    Convex combination of base learners fitted on cross-fitted predictions

    Args:
        learners: Ordered (name, fit function) pairs; a fit function maps (table, seed)
            to a model exposing predict_proba
        inner_folds: Folds used to build the cross-fitted prediction matrix
    """
    learners: List[Tuple[str, Learner]]
    inner_folds: int = 5
    weights: Optional[np.ndarray] = None
    models: List[object] = field(default_factory=list)

    def fit(self, table: SupervisedTable, seed: int = 0) -> 'SuperLearner':
        plan = stratify_labels(table.y, self.inner_folds, seed)
        cross_fitted = np.empty((len(table), len(self.learners)))
        for train_rows, test_rows in plan.splits():
            train, test = table.subset(train_rows), table.subset(test_rows)
            for k, (name, learner) in enumerate(self.learners):
                cross_fitted[test_rows, k] = learner(train, seed).predict_proba(test)
        self.weights = fit_stacker(cross_fitted, table.y)
        self.models = [learner(table, seed) for _, learner in self.learners]
        logger.info("Super Learner weights: %s",
                    ", ".join(f"{name}={w:.3f}" for (name, _), w in zip(self.learners, self.weights)))
        return self

    def predict_proba(self, data) -> np.ndarray:
        P = np.column_stack([model.predict_proba(data) for model in self.models])
        return np.clip(P @ self.weights, 1e-12, 1.0 - 1e-12)
