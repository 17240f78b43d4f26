"""
Synthetic firm panels
Latent AR(1) distress drives failure hazard, accounting readouts and MNAR missingness,
so every downstream claim can be checked without proprietary data
"""

import logging
import os
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit, logit

from errors import BadConfig, IoError
from panel_data import FirmPanel, FirmYearRecord, MISSING_TOKEN

logger = logging.getLogger(__name__)

SIGNAL_FEATURES = ('profitability', 'leverage', 'liquidity')
DEFAULT_REGIONS = ('North-West', 'North-East', 'Centre', 'South', 'Islands')
DEFAULT_INDUSTRIES = ('Manufacturing', 'Construction', 'Trade', 'Services', 'Energy', 'Agriculture')

# Number of independent streams spawned from the root seed, in draw order below
_N_STREAMS = 6


@dataclass(frozen=True)
class SynthConfig:
    """
    Generator settings

    Args:
        n_firms: Number of firms, all entering in start_year
        n_years: Calendar years simulated per firm (fewer if it fails)
        n_features: Predictors; the first n_signal read out latent distress, the rest are noise
        hazard_base: Failure probability at zero latent distress, in (0, 1)
        distress_loading: Effect of last year's distress on failure log-odds
        mnar_strength: Effect of current distress on each feature's missing log-odds
        mcar_rate: Probability a cell goes missing irrespective of distress
        seed: Root seed; every draw derives from it
        persistence: AR(1) coefficient of latent distress
        zombie_share: Share of firms planted with a persistent distress shift that does not raise hazard
    """
    n_firms: int = 2000
    n_years: int = 10
    n_features: int = 10
    hazard_base: float = 0.02
    distress_loading: float = 1.5
    mnar_strength: float = 2.0
    mcar_rate: float = 0.02
    seed: int = 7
    persistence: float = 0.8
    n_signal: int = 3
    missing_base: float = -3.0
    zombie_share: float = 0.02
    zombie_shift: float = 3.0
    start_year: int = 2008
    regions: Tuple[str, ...] = DEFAULT_REGIONS
    industries: Tuple[str, ...] = DEFAULT_INDUSTRIES

    def __post_init__(self):
        object.__setattr__(self, 'regions', tuple(self.regions))
        object.__setattr__(self, 'industries', tuple(self.industries))
        for name in ('n_firms', 'n_years', 'n_features'):
            if int(getattr(self, name)) < 1:
                raise BadConfig(f"{name} must be at least 1, got {getattr(self, name)}", field=name)
        if not 0.0 < self.hazard_base < 1.0:
            raise BadConfig(f"hazard_base must lie in (0, 1), got {self.hazard_base}", field='hazard_base')
        if self.distress_loading < 0:
            raise BadConfig("distress_loading must be nonnegative", field='distress_loading')
        if self.mnar_strength < 0:
            raise BadConfig("mnar_strength must be nonnegative", field='mnar_strength')
        if not 0.0 <= self.mcar_rate < 1.0:
            raise BadConfig(f"mcar_rate must lie in [0, 1), got {self.mcar_rate}", field='mcar_rate')
        if not -1.0 < self.persistence < 1.0:
            raise BadConfig("persistence must lie in (-1, 1) for a stationary process", field='persistence')
        if self.n_signal < 0:
            raise BadConfig("n_signal must be nonnegative", field='n_signal')
        if not 0.0 <= self.zombie_share <= 1.0:
            raise BadConfig("zombie_share must lie in [0, 1]", field='zombie_share')
        if not self.regions or not self.industries:
            raise BadConfig("regions and industries must be nonempty")

    @classmethod
    def from_dict(cls, values: Dict) -> 'SynthConfig':
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise BadConfig(f"Unknown synth settings: {sorted(unknown)}", unknown=sorted(unknown))
        return cls(**values)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['regions'] = list(self.regions)
        data['industries'] = list(self.industries)
        return data


@dataclass
class GroundTruth:
    """Hidden per firm-year state, never part of the panel"""
    frame: pd.DataFrame

    @property
    def latent_distress(self) -> pd.Series:
        return self.frame.set_index(['firm_id', 'year'])['latent_distress']

    def planted_firms(self) -> List[str]:
        planted = self.frame.loc[self.frame['persistent'] == 1, 'firm_id']
        return sorted(planted.unique().tolist())

    def indicator(self, column: str) -> Dict[Tuple[str, int], int]:
        """Per (firm_id, year) binary column, e.g. icr_below_one or negative_value_added"""
        return {(f, int(y)): int(v) for f, y, v in
                zip(self.frame['firm_id'], self.frame['year'], self.frame[column])}

    def group_of(self, column: str) -> Dict[Tuple[str, int], str]:
        return {(f, int(y)): str(v) for f, y, v in
                zip(self.frame['firm_id'], self.frame['year'], self.frame[column])}


def feature_names_for(config: SynthConfig) -> List[str]:
    n_signal = min(config.n_signal, config.n_features)
    names = []
    for k in range(n_signal):
        names.append(SIGNAL_FEATURES[k] if k < len(SIGNAL_FEATURES) else f"signal_{k + 1}")
    names.extend(f"noise_{k + 1}" for k in range(config.n_features - n_signal))
    return names


def _readouts(distress: np.ndarray, n_signal: int, n_noise: int, rng: np.random.Generator) -> np.ndarray:
    """Feature cube (firms, years, features); each signal readout has R^2 near 0.5 on distress"""
    n, t = distress.shape
    cube = np.empty((n, t, n_signal + n_noise))
    noise = rng.standard_normal((n, t, n_signal + n_noise))
    for k in range(n_signal):
        if k == 0:
            cube[:, :, k] = 0.08 - 0.04 * distress + 0.04 * noise[:, :, k]
        elif k == 1:
            # nonlinear: debt ratio saturates
            cube[:, :, k] = expit(-0.5 + 1.2 * distress) + 0.12 * noise[:, :, k]
        elif k == 2:
            # kinked: cash buffers shrink only once distress is positive
            cube[:, :, k] = 0.3 - 0.15 * np.maximum(distress, 0.0) + 0.06 * noise[:, :, k]
        else:
            cube[:, :, k] = distress + noise[:, :, k]
    cube[:, :, n_signal:] = noise[:, :, n_signal:]
    return cube


def _missing_cube(distress: np.ndarray, n_features: int, config: SynthConfig,
                  rng: np.random.Generator) -> np.ndarray:
    n, t = distress.shape
    draws = rng.random((n, t, n_features, 2))
    if config.mnar_strength > 0:
        p_mnar = expit(config.missing_base + config.mnar_strength * distress)[:, :, None]
        mnar = draws[..., 0] < p_mnar
    else:
        mnar = np.zeros((n, t, n_features), dtype=bool)
    mcar = draws[..., 1] < config.mcar_rate
    return mnar | mcar


def _proxies(distress: np.ndarray, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """Accounting proxies for the credit-score and zombie-overlap reports"""
    shape = distress.shape

    def z():
        return rng.standard_normal(shape)

    ebit_ta = 0.06 - 0.04 * distress + 0.03 * z()
    interest_ta = 0.02 + 0.01 * np.maximum(distress, 0.0) + 0.004 * np.abs(z())
    value_added_ta = 0.25 - 0.12 * distress + 0.1 * z()
    return {
        'icr': ebit_ta / interest_ta,
        'value_added_ta': value_added_ta,
        'wc_ta': 0.15 - 0.08 * distress + 0.05 * z(),
        're_ta': 0.10 - 0.10 * distress + 0.08 * z(),
        'ebit_ta': ebit_ta,
        'mve_tl': np.exp(0.3 - 0.4 * distress + 0.3 * z()),
        'sales_ta': np.exp(-0.15 * distress + 0.2 * z()),
        'asset_value': np.exp(0.5 - 0.35 * distress + 0.1 * z()),
        'debt': np.ones(shape),
        'asset_drift': np.full(shape, 0.04),
        'asset_vol': 0.2 + 0.1 * expit(distress),
    }


def generate_panel(config: SynthConfig) -> Tuple[FirmPanel, GroundTruth]:
    """
    Simulate a firm-year panel and its hidden ground truth

    Every random quantity is drawn for the full firms x years grid from its own
    stream before failures truncate histories, so changing one setting never
    reshuffles unrelated draws.
    """
    n, n_years = config.n_firms, config.n_years
    streams = [np.random.Generator(np.random.PCG64(s))
               for s in np.random.SeedSequence(config.seed).spawn(_N_STREAMS)]
    rng_firm, rng_distress, rng_fail, rng_features, rng_missing, rng_proxy = streams

    n_planted = int(round(config.zombie_share * n))
    planted = np.zeros(n, dtype=bool)
    planted[rng_firm.permutation(n)[:n_planted]] = True
    regions = rng_firm.integers(0, len(config.regions), size=n)
    industries = rng_firm.integers(0, len(config.industries), size=n)

    rho = config.persistence
    innovations = rng_distress.standard_normal((n, n_years))
    cycle = np.empty((n, n_years))
    cycle[:, 0] = innovations[:, 0]
    scale = np.sqrt(1.0 - rho * rho)
    for t in range(1, n_years):
        cycle[:, t] = rho * cycle[:, t - 1] + scale * innovations[:, t]
    # planted firms look distressed but their hazard follows the unshifted cycle
    distress = cycle + config.zombie_shift * planted[:, None]

    failed_at = np.full(n, -1, dtype=np.int64)
    if n_years > 1:
        hazard = expit(logit(config.hazard_base) + config.distress_loading * cycle[:, :-1])
        fails = rng_fail.random((n, n_years - 1)) < hazard
        any_fail = fails.any(axis=1)
        failed_at[any_fail] = fails[any_fail].argmax(axis=1) + 1

    names = feature_names_for(config)
    n_signal = min(config.n_signal, config.n_features)
    cube = _readouts(distress, n_signal, config.n_features - n_signal, rng_features)
    missing = _missing_cube(distress, config.n_features, config, rng_missing)
    proxies = _proxies(distress, rng_proxy)

    width = len(str(max(n - 1, 0)))
    records = []
    truth_rows = []
    for i in range(n):
        firm_id = f"F{i:0{width}d}"
        last = failed_at[i] if failed_at[i] >= 0 else n_years - 1
        for t in range(last + 1):
            year = config.start_year + t
            is_failure = int(t == failed_at[i])
            features = tuple(None if missing[i, t, k] else float(cube[i, t, k])
                             for k in range(config.n_features))
            records.append(FirmYearRecord(firm_id, year, features, is_failure))
            row = {
                'firm_id': firm_id,
                'year': year,
                'latent_distress': float(distress[i, t]),
                'persistent': int(planted[i]),
                'true_zombie': int(planted[i] and t >= 2 and not is_failure),
                'region': config.regions[regions[i]],
                'industry': config.industries[industries[i]],
            }
            for key, values in proxies.items():
                row[key] = float(values[i, t])
            row['icr_below_one'] = int(row['icr'] < 1.0)
            row['negative_value_added'] = int(row['value_added_ta'] < 0.0)
            truth_rows.append(row)

    group_labels = {name: ('signal' if k < n_signal else 'noise') for k, name in enumerate(names)}
    panel = FirmPanel(tuple(records), tuple(names), group_labels)
    truth = GroundTruth(pd.DataFrame(truth_rows))
    logger.info("Generated %d firm-years for %d firms (%d failures, %d planted persistent)",
                len(panel), n, int((failed_at >= 0).sum()), n_planted)
    return panel, truth


def truth_path_for(panel_path: str) -> str:
    """Sibling ground-truth path: panel.csv -> panel_truth.csv"""
    root, ext = os.path.splitext(panel_path)
    return f"{root}_truth{ext or '.csv'}"


def write_truth_csv(truth: GroundTruth, path: str) -> None:
    truth.frame.to_csv(path, index=False, na_rep=MISSING_TOKEN, lineterminator='\n', float_format='%r')


def load_truth_csv(path: str) -> GroundTruth:
    if not os.path.exists(path):
        raise IoError(f"Ground truth file not found: {path}", path=path)
    frame = pd.read_csv(path, dtype={'firm_id': str}, keep_default_na=False, na_values=[MISSING_TOKEN])
    return GroundTruth(frame)
