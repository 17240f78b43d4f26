"""
Run configuration
Built-in defaults, overridden by environment variables, then by a TOML run file,
then by command-line flags
"""

import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, List, Mapping, Optional, Tuple

from dotenv import load_dotenv

from credit_scores import ALTMAN_SPEC, LinearScoreSpec, MertonColumns
from errors import ConfigError, DistressError
from synth import SynthConfig
from tree_boost import BoostConfig, MissingStrategy

logger = logging.getLogger(__name__)

load_dotenv()

LEARNERS = ('logit', 'logit_lasso', 'cart', 'random_forest', 'boost', 'super_learner')
SAMPLES = ('complete', 'all')
IMPUTERS = ('out_of_range', 'median')
SECTIONS = ('run', 'synth', 'models', 'boost', 'zombie', 'shap', 'scores')
BACC_SCALES = ('probability', 'quantile')
LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL')


@dataclass(frozen=True)
class ModelSpec:
    """
    One horse-race entry

    Args:
        name: Unique label used in every report
        learner: One of LEARNERS
        sample: 'complete' trains and tests on complete rows only, 'all' on every row
        impute: Optional imputer fitted on the training fold ('out_of_range' or 'median')
        params: Learner settings; booster keys override the [boost] defaults
    """
    name: str
    learner: str
    sample: str = 'all'
    impute: Optional[str] = None
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.learner not in LEARNERS:
            raise ConfigError(f"Unknown learner '{self.learner}' for model '{self.name}'",
                              model=self.name, learner=self.learner)
        if self.sample not in SAMPLES:
            raise ConfigError(f"sample must be one of {SAMPLES}", model=self.name, sample=self.sample)
        if self.impute is not None and self.impute not in IMPUTERS:
            raise ConfigError(f"impute must be one of {IMPUTERS}", model=self.name, impute=self.impute)
        needs_complete = self.learner in ('logit', 'logit_lasso', 'super_learner') or (
            self.learner == 'boost'
            and self.params.get('missing_strategy') == MissingStrategy.REQUIRE_COMPLETE.value)
        if needs_complete and self.sample == 'all' and self.impute is None:
            raise ConfigError(f"Model '{self.name}' cannot see missing values; use sample = 'complete' "
                              "or an imputer", model=self.name)

    @property
    def missing_aware(self) -> bool:
        return self.sample == 'all' and self.impute is None

    def to_dict(self) -> Dict:
        data = {'name': self.name, 'learner': self.learner, 'sample': self.sample, 'params': dict(self.params)}
        if self.impute is not None:
            data['impute'] = self.impute
        return data


DEFAULT_MODELS: Tuple[ModelSpec, ...] = (
    ModelSpec('logit', 'logit', sample='complete'),
    ModelSpec('logit_lasso', 'logit_lasso', sample='complete'),
    ModelSpec('cart', 'cart', sample='complete'),
    ModelSpec('random_forest', 'random_forest', sample='complete'),
    ModelSpec('xgboost', 'boost', sample='complete',
              params={'missing_strategy': MissingStrategy.REQUIRE_COMPLETE.value}),
    ModelSpec('super_learner', 'super_learner', sample='complete'),
    ModelSpec('ma_xgboost', 'boost', params={'missing_strategy': MissingStrategy.DEFAULT_DIRECTIONS.value}),
    ModelSpec('mia_boost', 'boost', params={'missing_strategy': MissingStrategy.MIA.value}),
    ModelSpec('xgboost_oor', 'boost', impute='out_of_range'),
    ModelSpec('random_forest_oor', 'random_forest', impute='out_of_range'),
    ModelSpec('logit_median', 'logit', impute='median'),
    ModelSpec('xgboost_median', 'boost', impute='median'),
)


@dataclass(frozen=True)
class ZombieSettings:
    decile: int = 9
    window: int = 3
    survivors_only: bool = False
    bacc_scale: str = 'quantile'
    cutoff_grid: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if not 1 <= self.decile <= 9:
            raise ConfigError("zombie decile must lie in 1..9", decile=self.decile)
        if self.window < 1:
            raise ConfigError("zombie window must be at least 1", window=self.window)
        if self.bacc_scale not in BACC_SCALES:
            raise ConfigError(f"bacc_scale must be one of {BACC_SCALES}", bacc_scale=self.bacc_scale)
        if self.cutoff_grid is not None:
            object.__setattr__(self, 'cutoff_grid', tuple(float(c) for c in self.cutoff_grid))
            if not self.cutoff_grid or not all(0.0 < c < 1.0 for c in self.cutoff_grid):
                raise ConfigError("cutoff_grid values must lie in (0, 1)")


@dataclass(frozen=True)
class ShapSettings:
    model: str = 'ma_xgboost'
    n_permutations: int = 200
    background_size: int = 256
    eval_size: int = 2000
    include_missingness: bool = True
    exact_limit: int = 10
    groups: Optional[Mapping[str, str]] = None

    def __post_init__(self):
        if self.n_permutations < 30:
            raise ConfigError("shap n_permutations must be at least 30", n_permutations=self.n_permutations)
        if self.background_size < 1 or self.eval_size < 2:
            raise ConfigError("shap background_size and eval_size must be positive")
        if not 0 <= self.exact_limit <= 14:
            raise ConfigError("shap exact_limit must lie in 0..14", exact_limit=self.exact_limit)


@dataclass(frozen=True)
class ScoreSettings:
    ratio_names: Tuple[str, ...] = ALTMAN_SPEC.ratio_names
    weights: Tuple[float, ...] = ALTMAN_SPEC.weights
    asset_value: str = 'asset_value'
    debt: str = 'debt'
    drift: str = 'asset_drift'
    volatility: str = 'asset_vol'
    horizon: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, 'ratio_names', tuple(self.ratio_names))
        object.__setattr__(self, 'weights', tuple(float(w) for w in self.weights))
        if len(self.ratio_names) != len(self.weights):
            raise ConfigError("scores ratio_names and weights differ in length")
        if self.horizon <= 0:
            raise ConfigError("scores horizon must be positive", horizon=self.horizon)

    @property
    def linear_spec(self) -> LinearScoreSpec:
        return LinearScoreSpec(self.ratio_names, self.weights)

    @property
    def merton(self) -> MertonColumns:
        return MertonColumns(self.asset_value, self.debt, self.drift, self.volatility, self.horizon)


@dataclass(frozen=True)
class RunConfig:
    """Everything a CLI subcommand needs"""
    input: Optional[str] = None
    out: str = './output'
    folds: int = 5
    seed: int = 7
    jobs: int = 1
    timings: bool = False
    risk_model: str = 'mia_boost'
    log_level: str = 'INFO'
    synth: SynthConfig = field(default_factory=SynthConfig)
    models: Tuple[ModelSpec, ...] = DEFAULT_MODELS
    boost: BoostConfig = field(default_factory=BoostConfig)
    zombie: ZombieSettings = field(default_factory=ZombieSettings)
    shap: ShapSettings = field(default_factory=ShapSettings)
    scores: ScoreSettings = field(default_factory=ScoreSettings)

    def __post_init__(self):
        if self.folds < 2:
            raise ConfigError("folds must be at least 2", folds=self.folds)
        if self.jobs == 0 or self.jobs < -1:
            raise ConfigError("jobs must be a positive count or -1 for all cores", jobs=self.jobs)
        if not self.out:
            raise ConfigError("An output directory is required")
        if self.log_level not in LOG_LEVELS:
            raise ConfigError(f"log_level must be one of {LOG_LEVELS}", log_level=self.log_level)
        names = [spec.name for spec in self.models]
        duplicates = sorted({name for name in names if names.count(name) > 1})
        if duplicates:
            raise ConfigError(f"Model names must be unique: {duplicates}", duplicates=str(duplicates))
        if not self.models:
            raise ConfigError("At least one model must be configured")

    def model(self, name: str) -> ModelSpec:
        for spec in self.models:
            if spec.name == name:
                return spec
        raise ConfigError(f"No configured model named '{name}'", model=name)

    @property
    def model_names(self) -> List[str]:
        return [spec.name for spec in self.models]


def env_settings() -> Dict[str, Any]:
    """[run] values taken from DISTRESS_* environment variables"""
    settings: Dict[str, Any] = {}
    if os.getenv('DISTRESS_OUT_DIR'):
        settings['out'] = os.getenv('DISTRESS_OUT_DIR')
    for key, name in (('jobs', 'DISTRESS_JOBS'), ('seed', 'DISTRESS_SEED')):
        value = os.getenv(name)
        if value:
            try:
                settings[key] = int(value)
            except ValueError:
                raise ConfigError(f"{name} must be an integer, got '{value}'", variable=name)
    if os.getenv('DISTRESS_LOG_LEVEL'):
        settings['log_level'] = os.getenv('DISTRESS_LOG_LEVEL').upper()
    return settings


def read_toml(path: str) -> Dict[str, Any]:
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}", path=path)
    try:
        with open(path, 'rb') as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid TOML: {e}", path=path) from e
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"Unknown config sections: {unknown}", sections=str(unknown))
    return data


def _section(cls, values: Mapping[str, Any], section: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"Unknown keys in [{section}]: {unknown}", section=section, keys=str(unknown))
    return cls(**values)


def _models(entries: List[Mapping[str, Any]]) -> Tuple[ModelSpec, ...]:
    specs = []
    for entry in entries:
        if 'name' not in entry or 'learner' not in entry:
            raise ConfigError("Every [[models]] entry needs a name and a learner")
        specs.append(_section(ModelSpec, entry, 'models'))
    return tuple(specs)


def build_run_config(data: Mapping[str, Any], overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """
    Assemble a RunConfig from parsed TOML sections

    Args:
        data: Parsed file contents, keyed by section
        overrides: Command-line [run] values; None entries are ignored
    """
    run = dict(env_settings())
    run.update(data.get('run', {}))
    run.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = {f.name for f in fields(RunConfig)} - {'synth', 'models', 'boost', 'zombie', 'shap', 'scores'}
    unknown = sorted(set(run) - known)
    if unknown:
        raise ConfigError(f"Unknown keys in [run]: {unknown}", keys=str(unknown))

    try:
        synth = SynthConfig.from_dict({'seed': run.get('seed', RunConfig.seed), **data.get('synth', {})})
        boost = BoostConfig.from_dict(data.get('boost', {}))
    except DistressError as e:
        raise ConfigError(e.message, **e.details) from e
    if 'seed' in (overrides or {}) and overrides['seed'] is not None:
        synth = replace(synth, seed=overrides['seed'])

    parts = {
        'synth': synth,
        'boost': boost,
        'zombie': _section(ZombieSettings, data.get('zombie', {}), 'zombie'),
        'shap': _section(ShapSettings, data.get('shap', {}), 'shap'),
        'scores': _section(ScoreSettings, data.get('scores', {}), 'scores'),
    }
    if 'models' in data:
        parts['models'] = _models(data['models'])
        # unset model pointers follow the configured roster
        names = [spec.name for spec in parts['models']]
        fallback = next((spec.name for spec in parts['models'] if spec.missing_aware), names[0] if names else None)
        if 'risk_model' not in run and RunConfig.risk_model not in names and fallback:
            run['risk_model'] = fallback
        if 'model' not in data.get('shap', {}) and ShapSettings.model not in names and fallback:
            parts['shap'] = replace(parts['shap'], model=fallback)
    config = RunConfig(**run, **parts)
    for name in (config.risk_model, config.shap.model):
        config.model(name)
    return config


def load_run_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    data = read_toml(path) if path else {}
    config = build_run_config(data, overrides)
    logger.info("Run config: %d models, %d folds, seed %d, jobs %d, out %s",
                len(config.models), config.folds, config.seed, config.jobs, config.out)
    return config
