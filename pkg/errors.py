"""
Error types for the distress toolkit
Every failure the pipeline can report carries a stable code for the CLI's error JSON
"""

from typing import Dict, Optional


class DistressError(Exception):
    """Base class for all toolkit errors"""

    code = "distress_error"

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self) -> Dict:
        payload = {'error': self.code, 'message': self.message}
        if self.details:
            payload['details'] = {k: _jsonable(v) for k, v in self.details.items()}
        return payload


def _jsonable(value):
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    return str(value)


class InputError(DistressError, ValueError):
    """Bad input data or arguments"""

    code = "input_error"


# panel_data
class MalformedRow(InputError):
    code = "malformed_row"


class BadLabel(InputError):
    code = "bad_label"


class DuplicateKey(InputError):
    code = "duplicate_key"


class SchemaMismatch(InputError):
    code = "schema_mismatch"


class TooFewRecords(InputError):
    code = "too_few_records"


# synth
class BadConfig(InputError):
    code = "bad_config"


# tree_boost
class MissingNotAllowed(InputError):
    code = "missing_not_allowed"


class ArityMismatch(InputError):
    code = "arity_mismatch"


class DegenerateLabels(InputError):
    code = "degenerate_labels"


# baselines
class MissingInput(InputError):
    code = "missing_input"


class Separation(DistressError, ArithmeticError):
    code = "separation"


class TooFewModels(InputError):
    code = "too_few_models"


class AllMissingFeature(InputError):
    code = "all_missing_feature"


# credit_scores
class BadDomain(InputError):
    code = "bad_domain"


# metrics
class OneClass(InputError):
    code = "one_class"


class NoPositives(InputError):
    code = "no_positives"


class ZeroMargin(InputError):
    code = "zero_margin"


class DegenerateIndicator(InputError):
    code = "degenerate_indicator"


# zombie
class TooFewPredictions(InputError):
    code = "too_few_predictions"

    def __init__(self, year: int, count: int):
        super().__init__(f"Year {year} has {count} predictions; at least 10 are needed for deciles",
                         year=year, count=count)
        self.year = year


class MissingYearThresholds(InputError):
    code = "missing_year_thresholds"


class NoPairs(InputError):
    code = "no_pairs"


class EmptyUnion(InputError):
    code = "empty_union"


# shapley
class TooManyFeatures(InputError):
    code = "too_many_features"


class TooFewPermutations(InputError):
    code = "too_few_permutations"


class UnlabeledFeature(InputError):
    code = "unlabeled_feature"


# cli
class ConfigError(InputError):
    code = "config_error"


class IoError(DistressError, OSError):
    code = "io_error"


def exit_code_for(error: Optional[BaseException]) -> int:
    """Map an error to the CLI exit code"""
    if error is None:
        return 0
    if isinstance(error, ConfigError):
        return 2
    if isinstance(error, IoError):
        return 3
    return 1
