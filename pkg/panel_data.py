"""
Firm-year panel data
Loads, validates and indexes firm-year records with an explicit missing mask,
and builds the supervised one-period-ahead table the learners train on
"""

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import BadLabel, DuplicateKey, IoError, MalformedRow, SchemaMismatch, TooFewRecords

logger = logging.getLogger(__name__)

KEY_COLUMNS = ('firm_id', 'year', 'failed')
MISSING_TOKEN = 'NA'
# Compared case-insensitively after stripping whitespace
MISSING_TOKENS = frozenset({'', 'na', 'nan'})


@dataclass(frozen=True)
class FirmYearRecord:
    firm_id: str
    year: int
    features: Tuple[Optional[float], ...]
    failed: int

    @property
    def missing_mask(self) -> Tuple[bool, ...]:
        return tuple(value is None for value in self.features)

    @property
    def n_missing(self) -> int:
        return sum(1 for value in self.features if value is None)

    @property
    def key(self) -> Tuple[str, int]:
        return (self.firm_id, self.year)


@dataclass(frozen=True)
class FirmPanel:
    """
    Immutable longitudinal panel of firm-year records

    Args:
        records: Firm-year records in file order
        feature_names: Ordered predictor names; every record carries one value per name
        group_labels: Optional map feature name -> group tag used by group attributions
    """
    records: Tuple[FirmYearRecord, ...]
    feature_names: Tuple[str, ...]
    group_labels: Optional[Dict[str, str]] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, 'records', tuple(self.records))
        object.__setattr__(self, 'feature_names', tuple(self.feature_names))
        if self.group_labels is not None:
            object.__setattr__(self, 'group_labels', dict(self.group_labels))
        self._validate()

    def _validate(self):
        arity = len(self.feature_names)
        seen = set()
        failure_year: Dict[str, int] = {}
        last_year: Dict[str, int] = {}
        for record in self.records:
            if len(record.features) != arity:
                raise MalformedRow(
                    f"Record {record.key} has {len(record.features)} features, expected {arity}",
                    firm_id=record.firm_id, year=record.year)
            if record.failed not in (0, 1):
                raise BadLabel(f"Record {record.key} has label {record.failed!r}; labels must be 0 or 1",
                               firm_id=record.firm_id, year=record.year)
            if record.key in seen:
                raise DuplicateKey(f"Duplicate (firm_id, year) key {record.key}",
                                   firm_id=record.firm_id, year=record.year)
            seen.add(record.key)
            if record.failed == 1:
                if record.firm_id in failure_year:
                    raise BadLabel(f"Firm {record.firm_id} fails twice", firm_id=record.firm_id)
                failure_year[record.firm_id] = record.year
            last_year[record.firm_id] = max(record.year, last_year.get(record.firm_id, record.year))
        for firm_id, year in failure_year.items():
            if last_year[firm_id] > year:
                raise BadLabel(
                    f"Firm {firm_id} has records after its failure year {year}",
                    firm_id=firm_id, year=year)

    def __len__(self) -> int:
        return len(self.records)

    @cached_property
    def feature_matrix(self) -> np.ndarray:
        """Features as floats, NaN where the mask is set"""
        matrix = np.full((len(self.records), len(self.feature_names)), np.nan)
        for i, record in enumerate(self.records):
            for j, value in enumerate(record.features):
                if value is not None:
                    matrix[i, j] = value
        matrix.setflags(write=False)
        return matrix

    @cached_property
    def missing_matrix(self) -> np.ndarray:
        mask = np.array([record.missing_mask for record in self.records], dtype=bool)
        mask = mask.reshape(len(self.records), len(self.feature_names))
        mask.setflags(write=False)
        return mask

    @cached_property
    def labels(self) -> np.ndarray:
        labels = np.array([record.failed for record in self.records], dtype=np.int8)
        labels.setflags(write=False)
        return labels

    @cached_property
    def firm_ids(self) -> np.ndarray:
        return np.array([record.firm_id for record in self.records], dtype=object)

    @cached_property
    def years(self) -> np.ndarray:
        return np.array([record.year for record in self.records], dtype=np.int64)

    def keys(self) -> List[Tuple[str, int]]:
        return [record.key for record in self.records]

    def subset(self, indices: Sequence[int]) -> 'FirmPanel':
        return FirmPanel(
            records=tuple(self.records[i] for i in indices),
            feature_names=self.feature_names,
            group_labels=self.group_labels,
        )


def panel_from_arrays(firm_ids: Sequence[str], years: Sequence[int], features: np.ndarray,
                      failed: Sequence[int], feature_names: Sequence[str],
                      group_labels: Optional[Dict[str, str]] = None) -> FirmPanel:
    """Build a panel from parallel arrays; NaN entries of `features` become missing"""
    records = []
    for i in range(len(firm_ids)):
        row = tuple(None if np.isnan(value) else float(value) for value in features[i])
        records.append(FirmYearRecord(str(firm_ids[i]), int(years[i]), row, int(failed[i])))
    return FirmPanel(tuple(records), tuple(feature_names), group_labels)


def _parse_value(token: str, line_number: int, column: str) -> Optional[float]:
    if token.strip().lower() in MISSING_TOKENS:
        return None
    try:
        return float(token)
    except ValueError:
        raise MalformedRow(f"Line {line_number}: column '{column}' is not numeric: {token!r}",
                           line=line_number, column=column)


def load_csv(path: str, schema: Optional[Sequence[str]] = None,
             group_labels: Optional[Dict[str, str]] = None) -> FirmPanel:
    """
    Load a firm-year panel from CSV

    Args:
        path: CSV file with header `firm_id,year,failed,<feature...>`
        schema: Expected feature names; taken from the header when None
        group_labels: Optional feature -> group map attached to the panel

    Returns:
        FirmPanel with "NA", empty and "NaN" cells marked missing
    """
    if not os.path.exists(path):
        raise IoError(f"Panel file not found: {path}", path=path)

    records = []
    seen = {}
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaMismatch(f"{path} is empty; expected a header row", path=path)
        header = [column.strip() for column in header]
        if tuple(header[:3]) != KEY_COLUMNS:
            raise SchemaMismatch(f"Header must start with {','.join(KEY_COLUMNS)}; got {header[:3]}",
                                 path=path)
        feature_names = tuple(header[3:])
        if schema is not None and tuple(schema) != feature_names:
            raise SchemaMismatch(f"Header features {list(feature_names)} do not match schema {list(schema)}",
                                 path=path)

        for line_number, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise MalformedRow(f"Line {line_number}: expected {len(header)} cells, found {len(row)}",
                                   line=line_number)
            firm_id = row[0].strip()
            try:
                year = int(row[1])
            except ValueError:
                raise MalformedRow(f"Line {line_number}: year {row[1]!r} is not an integer",
                                   line=line_number)
            label = row[2].strip()
            if label not in ('0', '1'):
                raise BadLabel(f"Line {line_number}: failed must be 0 or 1, got {label!r}",
                               line=line_number)
            key = (firm_id, year)
            if key in seen:
                raise DuplicateKey(f"Line {line_number}: (firm_id, year) {key} already seen on line {seen[key]}",
                                   line=line_number, firm_id=firm_id, year=year)
            seen[key] = line_number
            features = tuple(_parse_value(token, line_number, column)
                             for token, column in zip(row[3:], feature_names))
            records.append(FirmYearRecord(firm_id, year, features, int(label)))

    panel = FirmPanel(tuple(records), feature_names, group_labels)
    logger.info("Loaded %d firm-year records (%d features) from %s", len(panel), len(feature_names), path)
    return panel


def save_csv(panel: FirmPanel, path: str) -> None:
    """Write a panel in the load_csv schema; missing entries are written as NA"""
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(list(KEY_COLUMNS) + list(panel.feature_names))
        for record in panel.records:
            cells = [MISSING_TOKEN if value is None else repr(float(value)) for value in record.features]
            writer.writerow([record.firm_id, str(record.year), str(record.failed)] + cells)


def groups_path_for(panel_path: str) -> str:
    """Sibling group-label path: panel.csv -> panel_groups.csv"""
    root, ext = os.path.splitext(panel_path)
    return f"{root}_groups{ext or '.csv'}"


def save_group_labels(group_labels: Dict[str, str], path: str) -> None:
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['feature', 'group'])
        for name, group in group_labels.items():
            writer.writerow([name, group])


def load_group_labels(path: str) -> Optional[Dict[str, str]]:
    """feature -> group map, or None when the file does not exist"""
    if not os.path.exists(path):
        return None
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ['feature', 'group']:
            raise SchemaMismatch(f"{path} must have the header feature,group", path=path)
        return {row[0]: row[1] for row in reader if row}


@dataclass(frozen=True)
class FoldPlan:
    """Assignment of every row to one of k folds"""
    k: int
    seed: int
    assignments: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, 'assignments', tuple(int(a) for a in self.assignments))

    @property
    def fold_array(self) -> np.ndarray:
        return np.asarray(self.assignments, dtype=np.int64)

    def fold_sizes(self) -> List[int]:
        return np.bincount(self.fold_array, minlength=self.k).tolist()

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_array == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_array != fold)

    def splits(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        for fold in range(self.k):
            yield self.train_indices(fold), self.test_indices(fold)

    def to_json(self) -> str:
        return json.dumps({'k': self.k, 'seed': self.seed, 'assignments': list(self.assignments)})

    @classmethod
    def from_json(cls, text: str) -> 'FoldPlan':
        data = json.loads(text)
        return cls(k=int(data['k']), seed=int(data['seed']), assignments=tuple(data['assignments']))


def stratify_labels(labels: Sequence[int], k: int, seed: int) -> FoldPlan:
    """
    Stratified fold assignment for a label vector

    Each label stratum is shuffled with its own PCG64 stream derived from `seed`;
    the shuffled positives then negatives are dealt round-robin over the folds,
    so fold sizes and per-fold class counts each differ by at most one.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if k < 2:
        raise TooFewRecords(f"k must be at least 2, got {k}", k=k)
    if n < k:
        raise TooFewRecords(f"{n} records cannot fill {k} folds", n=n, k=k)
    positives = np.flatnonzero(labels == 1)
    negatives = np.flatnonzero(labels != 1)
    if len(positives) and len(negatives) and min(len(positives), len(negatives)) < k:
        raise TooFewRecords(
            f"Each label needs at least {k} records; got {len(positives)} positive, {len(negatives)} negative",
            positives=len(positives), negatives=len(negatives), k=k)

    pos_stream, neg_stream = np.random.SeedSequence(seed).spawn(2)
    order = np.concatenate([
        np.random.Generator(np.random.PCG64(pos_stream)).permutation(positives),
        np.random.Generator(np.random.PCG64(neg_stream)).permutation(negatives),
    ])
    assignments = np.empty(n, dtype=np.int64)
    assignments[order] = np.arange(n) % k
    return FoldPlan(k=k, seed=seed, assignments=tuple(assignments.tolist()))


def stratified_kfold(panel: FirmPanel, k: int, seed: int) -> FoldPlan:
    """Stratified k-fold plan over panel records by failure label"""
    return stratify_labels(panel.labels, k, seed)


def complete_case_filter(panel: FirmPanel) -> FirmPanel:
    """Records with zero missing features; the input panel is left untouched"""
    kept = tuple(record for record in panel.records if record.n_missing == 0)
    logger.debug("Complete-case filter kept %d of %d records", len(kept), len(panel))
    return FirmPanel(kept, panel.feature_names, panel.group_labels)


@dataclass(frozen=True)
class MissingnessSummary:
    feature_names: Tuple[str, ...]
    n_records: int
    n_by_label: Dict[int, int]
    missing_counts: np.ndarray
    missing_counts_by_label: Dict[int, np.ndarray]

    @property
    def feature_rates(self) -> Dict[str, float]:
        if self.n_records == 0:
            return {name: 0.0 for name in self.feature_names}
        return {name: float(count) / self.n_records
                for name, count in zip(self.feature_names, self.missing_counts)}

    @property
    def rates_by_label(self) -> Dict[int, Dict[str, float]]:
        rates = {}
        for label, counts in self.missing_counts_by_label.items():
            n = self.n_by_label[label]
            rates[label] = {name: (float(c) / n if n else 0.0) for name, c in zip(self.feature_names, counts)}
        return rates

    def overall_rate_by_label(self, label: int) -> float:
        """Share of missing cells among records with the given label"""
        n = self.n_by_label[label] * len(self.feature_names)
        return float(self.missing_counts_by_label[label].sum()) / n if n else 0.0

    def to_frame(self) -> pd.DataFrame:
        by_label = self.rates_by_label
        return pd.DataFrame({
            'feature': list(self.feature_names),
            'missing_rate': [self.feature_rates[name] for name in self.feature_names],
            'missing_rate_survivors': [by_label[0][name] for name in self.feature_names],
            'missing_rate_failed': [by_label[1][name] for name in self.feature_names],
            'missing_count': self.missing_counts.tolist(),
        })


def missingness_summary(panel: FirmPanel) -> MissingnessSummary:
    """Per-feature missing rates overall and split by failure label"""
    mask = panel.missing_matrix
    labels = panel.labels
    counts_by_label = {label: mask[labels == label].sum(axis=0).astype(np.int64) for label in (0, 1)}
    return MissingnessSummary(
        feature_names=panel.feature_names,
        n_records=len(panel),
        n_by_label={label: int((labels == label).sum()) for label in (0, 1)},
        missing_counts=mask.sum(axis=0).astype(np.int64),
        missing_counts_by_label=counts_by_label,
    )


@dataclass
class SupervisedTable:
    """
    One row per (firm, t) pairing features observed at t-1 with the outcome at t

    X holds NaN where `mask` is set; learners pick their own missing encoding.
    """
    firm_ids: np.ndarray
    years: np.ndarray
    X: np.ndarray
    mask: np.ndarray
    y: np.ndarray
    feature_names: Tuple[str, ...]
    dropped: int = 0
    group_labels: Optional[Dict[str, str]] = None

    def __len__(self) -> int:
        return len(self.y)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @property
    def complete_rows(self) -> np.ndarray:
        return ~self.mask.any(axis=1)

    @property
    def has_missing(self) -> bool:
        return bool(self.mask.any())

    def subset(self, rows) -> 'SupervisedTable':
        rows = np.asarray(rows)
        return SupervisedTable(
            firm_ids=self.firm_ids[rows], years=self.years[rows], X=self.X[rows], mask=self.mask[rows],
            y=self.y[rows], feature_names=self.feature_names, dropped=self.dropped,
            group_labels=self.group_labels)

    def complete_case(self) -> 'SupervisedTable':
        return self.subset(np.flatnonzero(self.complete_rows))

    def with_features(self, X: np.ndarray) -> 'SupervisedTable':
        """Same rows with a replacement feature matrix (e.g. after imputation)"""
        X = np.asarray(X, dtype=float)
        return SupervisedTable(
            firm_ids=self.firm_ids, years=self.years, X=X, mask=np.isnan(X), y=self.y,
            feature_names=self.feature_names, dropped=self.dropped, group_labels=self.group_labels)

    @classmethod
    def from_arrays(cls, X, y, feature_names: Optional[Sequence[str]] = None,
                    firm_ids=None, years=None) -> 'SupervisedTable':
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        n = X.shape[0]
        names = tuple(feature_names) if feature_names is not None else tuple(f"x{j}" for j in range(X.shape[1]))
        return cls(
            firm_ids=np.asarray(firm_ids if firm_ids is not None else [f"r{i}" for i in range(n)], dtype=object),
            years=np.asarray(years if years is not None else np.zeros(n), dtype=np.int64),
            X=X, mask=np.isnan(X), y=np.asarray(y, dtype=np.int8), feature_names=names)


def lag_join(panel: FirmPanel) -> SupervisedTable:
    """
    Pair X_{i,t-1} with Y_{i,t}

    Rows whose firm has no record at exactly t-1 are dropped and counted.
    """
    index = {record.key: i for i, record in enumerate(panel.records)}
    features = panel.feature_matrix
    current, previous = [], []
    dropped = 0
    for i, record in enumerate(panel.records):
        j = index.get((record.firm_id, record.year - 1))
        if j is None:
            dropped += 1
            continue
        current.append(i)
        previous.append(j)

    current = np.asarray(current, dtype=np.int64)
    previous = np.asarray(previous, dtype=np.int64)
    X = features[previous].copy() if len(previous) else np.empty((0, len(panel.feature_names)))
    table = SupervisedTable(
        firm_ids=panel.firm_ids[current] if len(current) else np.empty(0, dtype=object),
        years=panel.years[current] if len(current) else np.empty(0, dtype=np.int64),
        X=X,
        mask=np.isnan(X),
        y=panel.labels[current].astype(np.int8) if len(current) else np.empty(0, dtype=np.int8),
        feature_names=panel.feature_names,
        dropped=dropped,
        group_labels=panel.group_labels,
    )
    logger.info("Lag join produced %d supervised rows, dropped %d without a t-1 record", len(table), dropped)
    return table
