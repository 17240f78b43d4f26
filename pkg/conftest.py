"""
Shared fixtures for the distress toolkit tests
"""

import numpy as np
import pytest

from panel_data import FirmPanel, FirmYearRecord
from synth import SynthConfig, generate_panel


def make_panel(rows, feature_names=('f1', 'f2'), group_labels=None) -> FirmPanel:
    """rows: iterable of (firm_id, year, failed, features)"""
    records = tuple(FirmYearRecord(firm, year, tuple(features), failed) for firm, year, failed, features in rows)
    return FirmPanel(records, tuple(feature_names), group_labels)


@pytest.fixture
def tiny_panel() -> FirmPanel:
    """A fails in 2011, B is seen once, C survives three years"""
    return make_panel([
        ('A', 2010, 0, (1.0, None)),
        ('A', 2011, 1, (2.0, 3.0)),
        ('B', 2012, 0, (0.5, 0.5)),
        ('C', 2010, 0, (0.1, 0.2)),
        ('C', 2011, 0, (None, 0.3)),
        ('C', 2012, 0, (0.4, 0.6)),
    ])


@pytest.fixture(scope='session')
def small_synth():
    """A few hundred firms with MNAR missingness"""
    return generate_panel(SynthConfig(n_firms=400, n_years=6, n_features=5, seed=11))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(2024))
