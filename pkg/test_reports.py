"""
Tests for CSV and SVG report emission
"""

import numpy as np
import pandas as pd
import pytest

from errors import IoError
from reports import bar_plot, curve_plot, ensure_dir, line_plot, read_csv, write_csv


@pytest.fixture
def frame():
    return pd.DataFrame({'method': ['logit', 'mia_boost'], 'AUC': [0.81, np.nan], 'time_seconds': [None, 1.5]})


class TestCsv:
    def test_missing_cells_written_as_na(self, tmp_path, frame):
        path = write_csv(frame, str(tmp_path / 'race.csv'))
        lines = (tmp_path / 'race.csv').read_text(encoding='utf-8').splitlines()
        assert path.endswith('race.csv')
        assert lines[0] == 'method,AUC,time_seconds'
        assert lines[1] == 'logit,0.81,NA'
        assert lines[2] == 'mia_boost,NA,1.5'

    def test_read_back(self, tmp_path, frame):
        path = write_csv(frame, str(tmp_path / 'race.csv'))
        back = read_csv(path)
        assert back['method'].tolist() == ['logit', 'mia_boost']
        assert np.isnan(back['AUC'].iloc[1])
        assert back['time_seconds'].iloc[1] == 1.5

    def test_only_na_token_is_missing(self, tmp_path):
        path = write_csv(pd.DataFrame({'label': ['N/A', 'null', None]}), str(tmp_path / 'labels.csv'))
        back = read_csv(path)
        assert back['label'].iloc[:2].tolist() == ['N/A', 'null']
        assert pd.isna(back['label'].iloc[2])

    def test_unwritable_path(self, tmp_path, frame):
        with pytest.raises(IoError):
            write_csv(frame, str(tmp_path / 'absent' / 'race.csv'))

    def test_missing_report(self, tmp_path):
        with pytest.raises(IoError):
            read_csv(str(tmp_path / 'absent.csv'))


class TestEnsureDir:
    def test_creates_nested(self, tmp_path):
        path = ensure_dir(str(tmp_path / 'a' / 'b'))
        assert (tmp_path / 'a' / 'b').is_dir()
        assert ensure_dir(path) == path

    def test_path_under_a_file(self, tmp_path):
        blocker = tmp_path / 'file'
        blocker.write_text('x', encoding='utf-8')
        with pytest.raises(IoError):
            ensure_dir(str(blocker / 'out'))


class TestSvg:
    def test_line_plot_is_byte_identical(self, tmp_path):
        scan = pd.DataFrame({'cutoff': np.linspace(0.1, 0.9, 9), 'bacc': np.linspace(0.5, 0.8, 9)})
        first = line_plot(scan, 'cutoff', ['bacc'], str(tmp_path / 'a.svg'), title='scan')
        second = line_plot(scan, 'cutoff', ['bacc'], str(tmp_path / 'b.svg'), title='scan')
        first_bytes = (tmp_path / 'a.svg').read_bytes()
        assert first_bytes == (tmp_path / 'b.svg').read_bytes()
        assert first_bytes.lstrip().startswith(b'<?xml')
        assert first != second

    def test_curve_plot_is_byte_identical(self, tmp_path):
        grid = np.linspace(0, 1, 11)
        curves = pd.concat([
            pd.DataFrame({'model': m, 'curve': c, 'x': grid, 'y': y})
            for m in ('logit', 'mia_boost') for c, y in (('roc', np.sqrt(grid)), ('pr', 1 - 0.5 * grid))
        ], ignore_index=True)
        curve_plot(curves, str(tmp_path / 'a.svg'))
        curve_plot(curves, str(tmp_path / 'b.svg'))
        assert (tmp_path / 'a.svg').read_bytes() == (tmp_path / 'b.svg').read_bytes()

    def test_bar_plot_with_partial_errors(self, tmp_path):
        values = pd.DataFrame({'feature': ['x0', 'x1', 'missing:x0'], 'phi': [0.2, -0.01, 0.05],
                               'se': [0.01, np.nan, 0.02]})
        bar_plot(values, 'feature', 'phi', str(tmp_path / 'a.svg'), error='se')
        bar_plot(values, 'feature', 'phi', str(tmp_path / 'b.svg'), error='se')
        text = (tmp_path / 'a.svg').read_text(encoding='utf-8')
        assert 'missing:x0' in text
        assert text == (tmp_path / 'b.svg').read_text(encoding='utf-8')

    def test_unwritable_svg(self, tmp_path):
        scan = pd.DataFrame({'cutoff': [0.1, 0.2], 'bacc': [0.5, 0.6]})
        with pytest.raises(IoError):
            line_plot(scan, 'cutoff', ['bacc'], str(tmp_path / 'absent' / 'scan.svg'))
