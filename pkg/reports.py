"""
Report emission
CSV tables with a fixed missing token and deterministic SVG plots
"""

import logging
import os
from typing import Mapping, Optional, Sequence

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from errors import IoError  # noqa: E402
from panel_data import MISSING_TOKEN  # noqa: E402

logger = logging.getLogger(__name__)

# fixed salt and no date metadata keep SVG output byte-identical across runs
plt.rcParams.update({
    'svg.hashsalt': 'distress-reports',
    'svg.fonttype': 'none',
    'font.size': 10,
    'axes.grid': True,
    'grid.alpha': 0.3,
})


def ensure_dir(path: str) -> str:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise IoError(f"Cannot create output directory {path}: {e}", path=path) from e
    if not os.access(path, os.W_OK):
        raise IoError(f"Output directory is not writable: {path}", path=path)
    return path


def write_csv(frame: pd.DataFrame, path: str) -> str:
    """Write a report table; missing cells become NA"""
    try:
        frame.to_csv(path, index=False, na_rep=MISSING_TOKEN, lineterminator='\n')
    except OSError as e:
        raise IoError(f"Cannot write {path}: {e}", path=path) from e
    logger.debug("Wrote %d rows to %s", len(frame), path)
    return path


def read_csv(path: str) -> pd.DataFrame:
    """Inverse of write_csv: only the NA token is read as missing"""
    if not os.path.exists(path):
        raise IoError(f"Report file not found: {path}", path=path)
    return pd.read_csv(path, keep_default_na=False, na_values=[MISSING_TOKEN])


def _save_svg(fig, path: str) -> str:
    try:
        fig.savefig(path, format='svg', bbox_inches='tight', metadata={'Date': None})
    except OSError as e:
        raise IoError(f"Cannot write {path}: {e}", path=path) from e
    finally:
        plt.close(fig)
    return path


def line_plot(frame: pd.DataFrame, x: str, series: Sequence[str], path: str, title: str = '',
              xlabel: Optional[str] = None, ylabel: Optional[str] = None,
              labels: Optional[Mapping[str, str]] = None) -> str:
    """One line per column in `series` against column `x`"""
    fig, ax = plt.subplots(figsize=(7, 4))
    for column in series:
        ax.plot(frame[x], frame[column], marker='o', markersize=3,
                label=labels.get(column, column) if labels else column)
    ax.set_xlabel(xlabel or x)
    ax.set_ylabel(ylabel or '')
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend(frameon=False)
    return _save_svg(fig, path)


def curve_plot(curves: pd.DataFrame, path: str, title: str = '') -> str:
    """
    Mean ROC and PR curves side by side

    Args:
        curves: Long table with model, curve ('roc' or 'pr'), x, y
    """
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, (curve, xlabel, ylabel) in zip(axes, (('roc', 'False positive rate', 'True positive rate'),
                                                  ('pr', 'Recall', 'Precision'))):
        subset = curves[curves['curve'] == curve]
        for model in pd.unique(subset['model']):
            points = subset[subset['model'] == model]
            ax.plot(points['x'], points['y'], label=model)
        if curve == 'roc':
            ax.plot([0, 1], [0, 1], linestyle='--', color='grey', linewidth=0.8)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.legend(frameon=False, fontsize=8)
    if title:
        fig.suptitle(title)
    return _save_svg(fig, path)


def bar_plot(frame: pd.DataFrame, label: str, value: str, path: str, title: str = '',
             error: Optional[str] = None) -> str:
    """Horizontal bars sorted by value, largest on top"""
    ordered = frame.sort_values(value, kind='mergesort')
    fig, ax = plt.subplots(figsize=(7, max(2.5, 0.35 * len(ordered) + 1)))
    xerr = None
    if error is not None and ordered[error].notna().any():
        xerr = ordered[error].fillna(0.0)
    ax.barh(ordered[label].astype(str), ordered[value], xerr=xerr, color='#4C72B0')
    ax.axvline(0.0, color='black', linewidth=0.8)
    ax.set_xlabel(value)
    if title:
        ax.set_title(title)
    return _save_svg(fig, path)
