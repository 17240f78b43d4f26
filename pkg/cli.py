"""
Distress toolkit command line
Synthesizes panels and writes the horse-race, proxy-score, zombie and Shapley reports

Usage:
    python cli.py synth --out output
    python cli.py cv --input output/panel.csv --folds 5 --seed 7
    python cli.py all --seed 7 --jobs 4
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from baselines import fit_logit_lasso
from credit_scores import Direction, cross_validated_cutoff_report, percentile_cutoff_report, proxy_scores
from errors import ConfigError, DistressError, IoError, exit_code_for
from horse_race import HorseRaceResult, fit_full, run_horse_race
from metrics import missingness_chi_squared, missingness_odds_ratios
from panel_data import (FirmPanel, SupervisedTable, groups_path_for, lag_join, load_csv, load_group_labels,
                        missingness_summary, save_csv, save_group_labels, stratify_labels)
from reports import bar_plot, curve_plot, ensure_dir, line_plot, write_csv
from run_config import RunConfig, load_run_config
from shapley import explain_model, group_shapley
from synth import GroundTruth, generate_panel, load_truth_csv, truth_path_for, write_truth_csv
from zombie import (RiskPanel, analyze, bacc_cutoff_scan, flags_frame, overlap_by_group, overlap_report,
                    zombie_share_by_group)

logger = logging.getLogger(__name__)

# Proxy scores compared in the goodness-of-fit report
SCORE_DIRECTIONS = {
    'z_score': Direction.LOW_IS_RISKY,
    'dtd': Direction.LOW_IS_RISKY,
    'merton_pd': Direction.HIGH_IS_RISKY,
}
INDICATORS = ('icr_below_one', 'negative_value_added')
GROUP_COLUMNS = ('region', 'industry')


@dataclass
class Workspace:
    """State shared by the subcommands of one invocation"""
    config: RunConfig
    panel: Optional[FirmPanel] = None
    truth: Optional[GroundTruth] = None
    table: Optional[SupervisedTable] = None
    race: Optional[HorseRaceResult] = None

    def path(self, name: str) -> str:
        return os.path.join(self.config.out, name)

    def write(self, frame: pd.DataFrame, name: str) -> str:
        path = write_csv(frame, self.path(name))
        print(f"✅ Wrote {path}")
        return path


def _load_panel(ws: Workspace) -> None:
    if ws.panel is not None:
        return
    if not ws.config.input:
        raise ConfigError("This command needs --input (or [run] input) pointing at a panel CSV")
    groups = ws.config.shap.groups or load_group_labels(groups_path_for(ws.config.input))
    ws.panel = load_csv(ws.config.input, group_labels=dict(groups) if groups else None)
    truth_path = truth_path_for(ws.config.input)
    if os.path.exists(truth_path):
        ws.truth = load_truth_csv(truth_path)


def _table(ws: Workspace) -> SupervisedTable:
    if ws.table is None:
        _load_panel(ws)
        ws.table = lag_join(ws.panel)
    return ws.table


def _require_truth(ws: Workspace) -> GroundTruth:
    _load_panel(ws)
    if ws.truth is None:
        path = truth_path_for(ws.config.input)
        raise IoError(f"Proxy inputs not found: {path}", path=path)
    return ws.truth


def cmd_synth(ws: Workspace) -> None:
    """Panel, ground truth and feature groups under the output directory"""
    panel, truth = generate_panel(ws.config.synth)
    panel_path = ws.path('panel.csv')
    save_csv(panel, panel_path)
    print(f"✅ Wrote {panel_path} ({len(panel)} firm-years)")
    write_truth_csv(truth, truth_path_for(panel_path))
    print(f"✅ Wrote {truth_path_for(panel_path)}")
    save_group_labels(panel.group_labels, groups_path_for(panel_path))
    print(f"✅ Wrote {groups_path_for(panel_path)}")
    ws.panel, ws.truth, ws.table = panel, truth, None


def cmd_cv(ws: Workspace) -> None:
    """Cross-validated horse race plus the missingness diagnostics"""
    config = ws.config
    table = _table(ws)
    plan = stratify_labels(table.y, config.folds, config.seed)
    with open(ws.path('folds.json'), 'w', encoding='utf-8') as f:
        f.write(plan.to_json())
    print(f"✅ Wrote {ws.path('folds.json')}")

    race = run_horse_race(table, config.models, plan, boost_defaults=config.boost, seed=config.seed,
                          n_jobs=config.jobs, timings=config.timings)
    ws.race = race
    ws.write(race.metrics, 'horse_race.csv')
    ws.write(race.fold_metrics, 'horse_race_folds.csv')
    ws.write(pd.concat([race.out_of_fold(name) for name in config.model_names], ignore_index=True),
             'oof_predictions.csv')
    ws.write(race.curves, 'roc_pr_curves.csv')
    curve_plot(race.curves, ws.path('roc_pr_curves.svg'), title='Cross-validated ROC and PR curves')
    print(f"✅ Wrote {ws.path('roc_pr_curves.svg')}")

    ws.write(missingness_summary(ws.panel).to_frame(), 'missingness_summary.csv')
    ws.write(missingness_odds_ratios(ws.panel), 'missingness_odds_ratios.csv')
    ws.write(missingness_chi_squared(ws.panel), 'missingness_chi_squared.csv')
    try:
        path = fit_logit_lasso(table.complete_case(), n_jobs=config.jobs)
    except DistressError as e:
        print(f"⚠️  Skipped LASSO ranking: {e.message}")
    else:
        ws.write(path.ranking(), 'lasso_ranking.csv')


def _lagged_proxies(ws: Workspace, table: SupervisedTable) -> pd.DataFrame:
    """Proxy inputs at t-1 for every supervised row (firm, t)"""
    frame = _require_truth(ws).frame.set_index(['firm_id', 'year'])
    keys = pd.MultiIndex.from_arrays([table.firm_ids.astype(str), table.years - 1], names=['firm_id', 'year'])
    return frame.reindex(keys).reset_index(drop=True)


def cmd_scores(ws: Workspace) -> None:
    """Percentile precision/FDR of the proxy scores, in-sample and across folds"""
    config = ws.config
    table = _table(ws)
    scores = proxy_scores(_lagged_proxies(ws, table), config.scores.linear_spec, config.scores.merton)
    plan = stratify_labels(table.y, config.folds, config.seed)
    in_sample, cross_validated = [], []
    for name, direction in SCORE_DIRECTIONS.items():
        values = scores[name].to_numpy()
        in_sample.append(percentile_cutoff_report(values, table.y, direction).assign(score=name))
        cross_validated.append(cross_validated_cutoff_report(values, table.y, plan, direction).assign(score=name))
    if ws.race is not None:
        model = config.risk_model
        risk = ws.race.out_of_fold(model)
        in_sample.append(percentile_cutoff_report(risk['probability'].to_numpy(), risk['failed'].to_numpy(),
                                                  Direction.HIGH_IS_RISKY).assign(score=model))
    ws.write(pd.concat(in_sample, ignore_index=True), 'score_cutoffs.csv')
    ws.write(pd.concat(cross_validated, ignore_index=True), 'score_cutoffs_cv.csv')


def _risk_panel(ws: Workspace) -> RiskPanel:
    config = ws.config
    if ws.race is None:
        table = _table(ws)
        plan = stratify_labels(table.y, config.folds, config.seed)
        ws.race = run_horse_race(table, [config.model(config.risk_model)], plan, boost_defaults=config.boost,
                                 seed=config.seed, n_jobs=config.jobs, timings=config.timings)
    return ws.race.risk_panel(config.risk_model)


def _keyed(mapping: Dict, risk: RiskPanel) -> np.ndarray:
    return np.array([mapping.get(key, 0) for key in risk.keys()])


def cmd_zombie(ws: Workspace) -> None:
    """Deciles, zombie flags, shares, transitions and the BACC cutoff scan"""
    settings = ws.config.zombie
    risk = _risk_panel(ws)
    ws.write(risk.to_frame(), 'risk_predictions.csv')
    report = analyze(risk, decile=settings.decile, window=settings.window, survivors_only=settings.survivors_only)
    ws.write(report.thresholds.to_frame(), 'decile_thresholds.csv')
    ws.write(flags_frame(risk, report.flags), 'zombie_flags.csv')
    ws.write(report.shares, 'zombie_shares.csv')
    ws.write(report.transitions.to_frame(), 'decile_transitions.csv')
    ws.write(report.outcomes, 'zombie_outcomes.csv')

    scan = bacc_cutoff_scan(risk, grid=settings.cutoff_grid, scale=settings.bacc_scale)
    ws.write(scan.frame, 'bacc_scan.csv')
    line_plot(scan.frame, 'cutoff', ['bacc'], ws.path('bacc_scan.svg'), title='Balanced accuracy by cutoff',
              xlabel=f"cutoff ({scan.scale})", ylabel='BACC')
    print(f"✅ Wrote {ws.path('bacc_scan.svg')} (best cutoff {scan.best_cutoff:.2f}, BACC {scan.best_bacc:.3f})")

    if ws.truth is None:
        return
    for column in GROUP_COLUMNS:
        groups = ws.truth.group_of(column)
        ws.write(zombie_share_by_group(risk, report.flags, groups, name=column), f'zombie_shares_by_{column}.csv')
    overlaps, by_group = [], []
    for indicator in INDICATORS:
        values = _keyed(ws.truth.indicator(indicator), risk)
        overlap = overlap_report(report.flags, values)
        overlaps.append({'indicator': indicator, 'common_support': overlap.common_support,
                         'zombie_only': overlap.zombie_only, 'indicator_only': overlap.indicator_only,
                         'n_union': overlap.n_union})
        for column in GROUP_COLUMNS:
            frame = overlap_by_group(risk, report.flags, values, ws.truth.group_of(column), name='group')
            by_group.append(frame.assign(indicator=indicator, grouping=column))
    ws.write(pd.DataFrame(overlaps), 'zombie_overlap.csv')
    ws.write(pd.concat(by_group, ignore_index=True), 'zombie_overlap_by_group.csv')


def cmd_shap(ws: Workspace) -> None:
    """Shapley attribution of the explained model's AUC, per feature and per group"""
    config = ws.config
    settings = config.shap
    spec = config.model(settings.model)
    model, rows = fit_full(spec, _table(ws), boost_defaults=config.boost, seed=config.seed)
    report = explain_model(model, rows, group_labels=rows.group_labels,
                           background_size=settings.background_size, eval_size=settings.eval_size,
                           include_missingness=settings.include_missingness and spec.sample == 'all',
                           n_permutations=settings.n_permutations, exact_limit=settings.exact_limit,
                           seed=config.seed, n_jobs=config.jobs)
    values = report.to_frame()
    ws.write(values, 'shap_values.csv')
    groups = group_shapley(report, report.groups)
    ws.write(groups, 'shap_groups.csv')
    bar_plot(values, 'feature', 'phi', ws.path('shap_values.svg'), title=f"Shapley values of AUC ({spec.name})",
             error='se')
    bar_plot(groups, 'group', 'phi', ws.path('shap_groups.svg'), title='Shapley values by group', error='se')
    print(f"✅ Wrote {ws.path('shap_values.svg')} and {ws.path('shap_groups.svg')}")


def cmd_all(ws: Workspace) -> None:
    """Every report from one seed; synthesizes a panel when no input is given"""
    if not ws.config.input:
        cmd_synth(ws)
    cmd_cv(ws)
    if ws.truth is not None:
        cmd_scores(ws)
    else:
        print("⚠️  No proxy inputs next to the panel; skipped scores")
    cmd_zombie(ws)
    cmd_shap(ws)


COMMANDS = {
    'synth': cmd_synth,
    'cv': cmd_cv,
    'scores': cmd_scores,
    'zombie': cmd_zombie,
    'shap': cmd_shap,
    'all': cmd_all,
}


def build_parser() -> argparse.ArgumentParser:
    defaults = RunConfig()
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--input', help='Panel CSV (firm_id,year,failed,<features>)')
    common.add_argument('--config', help='TOML run file with [run], [synth], [[models]], [boost], [zombie], '
                                         '[shap] and [scores] sections')
    common.add_argument('--seed', type=int, help=f'Root seed (default: {defaults.seed}, env DISTRESS_SEED)')
    common.add_argument('--folds', type=int, help=f'Cross-validation folds (default: {defaults.folds})')
    common.add_argument('--jobs', type=int, help=f'Parallel workers, -1 for all cores '
                                                 f'(default: {defaults.jobs}, env DISTRESS_JOBS)')
    common.add_argument('--out', help=f'Output directory (default: {defaults.out}, env DISTRESS_OUT_DIR)')
    common.add_argument('--timings', action='store_true', default=None,
                        help='Report wall-clock seconds per model (default: NA for byte-identical reruns)')

    parser = argparse.ArgumentParser(description='Missing-aware firm distress prediction and zombie reports')
    subparsers = parser.add_subparsers(dest='command', required=True)
    for name, command in COMMANDS.items():
        subparsers.add_parser(name, parents=[common], help=command.__doc__)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand; returns the process exit code"""
    args = build_parser().parse_args(argv)
    try:
        config = load_run_config(args.config, overrides={
            'input': args.input, 'seed': args.seed, 'folds': args.folds, 'jobs': args.jobs,
            'out': args.out, 'timings': args.timings,
        })
        logging.basicConfig(level=config.log_level, format='%(asctime)s %(levelname)s %(name)s: %(message)s')
        ensure_dir(config.out)
        COMMANDS[args.command](Workspace(config))
    except DistressError as e:
        print(json.dumps(e.to_dict()), file=sys.stderr)
        print(f"❌ {e.message}")
        return exit_code_for(e)
    return 0


if __name__ == '__main__':
    sys.exit(main())
