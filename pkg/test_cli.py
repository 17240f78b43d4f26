"""
End-to-end tests for the command line
"""

import json
import os

import pytest

from cli import COMMANDS, build_parser, main
from panel_data import save_csv
from reports import read_csv

ENV_VARS = ('DISTRESS_OUT_DIR', 'DISTRESS_JOBS', 'DISTRESS_SEED', 'DISTRESS_LOG_LEVEL')
SMALL_RUN = """
[run]
folds = 3

[synth]
n_firms = 400
n_years = 6
n_features = 4

[boost]
n_rounds = 10
max_depth = 3

[shap]
n_permutations = 30
background_size = 32
eval_size = 300

[[models]]
name = "logit"
learner = "logit"
sample = "complete"

[[models]]
name = "ma_xgboost"
learner = "boost"
params = { missing_strategy = "DefaultDirections" }

[[models]]
name = "mia_boost"
learner = "boost"
params = { missing_strategy = "MIA" }
"""
ALL_ARTIFACTS = (
    'panel.csv', 'panel_truth.csv', 'panel_groups.csv', 'folds.json',
    'horse_race.csv', 'horse_race_folds.csv', 'oof_predictions.csv', 'roc_pr_curves.csv', 'roc_pr_curves.svg',
    'missingness_summary.csv', 'missingness_odds_ratios.csv', 'missingness_chi_squared.csv',
    'score_cutoffs.csv', 'score_cutoffs_cv.csv',
    'risk_predictions.csv', 'decile_thresholds.csv', 'zombie_flags.csv', 'zombie_shares.csv',
    'decile_transitions.csv', 'zombie_outcomes.csv', 'bacc_scan.csv', 'bacc_scan.svg',
    'zombie_shares_by_region.csv', 'zombie_shares_by_industry.csv', 'zombie_overlap.csv',
    'shap_values.csv', 'shap_groups.csv', 'shap_values.svg', 'shap_groups.svg',
)


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ENV_VARS:
        monkeypatch.delenv(name, raising=False)


@pytest.fixture(scope='module')
def run_file(tmp_path_factory):
    path = tmp_path_factory.mktemp('config') / 'run.toml'
    path.write_text(SMALL_RUN, encoding='utf-8')
    return str(path)


@pytest.fixture(scope='module')
def all_runs(tmp_path_factory, run_file):
    """Two `all` runs from the same seed into separate directories"""
    outs = []
    with pytest.MonkeyPatch.context() as mp:
        for name in ENV_VARS:
            mp.delenv(name, raising=False)
        for attempt in ('first', 'second'):
            out = str(tmp_path_factory.mktemp(attempt))
            assert main(['all', '--config', run_file, '--seed', '7', '--out', out]) == 0
            outs.append(out)
    return outs


def error_payload(capsys):
    """The JSON error object printed on stderr"""
    for line in reversed(capsys.readouterr().err.splitlines()):
        if line.startswith('{'):
            return json.loads(line)
    raise AssertionError("no error JSON on stderr")


def test_parser_knows_every_command():
    parser = build_parser()
    for command in COMMANDS:
        args = parser.parse_args([command, '--seed', '3', '--timings'])
        assert args.command == command and args.seed == 3 and args.timings


class TestAll:
    def test_writes_every_artifact(self, all_runs):
        out = all_runs[0]
        missing = [name for name in ALL_ARTIFACTS if not os.path.exists(os.path.join(out, name))]
        assert missing == []

    def test_byte_identical_reruns(self, all_runs):
        first, second = all_runs
        assert sorted(os.listdir(first)) == sorted(os.listdir(second))
        for name in sorted(os.listdir(first)):
            with open(os.path.join(first, name), 'rb') as a, open(os.path.join(second, name), 'rb') as b:
                assert a.read() == b.read(), name

    def test_horse_race_table(self, all_runs):
        race = read_csv(os.path.join(all_runs[0], 'horse_race.csv'))
        assert list(race.columns) == ['method', 'AUC', 'PR', 'F1-Score', 'BACC', 'R²', 'time_seconds']
        assert race['method'].tolist() == ['logit', 'ma_xgboost', 'mia_boost']
        assert race['time_seconds'].isna().all()
        assert race.set_index('method').loc[['ma_xgboost', 'mia_boost'], 'AUC'].between(0.5, 1.0).all()

    def test_zombie_reports_follow_risk_model(self, all_runs):
        out = all_runs[0]
        risk = read_csv(os.path.join(out, 'risk_predictions.csv'))
        oof = read_csv(os.path.join(out, 'oof_predictions.csv'))
        mia = oof[oof['model'] == 'mia_boost']
        assert len(risk) == len(mia)
        transitions = read_csv(os.path.join(out, 'decile_transitions.csv'))
        assert not transitions.empty

    def test_shapley_groups(self, all_runs):
        groups = read_csv(os.path.join(all_runs[0], 'shap_groups.csv'))
        values = read_csv(os.path.join(all_runs[0], 'shap_values.csv'))
        assert 'Missingness' in set(groups['group'])
        assert len(values) == 8
        assert groups['phi'].sum() == pytest.approx(values['phi'].sum())


def test_synth_then_cv_on_emitted_file(tmp_path, run_file):
    data = str(tmp_path / 'data')
    assert main(['synth', '--config', run_file, '--out', data]) == 0
    panel = os.path.join(data, 'panel.csv')
    assert os.path.exists(os.path.join(data, 'panel_truth.csv'))
    assert os.path.exists(os.path.join(data, 'panel_groups.csv'))

    out = str(tmp_path / 'cv')
    assert main(['cv', '--config', run_file, '--input', panel, '--out', out]) == 0
    race = read_csv(os.path.join(out, 'horse_race.csv'))
    assert race['method'].tolist() == ['logit', 'ma_xgboost', 'mia_boost']
    folds = json.loads((tmp_path / 'cv' / 'folds.json').read_text(encoding='utf-8'))
    assert folds['k'] == 3 and folds['seed'] == 7


def test_timings_flag_fills_seconds(tmp_path, run_file):
    data = str(tmp_path / 'data')
    assert main(['synth', '--config', run_file, '--out', data]) == 0
    out = str(tmp_path / 'cv')
    assert main(['cv', '--config', run_file, '--input', os.path.join(data, 'panel.csv'), '--out', out,
                 '--timings']) == 0
    race = read_csv(os.path.join(out, 'horse_race.csv')).set_index('method')
    assert (race.loc[['ma_xgboost', 'mia_boost'], 'time_seconds'] > 0).all()


class TestErrors:
    def test_missing_input_is_config_error(self, tmp_path, capsys):
        assert main(['cv', '--out', str(tmp_path)]) == 2
        assert error_payload(capsys)['error'] == 'config_error'

    def test_bad_folds(self, tmp_path, capsys):
        assert main(['synth', '--folds', '1', '--out', str(tmp_path)]) == 2
        payload = error_payload(capsys)
        assert payload['details'] == {'folds': 1}

    def test_absent_panel_is_io_error(self, tmp_path, capsys):
        assert main(['cv', '--input', str(tmp_path / 'absent.csv'), '--out', str(tmp_path)]) == 3
        payload = error_payload(capsys)
        assert payload['error'] == 'io_error'
        assert payload['message'].startswith('Panel file not found')

    def test_unwritable_output(self, tmp_path, capsys):
        blocker = tmp_path / 'file'
        blocker.write_text('x', encoding='utf-8')
        assert main(['synth', '--out', str(blocker / 'out')]) == 3
        assert error_payload(capsys)['error'] == 'io_error'

    def test_scores_without_proxy_inputs(self, tmp_path, capsys, tiny_panel):
        panel = str(tmp_path / 'panel.csv')
        save_csv(tiny_panel, panel)
        assert main(['scores', '--input', panel, '--out', str(tmp_path / 'out')]) == 3
        assert error_payload(capsys)['error'] == 'io_error'

    def test_bad_panel_row_exits_one(self, tmp_path, capsys):
        panel = tmp_path / 'panel.csv'
        panel.write_text("firm_id,year,failed,f1\nA,2010,2,1.0\n", encoding='utf-8')
        assert main(['cv', '--input', str(panel), '--out', str(tmp_path / 'out')]) == 1
        assert error_payload(capsys)['error'] == 'bad_label'

    def test_unknown_config_section(self, tmp_path, capsys):
        path = tmp_path / 'run.toml'
        path.write_text("[plots]\ndpi = 1\n", encoding='utf-8')
        assert main(['synth', '--config', str(path), '--out', str(tmp_path)]) == 2
        assert error_payload(capsys)['error'] == 'config_error'
