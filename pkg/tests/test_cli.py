# -*- coding: utf-8 -*-

import csv
import logging
import os

import pytest

from cfdg_lab import main
from cfdglib import get_cfdglib_version
from cfdglib.augmentor import stream_seed
from cfdglib.diagnostics import read_curve_csv, read_divergence_csv
from cfdglib.envsuite import make_env
from cfdglib.numkernel import load_networks
from cfdglib.rlcore import evaluate
from experiment_controller import REPORT_HEADER
from settings_manager import SettingsManager

TINY = {
    'experiment': 'tiny',
    'seeds': '0,1',
    'dataset_size': '200',
    'offline_steps': '20',
    'online_steps': '20',
    'eval_every': '10',
    'eval_episodes': '2',
    'batch_size': '16',
    'hidden_width': '16',
    'hidden_depth': '2',
    'refresh_every': '10',
    'gen_count_per_refresh': '40',
    'diffusion_updates_per_refresh': '3',
    'chunk_size': '20',
    'denoiser_width': '16',
    'denoiser_depth': '2',
    'embed_dim': '4',
    'diffusion_batch_size': '16',
    'n_sample_steps': '4',
}


def _config(tmp_path, name='lab.cfg', **overrides):
    manager = SettingsManager()
    for key, value in {**TINY, 'output_dir': str(tmp_path / 'out'), **overrides}.items():
        manager.set(key, value)
    return manager.save(str(tmp_path / name))


def _pipeline(config):
    assert main(['gen-data', '--config', config]) == 0
    assert main(['train-offline', '--config', config]) == 0
    assert main(['finetune', '--config', config, '--mode', 'baseline']) == 0
    assert main(['finetune', '--config', config, '--mode', 'cfdg']) == 0
    assert main(['report', '--config', config]) == 0


def _read_rows(path):
    with open(path, newline='', encoding='utf-8') as f:
        return list(csv.reader(f))


def test_init_config(tmp_path):
    path = str(tmp_path / 'new.cfg')
    assert main(['init-config', '--config', path]) == 0
    assert SettingsManager(path).settings == SettingsManager.DEFAULT_SETTINGS
    assert main(['init-config', '--config', path]) == 3
    assert main(['init-config', '--config', path, '--force']) == 0


def test_gen_data_writes_every_seed(tmp_path):
    config = _config(tmp_path)
    assert main(['gen-data', '--config', config]) == 0
    for seed in (0, 1):
        path = tmp_path / 'out' / 'tiny' / 'data' / str(seed) / 'dataset.csv'
        lines = path.read_text(encoding='utf-8').splitlines()
        assert lines[0] == 's0,s1,a0,a1,r,ns0,ns1,terminal'
        assert len(lines) == 201
    assert (tmp_path / 'out' / 'tiny' / 'cfdg_lab.log').exists()


def test_gen_data_single_seed(tmp_path):
    config = _config(tmp_path)
    assert main(['gen-data', '--config', config, '--seed', '7']) == 0
    data_dir = tmp_path / 'out' / 'tiny' / 'data'
    assert sorted(os.listdir(data_dir)) == ['7']


def test_invalid_config_exits_with_2(tmp_path, caplog):
    config = _config(tmp_path, env='HalfCheetah')
    with caplog.at_level(logging.ERROR, logger='CFDGLab'):
        assert main(['gen-data', '--config', config]) == 2
    assert 'env' in caplog.text


def test_unknown_key_exits_with_2(tmp_path):
    path = tmp_path / 'bad.cfg'
    path.write_text('learning_rate = 0.1\n', encoding='utf-8')
    assert main(['gen-data', '--config', str(path)]) == 2


def test_missing_inputs_exit_with_3(tmp_path):
    config = _config(tmp_path)
    assert main(['gen-data', '--config', str(tmp_path / 'missing.cfg')]) == 3
    assert main(['train-offline', '--config', config]) == 3
    assert main(['report', '--config', config]) == 3
    assert main(['gen-data', '--config', config]) == 0
    assert main(['finetune', '--config', config, '--mode', 'baseline']) == 3


def test_pipeline_outputs(tmp_path):
    config = _config(tmp_path)
    _pipeline(config)
    root = tmp_path / 'out' / 'tiny'

    for seed in (0, 1):
        rows = read_curve_csv(str(root / 'offline' / str(seed) / 'curve.csv'))
        assert [row.step for row in rows] == [0, 10, 20]
        assert (root / 'baseline' / str(seed) / 'agent.ckpt').exists()
        assert not (root / 'baseline' / str(seed) / 'divergence.csv').exists()
        assert (root / 'cfdg' / str(seed) / 'denoiser.ckpt').exists()
        assert (root / 'cfdg' / str(seed) / 'denoiser.ckpt.codec.json').exists()
        pairs = {e.pair for e in read_divergence_csv(str(root / 'cfdg' / str(seed) / 'divergence.csv'))}
        assert pairs == {'off_vs_on', 'syn_on_vs_on', 'syn_off_vs_on', 'syn_all_vs_on'}

    report = _read_rows(str(root / 'report.csv'))
    assert report[0] == REPORT_HEADER
    assert [(row[0], row[1], row[4]) for row in report[1:]] == [
        (step, mode, '2') for mode in ('baseline', 'cfdg') for step in ('0', '10', '20')]
    finals = _read_rows(str(root / 'final_scores.csv'))
    assert [row[0] for row in finals[1:]] == ['baseline', 'cfdg']
    divergence = _read_rows(str(root / 'divergence_report.csv'))
    assert {row[2] for row in divergence[1:]} == {'cfdg'}
    assert len(divergence) == 1 + 12


def test_checkpoint_reproduces_last_evaluation(tmp_path):
    config = _config(tmp_path, seeds='0')
    assert main(['gen-data', '--config', config]) == 0
    assert main(['train-offline', '--config', config]) == 0
    run_dir = tmp_path / 'out' / 'tiny' / 'offline' / '0'
    nets = load_networks(str(run_dir / 'agent.ckpt'))
    last = read_curve_csv(str(run_dir / 'curve.csv'))[-1]
    assert evaluate(make_env('PointMass-2D'), nets['policy'], 2, stream_seed(0, 'eval')) == last.ret


REPRODUCED_FILES = [
    'data/0/dataset.csv',
    'offline/1/agent.ckpt',
    'baseline/0/curve.csv',
    'cfdg/1/agent.ckpt',
    'cfdg/1/curve.csv',
    'cfdg/0/divergence.csv',
    'cfdg/0/denoiser.ckpt',
    'report.csv',
    'final_scores.csv',
]


def test_pipeline_is_reproducible(tmp_path_factory):
    roots = []
    for run in ('a', 'b'):
        base = tmp_path_factory.mktemp(run)
        _pipeline(_config(base))
        roots.append(base / 'out' / 'tiny')
    for relative in REPRODUCED_FILES:
        assert (roots[0] / relative).read_bytes() == (roots[1] / relative).read_bytes(), relative


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as excinfo:
        main(['--version'])
    assert excinfo.value.code == 0
    assert get_cfdglib_version() in capsys.readouterr().out
