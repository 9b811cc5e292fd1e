# -*- coding: utf-8 -*-
import json
import os
from glob import glob

import numpy as np
import pytest
from click.testing import CliRunner

from sizeprior.bank import PriorBank
from sizeprior.cli import main
from sizeprior.kitti_io import write_feature_file, write_query_file


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def feature_path(tmp_path, features):
    path = tmp_path / 'features.bin'
    path.write_bytes(write_feature_file(features))
    return str(path)


@pytest.fixture
def bank_path(runner, tmp_path, label_dir, feature_path):
    out = str(tmp_path / 'bank.json')
    result = runner.invoke(main, ['build-bank', '--labels', str(label_dir), '--features',
                                  feature_path, '--out', out, '--seed', '5'])
    assert result.exit_code == 0, result.output
    return out


def test_build_bank_is_reproducible(runner, tmp_path, label_dir, feature_path, bank_path):
    again = str(tmp_path / 'again.json')
    result = runner.invoke(main, ['--threads', '2', 'build-bank', '--labels', str(label_dir),
                                  '--features', feature_path, '--out', again, '--seed', '5'])
    assert result.exit_code == 0, result.output
    with open(bank_path, 'rb') as a, open(again, 'rb') as b:
        assert a.read() == b.read()
    assert PriorBank.load(again).classes == ('Car', 'Pedestrian', 'Cyclist')


def test_inspect_bank(runner, bank_path):
    result = runner.invoke(main, ['inspect-bank', bank_path])
    assert result.exit_code == 0, result.output
    assert 'classes: Car, Pedestrian, Cyclist' in result.output
    assert 'slices: Car=' in result.output
    one = runner.invoke(main, ['inspect-bank', bank_path, '--class', 'Cyclist'])
    assert 'Cyclist' in one.output and '\nCar\n' not in one.output
    bad = runner.invoke(main, ['inspect-bank', bank_path, '--class', 'Truck'])
    assert bad.exit_code == 1
    assert 'inspect-bank' in bad.output and 'Truck' in bad.output


def test_route(runner, tmp_path, bank_path):
    bank = PriorBank.load(bank_path)
    rng = np.random.default_rng(0)
    Q = rng.normal(size=(3, 6))
    P = rng.dirichlet(np.ones(len(bank.classes)), size=3)
    queries = tmp_path / 'queries.bin'
    queries.write_bytes(write_query_file([11, 12, 13], Q, P))
    out = str(tmp_path / 'routes.tsv')
    result = runner.invoke(main, ['--set', 'routing.proj_dim=8', 'route', '--bank', bank_path,
                                  '--queries', str(queries), '--out', out])
    assert result.exit_code == 0, result.output
    with open(out) as f:
        rows = [[float(v) for v in line.split('\t')] for line in f.read().splitlines()]
    K = len(bank)
    assert len(rows) == 3
    for row in rows:
        assert len(row) == K + 6
        assert sum(row[:K]) == pytest.approx(1.0, abs=1e-9)
        assert all(v > 0.0 for v in row[K:])


def test_metrics_command(runner, tmp_path, pairs_path):
    out = str(tmp_path / 'report.json')
    result = runner.invoke(main, ['metrics', '--pairs', str(pairs_path), '--ap', '0.6,0.3,0.3',
                                  '--out', out])
    assert result.exit_code == 0, result.output
    assert 'unified' in result.output
    assert 'unimod = 0.4000' in result.output
    with open(out) as f:
        report = json.load(f)
    assert report['per_class']['unified']['outlier_ratio'] == 0.5
    assert report['per_class']['Car']['count'] == 2

    bad_ap = runner.invoke(main, ['metrics', '--pairs', str(pairs_path), '--ap', '0.6,0.3'])
    assert bad_ap.exit_code == 1
    assert 'metrics: --ap' in bad_ap.output


def test_metrics_reports_malformed_pairs(runner, tmp_path):
    path = tmp_path / 'broken.tsv'
    path.write_text('Car\t1.0\t1.0\n')
    result = runner.invoke(main, ['metrics', '--pairs', str(path)])
    assert result.exit_code == 1
    assert 'metrics' in result.output and 'line 1' in result.output


def test_gradcheck_command(runner):
    result = runner.invoke(main, ['--set', 'gradcheck.batch=2', 'gradcheck', '--trials', '2'])
    assert result.exit_code == 0, result.output
    assert 'PASS' in result.output
    failing = runner.invoke(main, ['--set', 'gradcheck.tol=-1.0', 'gradcheck', '--trials', '1'])
    assert failing.exit_code == 2
    assert 'FAIL' in failing.output


def test_unknown_config_key(runner):
    result = runner.invoke(main, ['--set', 'cap.lambda_kap=0.1', 'gradcheck', '--trials', '1'])
    assert result.exit_code == 1
    assert 'cap.lambda_kap' in result.output


def test_toy_train_and_eval(runner, tmp_path):
    out = str(tmp_path / 'toy')
    opts = ['--no-cache', '--set', 'toy.n_train=30', '--set', 'toy.n_val=30',
            '--set', 'toy.epochs=5', '--set', 'bank.min_support=3']
    result = runner.invoke(main, opts + ['toy', 'train', '--mode', 'inject_cap', '--seeds', '3',
                                         '--out', out])
    assert result.exit_code == 0, result.output
    assert os.path.exists(os.path.join(out, 'bank-seed3.json'))
    assert os.path.exists(os.path.join(out, 'inject_cap-seed3.npz'))

    result = runner.invoke(main, opts + ['toy', 'eval', '--mode', 'inject_cap', '--seeds', '3',
                                         '--out', out])
    assert result.exit_code == 0, result.output
    assert '== seed 3 inject_cap' in result.output
    with open(os.path.join(out, 'inject_cap-seed3-metrics.json')) as f:
        metrics = json.load(f)
    assert metrics['per_class']['unified']['count'] == 30
    assert set(metrics['strata']) == {'fully', 'partly', 'largely'}

    missing = runner.invoke(main, opts + ['toy', 'eval', '--mode', 'baseline', '--seeds', '3',
                                          '--out', out])
    assert missing.exit_code == 1


def test_toy_suite_writes_summary(runner, tmp_path):
    out = str(tmp_path / 'suite')
    result = runner.invoke(main, ['--cache-dir', str(tmp_path / 'cache'), '--set',
                                  'toy.n_train=30', '--set', 'toy.n_val=30', '--set',
                                  'toy.epochs=3', '--set', 'bank.min_support=3',
                                  'toy', 'suite', '--seeds', '0,1', '--out', out])
    assert result.exit_code == 0, result.output
    with open(os.path.join(out, 'summary.json')) as f:
        summary = json.load(f)
    assert summary['seeds'] == [0, 1]
    assert set(summary['medians']) == {'baseline', 'inject', 'inject_cap'}
    assert os.path.exists(os.path.join(out, 'summary.txt'))
    # runs are persisted under the cache directory
    assert glob(os.path.join(str(tmp_path / 'cache'), 'toy-runs*'))


def test_bad_seeds(runner, tmp_path):
    result = runner.invoke(main, ['toy', 'suite', '--seeds', '1,x', '--out', str(tmp_path)])
    assert result.exit_code == 1
    assert '--seeds' in result.output


def test_bad_threads_environment(runner, monkeypatch):
    monkeypatch.setenv('PRIO_THREADS', 'four')
    result = runner.invoke(main, ['gradcheck', '--trials', '1'])
    assert result.exit_code == 1
    assert 'PRIO_THREADS' in result.output


def test_gradcheck_follows_seed_environment(runner, monkeypatch):
    args = ['--set', 'gradcheck.batch=2', 'gradcheck', '--trials', '1']
    default = runner.invoke(main, args)
    monkeypatch.setenv('PRIO_SEED', '12345')
    seeded = runner.invoke(main, args)
    assert default.exit_code == 0
    assert 'trials=1' in seeded.output
    assert default.output != seeded.output
    monkeypatch.delenv('PRIO_SEED')
    by_config = runner.invoke(main, ['--set', 'seed=12345'] + args)
    assert by_config.output == seeded.output
