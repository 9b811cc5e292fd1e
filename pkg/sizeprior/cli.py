# -*- coding: utf-8 -*-
"""Command line interface: ``sizeprior <subcommand>``."""
import dataclasses
import functools
import json
import logging
import os
from os.path import join

import click
import numpy as np

from sizeprior.bank import PriorBank
from sizeprior.bank_builder import build_bank
from sizeprior.config import (
    CONFIG_KEYS_HELP, Settings, get_seed, get_threads, load_run_config)
from sizeprior.errors import GradientCheckError, PrioError
from sizeprior.kitti_io import load_feature_file, load_label_dir, load_query_file
from sizeprior.metrics import build_report, read_pairs_file, write_pairs_file
from sizeprior.routing import RoutingParams, init_routing_params, route_batch
from sizeprior.sizepath_grad import run_gradcheck
from sizeprior import toy_harness

logger = logging.getLogger(__name__)

EXIT_VALIDATION = 1
EXIT_CHECK_FAILED = 2


class CommandError(click.ClickException):
    exit_code = EXIT_VALIDATION


def _handles_errors(fn):
    """Report library errors as ``<subcommand>: <message>`` with exit code 1."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except PrioError as exc:
            name = click.get_current_context().command_path
            raise CommandError(f'{name}: {exc}') from exc
    return wrapper


def _dump_json(data, path: str):
    text = json.dumps(data, sort_keys=True, indent=2, separators=(',', ': ')) + '\n'
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(text)


def _read_bytes(path: str) -> bytes:
    with open(path, 'rb') as f:
        return f.read()


def _bad_option(option: str, message: str):
    name = click.get_current_context().command_path
    raise CommandError(f'{name}: {option}: {message}')


def _parse_seeds(text: str) -> list:
    try:
        return [int(s) for s in text.split(',') if s.strip()]
    except ValueError:
        _bad_option('--seeds', f'expected comma-separated integers, got {text!r}')


def _run_config(ctx, path):
    return load_run_config(path, ctx.obj['overrides'])


@click.group(epilog='\b\n' + CONFIG_KEYS_HELP)
@click.option('-v', '--verbose', count=True, help='Increase log verbosity (-v info, -vv debug).')
@click.option('--threads', type=int, default=None,
              help='Cap worker threads (default: PRIO_THREADS or 1).')
@click.option('--set', 'overrides', multiple=True, metavar='KEY=VALUE',
              help='Override a config key by dotted path, e.g. cap.lambda_cap=0.1.')
@click.option('--cache-dir', default='', help='Directory for persisted toy runs.')
@click.option('--no-cache', is_flag=True, help='Disable the toy run cache.')
@click.pass_context
def main(ctx, verbose, threads, overrides, cache_dir, no_cache):
    """Adaptive size-prior pathway: prior banks, routing, CAP and diagnostics."""
    logging.basicConfig(level=max(logging.WARNING - 10 * verbose, logging.DEBUG),
                        format='%(levelname)s %(name)s: %(message)s')
    if cache_dir:
        Settings.cache_dir = cache_dir
    if no_cache:
        Settings.disable_cache = True
    ctx.ensure_object(dict)
    try:
        ctx.obj['threads'] = get_threads(threads)
    except PrioError as exc:
        raise CommandError(f'{ctx.command_path}: {exc}') from exc
    ctx.obj['overrides'] = list(overrides)


@main.command('build-bank')
@click.option('--labels', 'labels_dir', required=True, type=click.Path(exists=True, file_okay=False),
              help='Directory of KITTI label_2 .txt files.')
@click.option('--features', 'features_path', required=True, type=click.Path(exists=True, dir_okay=False),
              help='PRIOFEAT feature file keyed by instance_key.')
@click.option('--config', 'config_path', default=None, type=click.Path(exists=True, dir_okay=False),
              help='YAML run config.')
@click.option('--out', 'out_path', required=True, type=click.Path(dir_okay=False),
              help='Output bank file.')
@click.option('--seed', type=int, default=None, help='Bank seed (flag > PRIO_SEED > config).')
@click.pass_context
@_handles_errors
def build_bank_cmd(ctx, labels_dir, features_path, config_path, out_path, seed):
    """Build a prior bank from labels and precomputed features."""
    cfg = _run_config(ctx, config_path)
    bank_cfg = dataclasses.replace(cfg.bank, seed=get_seed(seed, cfg.bank.seed))
    labels = load_label_dir(labels_dir)
    features = load_feature_file(_read_bytes(features_path), source=str(features_path))
    bank = build_bank(labels, features, cfg.filter, bank_cfg, ctx.obj['threads'])
    bank.save(out_path)
    click.echo(f'{bank} -> {out_path}')


@main.command('inspect-bank')
@click.argument('bank_path', type=click.Path(exists=True, dir_okay=False))
@click.option('--class', 'class_name', default=None, help='Only show this class.')
@_handles_errors
def inspect_bank(bank_path, class_name):
    """Print classes, slice sizes and per-prototype statistics."""
    bank = PriorBank.load(bank_path)
    click.echo(f'classes: {", ".join(bank.classes)}')
    click.echo('slices: ' + ', '.join(f'{c}={b - a}' for c, (a, b) in zip(bank.classes,
                                                                           bank.slices)))
    names = [class_name] if class_name else bank.classes
    for name in names:
        c = bank.class_index(name)
        start, stop = bank.slices[c]
        click.echo('')
        click.echo(f'{name}')
        click.echo(f'  {"k":>3} {"count":>6} {"mu (h, w, l)":>24} {"sigma (h, w, l)":>24}')
        for k in range(start, stop):
            p = bank.prototypes[k]
            mu = ' '.join(f'{v:7.3f}' for v in p.mu_lin)
            sig = ' '.join(f'{v:7.3f}' for v in p.sigma_lin)
            click.echo(f'  {k:>3} {p.count:>6d} {mu:>24} {sig:>24}')


@main.command('route')
@click.option('--bank', 'bank_path', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--queries', 'queries_path', required=True,
              type=click.Path(exists=True, dir_okay=False),
              help='PRIOFEAT version 2 query file: the feature layout plus a u32 n_classes '
                   'header field and n_classes x f32 class probabilities per record.')
@click.option('--params', 'params_path', default=None, type=click.Path(exists=True, dir_okay=False),
              help='.npz with W_q, W_k and alpha; initialised from routing config if omitted.')
@click.option('--config', 'config_path', default=None, type=click.Path(exists=True, dir_okay=False))
@click.option('--out', 'out_path', required=True, type=click.Path(dir_okay=False),
              help='Output file, one tab-separated line per query in input order: '
                   'K assignment weights, mu_hat (h, w, l), sigma_hat (h, w, l).')
@click.pass_context
@_handles_errors
def route_cmd(ctx, bank_path, queries_path, params_path, config_path, out_path):
    """Route queries to mixture priors over a bank."""
    bank = PriorBank.load(bank_path)
    keys, Q, P = load_query_file(_read_bytes(queries_path), source=str(queries_path))
    if params_path:
        params = RoutingParams.load(params_path)
    else:
        cfg = _run_config(ctx, config_path)
        params = init_routing_params(Q.shape[1], bank.feature_dim, cfg.routing.proj_dim,
                                     cfg.routing.init_seed)
    A, mu_hat, sigma_hat, _ = route_batch(Q, P, params, bank)
    with open(out_path, 'w', encoding='utf-8', newline='\n') as f:
        for i in range(len(keys)):
            values = np.concatenate([A[i], mu_hat[i], sigma_hat[i]])
            f.write('\t'.join(repr(float(v)) for v in values) + '\n')
    click.echo(f'routed {len(keys)} queries -> {out_path}')


@main.command('gradcheck')
@click.option('--config', 'config_path', default=None, type=click.Path(exists=True, dir_okay=False))
@click.option('--trials', type=int, default=None, help='Number of random instances.')
@click.pass_context
@_handles_errors
def gradcheck_cmd(ctx, config_path, trials):
    """Check analytic size-path gradients against central differences."""
    run_cfg = _run_config(ctx, config_path)
    cfg = dataclasses.replace(run_cfg.gradcheck, seed=get_seed(None, run_cfg.gradcheck.seed))
    if trials is not None:
        cfg = dataclasses.replace(cfg, trials=trials)
    summary = run_gradcheck(cfg, ctx.obj['threads'])
    click.echo(summary.format_text())
    try:
        summary.raise_on_failure()
    except GradientCheckError as exc:
        click.echo(f'{ctx.command_path}: {exc}', err=True)
        ctx.exit(EXIT_CHECK_FAILED)


@main.command('metrics')
@click.option('--pairs', 'pairs_path', required=True, type=click.Path(exists=True, dir_okay=False),
              help='Tab-separated matched pairs: class, pred h/w/l, gt h/w/l, '
                   '[sigma h/w/l], [occlusion].')
@click.option('--tau', type=float, default=0.2, show_default=True,
              help='Outlier threshold on mean relative error (strict).')
@click.option('--ap', default=None, metavar='CAR,PED,CYC',
              help='Moderate AP values for the unified score.')
@click.option('--sigma-reduce', type=click.Choice(['mean', 'max']), default='mean',
              show_default=True, help='Per-pair uncertainty scalar for tercile bins.')
@click.option('--out', 'out_path', default=None, type=click.Path(dir_okay=False),
              help='Also write the report as JSON.')
@_handles_errors
def metrics_cmd(pairs_path, tau, ap, sigma_reduce, out_path):
    """Size-error metrics on matched pairs."""
    pairs = read_pairs_file(pairs_path)
    ap_values = None
    if ap:
        try:
            ap_values = tuple(float(v) for v in ap.split(','))
        except ValueError:
            ap_values = ()
        if len(ap_values) != 3:
            _bad_option('--ap', 'expected three comma-separated numbers')
    report = build_report(pairs, tau, ap_moderate=ap_values, reduce=sigma_reduce)
    click.echo(report.format_text())
    if out_path:
        _dump_json(report.to_dict(), out_path)


# %% Toy harness

@main.group('toy')
def toy():
    """Synthetic ambiguity experiment."""


def _toy_options(fn):
    fn = click.option('--config', 'config_path', default=None,
                      type=click.Path(exists=True, dir_okay=False))(fn)
    fn = click.option('--mode', type=click.Choice(toy_harness.MODES + ('all',)), default='all',
                      show_default=True)(fn)
    fn = click.option('--seeds', default=None, help='Comma-separated seeds (default: run seed).')(fn)
    fn = click.option('--out', 'out_dir', required=True, type=click.Path(file_okay=False))(fn)
    fn = click.option('--train-fraction', type=float, default=None,
                      help='Fraction of the train split to use.')(fn)
    return fn


def _toy_setup(ctx, config_path, mode, seeds):
    cfg = _run_config(ctx, config_path)
    seeds = _parse_seeds(seeds) if seeds else [get_seed(None, cfg.seed)]
    modes = toy_harness.MODES if mode == 'all' else (mode,)
    return cfg, seeds, modes


@toy.command('train')
@_toy_options
@click.pass_context
@_handles_errors
def toy_train(ctx, config_path, mode, seeds, out_dir, train_fraction):
    """Train size heads and save banks and parameters per seed."""
    cfg, seeds, modes = _toy_setup(ctx, config_path, mode, seeds)
    fraction = cfg.toy.train_fraction if train_fraction is None else train_fraction
    os.makedirs(out_dir, exist_ok=True)
    for seed in seeds:
        data = toy_harness.generate_dataset(cfg.toy, seed)
        train = toy_harness.subsample(data.train, fraction)
        bank = toy_harness.build_toy_bank(train, cfg, seed, ctx.obj['threads'])
        bank.save(join(out_dir, f'bank-seed{seed}.json'))
        for m in modes:
            result = toy_harness.train_head(train, bank, m, cfg.toy, cfg.conditioning, cfg.cap,
                                            cfg.routing, seed)
            path = join(out_dir, f'{m}-seed{seed}.npz')
            toy_harness.save_trained(result, path)
            click.echo(f'seed {seed} {m}: final loss {result.history[-1]:.6f} -> {path}')


@toy.command('eval')
@_toy_options
@click.pass_context
@_handles_errors
def toy_eval(ctx, config_path, mode, seeds, out_dir, train_fraction):
    """Evaluate trained heads; dump matched pairs and metrics."""
    cfg, seeds, modes = _toy_setup(ctx, config_path, mode, seeds)
    for seed in seeds:
        data = toy_harness.generate_dataset(cfg.toy, seed)
        bank = PriorBank.load(join(out_dir, f'bank-seed{seed}.json'))
        for m in modes:
            trained = toy_harness.load_trained(join(out_dir, f'{m}-seed{seed}.npz'))
            ev = toy_harness.evaluate_run(data.val, trained, bank, cfg.toy, cfg.conditioning,
                                          cfg.cap)
            stem = join(out_dir, f'{m}-seed{seed}')
            write_pairs_file(ev.pairs, stem + '-pairs.tsv')
            _dump_json(ev.report.to_dict(), stem + '-metrics.json')
            with open(stem + '-metrics.txt', 'w', encoding='utf-8') as f:
                f.write(ev.report.format_text() + '\n')
            click.echo(f'== seed {seed} {m}')
            click.echo(ev.report.format_text())


@toy.command('suite')
@_toy_options
@click.option('--low-data', is_flag=True,
              help='Also run strong-prior suites at 20% and 40% of the train split.')
@click.pass_context
@_handles_errors
def toy_suite(ctx, config_path, mode, seeds, out_dir, train_fraction, low_data):
    """All modes over all seeds with medians and trend verdicts."""
    cfg, seeds, _ = _toy_setup(ctx, config_path, mode, seeds)
    os.makedirs(out_dir, exist_ok=True)
    summary = toy_harness.run_suite(cfg, seeds, train_fraction, ctx.obj['threads'])
    _dump_json(summary.to_dict(), join(out_dir, 'summary.json'))
    with open(join(out_dir, 'summary.txt'), 'w', encoding='utf-8') as f:
        f.write(summary.format_text() + '\n')
    click.echo(summary.format_text())
    if low_data:
        trend = toy_harness.low_data_trend(cfg, seeds, threads=ctx.obj['threads'])
        _dump_json(trend, join(out_dir, 'low_data.json'))
        click.echo('')
        click.echo('low-data gaps (baseline - inject_cap size MAE): ' + ', '.join(
            f'{k}={v:.4f}' for k, v in trend['gaps'].items()))
        click.echo(f'beats baseline: {trend["beats_baseline"]}, '
                   f'smallest fraction gap >= full: {trend["smallest_gap_ge_full"]}')


if __name__ == '__main__':
    main()
