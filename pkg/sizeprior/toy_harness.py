# -*- coding: utf-8 -*-
"""
Desk-scale synthetic experiment for the size-prior pathway.

Instances of a class share 2D appearance but come from one of several metric
size modes. The query carries only noisy size evidence, and the noise grows
with the instance's mask level, so at high masks the image evidence alone no
longer determines metric size. Three training modes are compared:

- ``baseline``: residual head only (lambda0 = 0, lambda_cap = 0)
- ``inject``: routed prior injection, no CAP
- ``inject_cap``: injection plus CAP regularisation

The bank is built from the train split through the same filtering and
clustering pipeline as KITTI labels.
"""
import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from sizeprior.bank import PriorBank
from sizeprior.bank_builder import build_bank
from sizeprior.cap import staging_coefficient
from sizeprior.config import (
    BankConfig, CapConfig, ConditioningConfig, FilterThresholds, RoutingConfig, RunConfig,
    ToyConfig, apply_strong_prior, config_hash)
from sizeprior.errors import FormatError, NumericError, ValidationError
from sizeprior.kitti_io import FeatureTable, LabelInstance
from sizeprior.metrics import (
    OCCLUSION_BINS, MatchedPair, MetricsReport, build_report, routing_diagnostics)
from sizeprior.routing import RoutingParams, init_routing_params
from sizeprior.runcache import RunCache
from sizeprior.size_space import SizeTriple
from sizeprior.sizepath_grad import HeadParams, backward_sizepath, forward_sizepath

logger = logging.getLogger(__name__)

MODES = ('baseline', 'inject', 'inject_cap')
VAL_KEY_OFFSET = 10 ** 6

_RUNS = RunCache('toy-runs')


@dataclass(frozen=True, eq=False)
class ToyInstance:
    gt_size: SizeTriple
    class_id: int
    mode_id: int
    query: np.ndarray
    feature: np.ndarray
    mask: float
    p: np.ndarray
    key: int
    evidence: np.ndarray


@dataclass(frozen=True, eq=False)
class ToyDataset:
    train: tuple
    val: tuple
    classes: tuple


@dataclass(eq=False)
class TrainResult:
    mode: str
    head: HeadParams
    params: RoutingParams
    history: list = field(default_factory=list)


def _check_mode(mode: str):
    if mode not in MODES:
        raise ValidationError(f'unknown mode {mode!r}; expected one of {MODES}', field='mode')


# %% Data

def evidence_standardizer(cfg: ToyConfig) -> tuple:
    """Center and scale of the size evidence.

    The variance is that of log sizes under the configured mode mixture plus
    the evidence noise averaged over the mask levels, so queries have unit
    variance per component.
    """
    means, second = np.zeros(3), np.zeros(3)
    total = 0.0
    for modes in cfg.modes.values():
        weight = sum(m.weight for m in modes)
        for m in modes:
            w = m.weight / weight
            mu = np.log(m.mean)
            s2 = np.asarray(m.spread) ** 2
            means += w * mu
            second += w * (s2 + mu ** 2)
        total += 1.0
    means /= total
    var = second / total - means ** 2
    noise = cfg.evidence_noise ** 2 * np.mean([(1.0 + 4.0 * m) ** 2 for m in cfg.mask_levels])
    return means, np.sqrt(np.maximum(var + noise, 1e-12))


def _embedding(cfg: ToyConfig, seed: int) -> np.ndarray:
    rng = np.random.default_rng([int(seed), 0x51])
    M, _ = np.linalg.qr(rng.normal(size=(cfg.query_dim, 3)))
    return M


def _directions(cfg: ToyConfig, seed: int) -> dict:
    rng = np.random.default_rng([int(seed), 0x46])
    out = {}
    for c, name in enumerate(cfg.classes):
        for j in range(len(cfg.modes[name])):
            d = rng.normal(size=cfg.feature_dim)
            out[c, j] = d / np.linalg.norm(d)
    return out


def mask_label(cfg: ToyConfig, mask: float) -> str:
    """Stratum name of a mask level: fully/partly/largely for three levels."""
    if len(cfg.mask_levels) == len(OCCLUSION_BINS):
        return OCCLUSION_BINS[list(cfg.mask_levels).index(mask)]
    return f'mask={mask:g}'


def _draw(cfg: ToyConfig, n: int, rng, M, center, scale, directions, key_offset) -> list:
    classes = cfg.classes
    n_classes = len(classes)
    out = []
    for i in range(n):
        c = i % n_classes
        mask = cfg.mask_levels[(i // n_classes) % len(cfg.mask_levels)]
        modes = cfg.modes[classes[c]]
        weights = np.array([m.weight for m in modes])
        j = int(rng.choice(len(modes), p=weights / weights.sum()))
        mode = modes[j]
        log_gt = np.log(mode.mean) + np.asarray(mode.spread) * rng.normal(size=3)
        evidence = log_gt + cfg.evidence_noise * (1.0 + 4.0 * mask) * rng.normal(size=3)
        feature = directions[c, j] + cfg.feature_noise * rng.normal(size=cfg.feature_dim)
        p = np.full(n_classes, cfg.label_smoothing / n_classes)
        p[c] += 1.0 - cfg.label_smoothing
        out.append(ToyInstance(
            gt_size=SizeTriple(*np.exp(log_gt)),
            class_id=c,
            mode_id=j,
            query=M @ ((evidence - center) / scale),
            feature=feature,
            mask=float(mask),
            p=p,
            key=key_offset + i,
            evidence=evidence,
        ))
    return out


def generate_dataset(cfg: ToyConfig, seed: int) -> ToyDataset:
    """Deterministic train and val splits.

    Classes cycle over instances and mask levels cycle over class rounds, so
    every (class, mask) cell is equally populated.
    """
    M = _embedding(cfg, seed)
    center, scale = evidence_standardizer(cfg)
    directions = _directions(cfg, seed)
    train = _draw(cfg, cfg.n_train, np.random.default_rng([int(seed), 0x54]), M, center,
                  scale, directions, 0)
    val = _draw(cfg, cfg.n_val, np.random.default_rng([int(seed), 0x56]), M, center,
                scale, directions, VAL_KEY_OFFSET)
    logger.debug('Generated toy dataset seed=%d: %d train, %d val', seed, len(train), len(val))
    return ToyDataset(tuple(train), tuple(val), cfg.classes)


def subsample(train: Sequence[ToyInstance], fraction: float) -> list:
    """Leading fraction of the train split; class and mask cycling is preserved."""
    if not 0.0 < fraction <= 1.0:
        raise ValidationError(f'train fraction must be in (0, 1], got {fraction}',
                              field='train_fraction')
    return list(train[:max(1, int(round(fraction * len(train))))])


def to_labels(instances: Sequence[ToyInstance], classes) -> tuple:
    """Label records and feature table for the bank builder."""
    labels = []
    rows = {}
    for inst in instances:
        labels.append(LabelInstance(
            class_name=classes[inst.class_id], truncation=0.0, occlusion=0, alpha=0.0,
            bbox2d=(100.0, 100.0, 200.0, 200.0), size=inst.gt_size,
            location=(0.0, 1.5, 20.0), rotation_y=0.0, instance_key=inst.key))
        rows[inst.key] = inst.feature
    dim = len(instances[0].feature)
    return labels, FeatureTable(dim, rows)


def toy_bank_config(run_cfg: RunConfig, seed: int) -> BankConfig:
    return dataclasses.replace(run_cfg.bank, classes=run_cfg.toy.classes, seed=int(seed))


def build_toy_bank(train: Sequence[ToyInstance], run_cfg: RunConfig, seed: int,
                   threads: int = 1) -> PriorBank:
    """Prior bank from the train split only."""
    classes = run_cfg.toy.classes
    labels, table = to_labels(train, classes)
    thresholds = FilterThresholds({name: run_cfg.filter.per_class.get(
        name, FilterThresholds.default((name,)).per_class[name]) for name in classes})
    return build_bank(labels, table, thresholds, toy_bank_config(run_cfg, seed), threads)


# %% Training

def mode_configs(mode: str, cond_cfg: ConditioningConfig, cap_cfg: CapConfig) -> tuple:
    """Conditioning and CAP settings with the paths disabled per mode."""
    _check_mode(mode)
    if mode == 'baseline':
        cond_cfg = dataclasses.replace(cond_cfg, lambda0=0.0)
    if mode in ('baseline', 'inject'):
        cap_cfg = dataclasses.replace(cap_cfg, lambda_cap=0.0)
    return cond_cfg, cap_cfg


def _batch(instances: Sequence[ToyInstance]) -> tuple:
    Q = np.array([inst.query for inst in instances])
    P = np.array([inst.p for inst in instances])
    T = np.array([inst.gt_size.as_array() for inst in instances])
    y = np.array([inst.class_id for inst in instances], dtype=int)
    return Q, P, T, y


def stable_step(Q: np.ndarray, bank: PriorBank, cap_cfg: CapConfig,
                learning_rate: float) -> float:
    """Fixed gradient step for the head, capped at half its stability limit.

    For fixed routing the loss is quadratic in ``(W_h, b_h)`` with curvature at
    most ``L = 2 lmax(Q1^T Q1 / N) (1 + lambda_cap max(w_cap) / min(eta))``,
    ``Q1`` being ``Q`` with a column of ones. Gradient descent on it converges
    for steps below ``2 / L``; the step returned is ``min(learning_rate, 1 / L)``.
    """
    Q1 = np.hstack([Q, np.ones((len(Q), 1))])
    spread = float(np.linalg.eigvalsh(Q1.T @ Q1 / len(Q1))[-1])
    stiffness = 1.0
    if cap_cfg.lambda_cap > 0.0:
        w_max = max(cap_cfg.w_cap_vector(bank.classes))
        stiffness += cap_cfg.lambda_cap * w_max / float(bank.eta.min())
    return min(float(learning_rate), 1.0 / (2.0 * spread * stiffness))


def train_head(train: Sequence[ToyInstance], bank: PriorBank, mode: str, cfg: ToyConfig,
               cond_cfg: ConditioningConfig, cap_cfg: CapConfig,
               routing_cfg: RoutingConfig = RoutingConfig(), seed: int = 0) -> TrainResult:
    """Full-batch gradient descent on the residual head and routing projections.

    Both use fixed steps. The routing step is ``cfg.learning_rate``; with
    ``cfg.clamp_step`` the head step is capped by `stable_step`, since the
    whitened CAP term makes the head loss stiff when prototype spreads are small.

    Raises
    ------
    NumericError
        The loss or a gradient became non-finite; the message names the epoch.
    """
    cond_cfg, cap_cfg = mode_configs(mode, cond_cfg, cap_cfg)
    Q, P, T, y = _batch(train)
    head = HeadParams(np.zeros((3, Q.shape[1])), np.log(T).mean(axis=0))
    params = init_routing_params(Q.shape[1], bank.feature_dim, routing_cfg.proj_dim,
                                 routing_cfg.init_seed + int(seed))
    lr = cfg.learning_rate
    lr_head = lr
    if cfg.clamp_step:
        lr_head = stable_step(Q, bank, cap_cfg, lr)
        if lr_head < lr:
            logger.info('Head step for %s clamped from %g to %.3g', mode, lr, lr_head)
    history = []
    for epoch in range(cfg.epochs):
        loss, state = forward_sizepath(Q, P, params, bank, head, cond_cfg, cap_cfg, T,
                                       epoch, gt_class=y)
        if not np.isfinite(loss):
            raise NumericError(f'{mode} training diverged at epoch {epoch}: loss {loss}')
        history.append(float(loss))
        grads = backward_sizepath(state, staging_coefficient(epoch, cap_cfg)).gradients
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise NumericError(f'{mode} training diverged at epoch {epoch}: non-finite gradient')
        head = HeadParams(head.W_h - lr_head * grads['W_h'], head.b_h - lr_head * grads['b_h'])
        params = RoutingParams(params.W_q - lr * grads['W_q'], params.W_k - lr * grads['W_k'],
                               params.alpha)
    logger.info('Trained %s for %d epochs: loss %.5f -> %.5f', mode, cfg.epochs,
                history[0], history[-1])
    return TrainResult(mode, head, params, history)


def save_trained(result: TrainResult, path: str):
    np.savez(path, mode=np.array(result.mode), W_h=result.head.W_h, b_h=result.head.b_h,
             W_q=result.params.W_q, W_k=result.params.W_k,
             alpha=np.float64(result.params.alpha), history=np.array(result.history))


def load_trained(path: str) -> TrainResult:
    try:
        with np.load(path) as d:
            return TrainResult(str(d['mode']), HeadParams(np.array(d['W_h']), np.array(d['b_h'])),
                               RoutingParams(np.array(d['W_q']), np.array(d['W_k']),
                                             float(d['alpha'])),
                               [float(v) for v in d['history']])
    except KeyError as exc:
        raise FormatError('missing array', source=str(path), field=str(exc.args[0]))
    except OSError as exc:
        raise ValidationError(str(exc), source=str(path))


# %% Evaluation

@dataclass(eq=False)
class ToyEvaluation:
    report: MetricsReport
    pairs: list
    weights: np.ndarray


def evaluate_run(val: Sequence[ToyInstance], trained: TrainResult, bank: PriorBank,
                 cfg: ToyConfig, cond_cfg: ConditioningConfig, cap_cfg: CapConfig) -> ToyEvaluation:
    """Metrics on the val split with mask strata, sigma bins and routing tables.

    The baseline reports neither sigma bins nor routing tables.
    """
    cond_cfg, cap_cfg = mode_configs(trained.mode, cond_cfg, cap_cfg)
    Q, P, T, y = _batch(val)
    _, state = forward_sizepath(Q, P, trained.params, bank, trained.head, cond_cfg, cap_cfg,
                                T, cfg.epochs, gt_class=y)
    s_hat = state.s_hat
    if not np.all(np.isfinite(s_hat)):
        raise NumericError(f'non-finite predicted size in {trained.mode} evaluation')
    routed = trained.mode != 'baseline'
    pairs = []
    for i, inst in enumerate(val):
        pairs.append(MatchedPair(
            SizeTriple(*s_hat[i]), inst.gt_size, cfg.classes[inst.class_id],
            tuple(float(v) for v in state.sigma_hat[i]) if routed else None,
            mask_label(cfg, inst.mask)))
    routing = routing_diagnostics(state.A, y, bank) if routed else None
    return ToyEvaluation(build_report(pairs, routing=routing), pairs, state.A)


# %% Suite

def run_metrics(evaluation: ToyEvaluation) -> dict:
    """Flat, picklable summary of one run."""
    report = evaluation.report
    u = report.unified
    out = {
        'size_mae': u.size_mae,
        'rel_mae': u.rel_mae,
        'outlier_ratio': u.outlier_ratio,
        'strata': {k: {'size_mae': m.size_mae, 'outlier_ratio': m.outlier_ratio}
                   for k, m in report.strata.items()},
    }
    if report.routing:
        out['routing'] = {k: {'top1_share': r.top1_share, 'active_used': r.active_used,
                              'active_total': r.active_total}
                          for k, r in report.routing.items()}
    return out


def _suite_hash(run_cfg: RunConfig) -> str:
    return config_hash({'toy': run_cfg.toy, 'bank': run_cfg.bank, 'filter': run_cfg.filter,
                        'routing': run_cfg.routing, 'conditioning': run_cfg.conditioning,
                        'cap': run_cfg.cap})


def run_seed(run_cfg: RunConfig, seed: int, train_fraction: float = None,
             modes: Sequence[str] = MODES) -> dict:
    """Train and evaluate every mode for one seed; returns {mode: run_metrics}."""
    toy = run_cfg.toy
    fraction = toy.train_fraction if train_fraction is None else train_fraction
    digest = _suite_hash(run_cfg)

    def compute():
        data = generate_dataset(toy, seed)
        train = subsample(data.train, fraction)
        bank = build_toy_bank(train, run_cfg, seed)
        out = {}
        for mode in modes:
            trained = train_head(train, bank, mode, toy, run_cfg.conditioning, run_cfg.cap,
                                 run_cfg.routing, seed)
            evaluation = evaluate_run(data.val, trained, bank, toy, run_cfg.conditioning,
                                      run_cfg.cap)
            out[mode] = run_metrics(evaluation)
        return out

    key = f'{",".join(modes)}|{seed}|{digest}|{fraction:g}'
    return _RUNS.get_or_compute(key, compute)


def _median_tree(values: list):
    """Elementwise median over a list of equally shaped nested dicts."""
    first = values[0]
    if isinstance(first, dict):
        return {k: _median_tree([v[k] for v in values if k in v]) for k in first}
    return float(np.median(values))


@dataclass
class SuiteSummary:
    seeds: list
    train_fraction: float
    per_seed: dict
    medians: dict
    trends: dict

    def to_dict(self) -> dict:
        return {'seeds': list(self.seeds), 'train_fraction': self.train_fraction,
                'per_seed': {str(k): v for k, v in self.per_seed.items()},
                'medians': self.medians, 'trends': self.trends}

    def format_text(self) -> str:
        modes = list(self.medians)
        lines = [f'seeds={self.seeds} train_fraction={self.train_fraction:g}', '',
                 f'{"mode":<12} {"size_mae":>10} {"rel_mae":>10} {"outlier":>10}']
        for mode in modes:
            m = self.medians[mode]
            lines.append(f'{mode:<12} {m["size_mae"]:>10.4f} {m["rel_mae"]:>10.4f} '
                         f'{m["outlier_ratio"]:>10.4f}')
        strata = list(self.medians[modes[0]]['strata'])
        if strata:
            lines += ['', 'size_mae / outlier by stratum',
                      f'{"mode":<12} ' + ' '.join(f'{s:>18}' for s in strata)]
            for mode in modes:
                cells = [f'{self.medians[mode]["strata"][s]["size_mae"]:.4f} / '
                         f'{self.medians[mode]["strata"][s]["outlier_ratio"]:.4f}'
                         for s in strata]
                lines.append(f'{mode:<12} ' + ' '.join(f'{c:>18}' for c in cells))
        routed = [m for m in modes if 'routing' in self.medians[m]]
        if routed:
            lines += ['', f'{"mode":<12} {"class":<12} {"top1_share":>10} {"active":>8}']
            for mode in routed:
                for name, r in self.medians[mode]['routing'].items():
                    lines.append(f'{mode:<12} {name:<12} {r["top1_share"]:>10.4f} '
                                 f'{r["active_used"]:>8g}')
        if self.trends:
            lines += ['', 'trends']
            for name, ok in self.trends.items():
                lines.append(f'  {name:<24} {"yes" if ok else "no"}')
        return '\n'.join(lines)


def suite_trends(medians: dict) -> dict:
    """Direction-only verdicts over the suite medians."""
    if not all(m in medians for m in MODES):
        return {}
    base, inj, cap = (medians[m] for m in MODES)
    strata = list(base['strata'])
    out = {}
    if strata:
        hi, lo = strata[-1], strata[0]

        def gap(s):
            return base['strata'][s]['size_mae'] - cap['strata'][s]['size_mae']

        out['outlier_order'] = (cap['strata'][hi]['outlier_ratio']
                                <= inj['strata'][hi]['outlier_ratio']
                                <= base['strata'][hi]['outlier_ratio'])
        out['mask_gap_grows'] = gap(hi) > gap(lo)
    if 'routing' in inj and 'routing' in cap:
        names = [n for n in cap['routing'] if n in inj['routing']]
        out['top1_concentrates'] = all(
            cap['routing'][n]['top1_share'] > inj['routing'][n]['top1_share'] for n in names)
        fewer = sum(cap['routing'][n]['active_used'] <= inj['routing'][n]['active_used']
                    for n in names)
        out['active_reduced'] = fewer >= min(2, len(names))
    return out


def run_suite(run_cfg: RunConfig, seeds: Sequence[int], train_fraction: float = None,
              threads: int = 1) -> SuiteSummary:
    """All three modes over all seeds; medians over seeds plus trend verdicts."""
    if not seeds:
        raise ValidationError('at least one seed required', field='seeds')
    fraction = run_cfg.toy.train_fraction if train_fraction is None else train_fraction
    seeds = [int(s) for s in seeds]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda s: run_seed(run_cfg, s, fraction), seeds))
    else:
        results = [run_seed(run_cfg, s, fraction) for s in seeds]
    per_seed = dict(zip(seeds, results))
    medians = {mode: _median_tree([r[mode] for r in results]) for mode in MODES}
    logger.info('Suite over %d seeds at fraction %g done', len(seeds), fraction)
    return SuiteSummary(seeds, fraction, per_seed, medians, suite_trends(medians))


def low_data_trend(run_cfg: RunConfig, seeds: Sequence[int], fractions=(0.2, 0.4),
                   threads: int = 1) -> dict:
    """Strong-prior suites at reduced train fractions against the full-data gap.

    Returns
    -------
    dict
        ``gaps`` maps each fraction (and 1.0) to the median baseline minus
        inject_cap unified size MAE; ``beats_baseline`` and
        ``smallest_gap_ge_full`` are the verdicts.
    """
    strong = apply_strong_prior(run_cfg) if run_cfg.preset != 'strong-prior' else run_cfg
    gaps = {}
    for fraction in tuple(fractions) + (1.0,):
        summary = run_suite(strong, seeds, fraction, threads)
        gaps[fraction] = (summary.medians['baseline']['size_mae']
                          - summary.medians['inject_cap']['size_mae'])
    smallest = min(fractions)
    return {
        'gaps': {f'{f:g}': g for f, g in gaps.items()},
        'beats_baseline': all(gaps[f] > 0.0 for f in fractions),
        'smallest_gap_ge_full': gaps[smallest] >= gaps[1.0],
    }
