# -*- coding: utf-8 -*-
"""
Size-quality and routing diagnostics on matched true positives.

Pair files are tab separated, one pair per line::

    class  pred_h pred_w pred_l  gt_h gt_w gt_l  [sig_h sig_w sig_l]  [occlusion]

Lines starting with ``#`` and a header line starting with ``class`` are
ignored. The occlusion column holds a stratum name (``fully``, ``partly``,
``largely`` or any other label).
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from scipy import stats

from sizeprior.bank import PriorBank
from sizeprior.errors import FormatError, ValidationError
from sizeprior.size_space import SizeTriple

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.2
OCCLUSION_BINS = ('fully', 'partly', 'largely')
PAIR_COLUMNS = ('class', 'pred_h', 'pred_w', 'pred_l', 'gt_h', 'gt_w', 'gt_l',
                'sig_h', 'sig_w', 'sig_l', 'occlusion')
SIGMA_REDUCERS = {'mean': np.mean, 'max': np.max}


@dataclass(frozen=True)
class MatchedPair:
    pred: SizeTriple
    gt: SizeTriple
    class_name: str
    sigma_hat: tuple = None
    occlusion_bin: str = None

    def __post_init__(self):
        if self.sigma_hat is not None:
            if len(self.sigma_hat) != 3 or any(s < 0 or not math.isfinite(s)
                                               for s in self.sigma_hat):
                raise ValidationError('sigma_hat must be 3 finite non-negative values',
                                      field='sigma_hat')


@dataclass(frozen=True)
class SizeMetrics:
    size_mae: float
    rel_mae: float
    outlier_ratio: float
    count: int

    def to_dict(self) -> dict:
        return {'size_mae': self.size_mae, 'rel_mae': self.rel_mae,
                'outlier_ratio': self.outlier_ratio, 'count': self.count}


@dataclass(frozen=True)
class RoutingStats:
    top1_share: float
    active_used: int
    active_total: int

    def to_dict(self) -> dict:
        return {'top1_share': self.top1_share, 'active_used': self.active_used,
                'active_total': self.active_total}


# %% Size errors

def _arrays(pairs: Sequence[MatchedPair]) -> tuple:
    if len(pairs) == 0:
        raise ValidationError('no matched pairs')
    pred = np.array([p.pred.as_array() for p in pairs])
    gt = np.array([p.gt.as_array() for p in pairs])
    return pred, gt


def pair_abs_errors(pairs) -> np.ndarray:
    """Per-pair mean absolute error over (h, w, l), meters."""
    pred, gt = _arrays(pairs)
    return np.mean(np.abs(pred - gt), axis=1)


def pair_rel_errors(pairs) -> np.ndarray:
    """Per-pair mean relative error over (h, w, l)."""
    pred, gt = _arrays(pairs)
    return np.mean(np.abs(pred - gt) / gt, axis=1)


def size_mae(pairs) -> float:
    return float(np.mean(pair_abs_errors(pairs)))


def rel_mae(pairs) -> float:
    return float(np.mean(pair_rel_errors(pairs)))


def outlier_ratio(pairs, tau: float = DEFAULT_TAU) -> float:
    """Fraction of pairs whose mean relative error exceeds ``tau`` (strict)."""
    return float(np.mean(pair_rel_errors(pairs) > tau))


def size_metrics(pairs, tau: float = DEFAULT_TAU) -> SizeMetrics:
    return SizeMetrics(size_mae(pairs), rel_mae(pairs), outlier_ratio(pairs, tau), len(pairs))


def unimod(car_mod: float, ped_mod: float, cyc_mod: float) -> float:
    """Unified moderate score: plain mean of the three class AP values."""
    return (car_mod + ped_mod + cyc_mod) / 3.0


# %% Grouped reports

def per_class_report(pairs, tau: float = DEFAULT_TAU) -> dict:
    """Metrics per class in first-seen order, plus ``'unified'`` over all pairs."""
    groups = {}
    for p in pairs:
        groups.setdefault(p.class_name, []).append(p)
    out = {name: size_metrics(group, tau) for name, group in groups.items()}
    out['unified'] = size_metrics(pairs, tau)
    return out


def strata_report(pairs, tau: float = DEFAULT_TAU) -> dict:
    """Metrics per occlusion bin; pairs without a bin are left out."""
    groups = {}
    for p in pairs:
        if p.occlusion_bin is not None:
            groups.setdefault(p.occlusion_bin, []).append(p)
    order = [b for b in OCCLUSION_BINS if b in groups] + sorted(
        b for b in groups if b not in OCCLUSION_BINS)
    return {b: size_metrics(groups[b], tau) for b in order}


def sigma_scalar(pairs, reduce: str = 'mean') -> np.ndarray:
    if reduce not in SIGMA_REDUCERS:
        raise ValidationError(f'unknown sigma reducer {reduce!r}', field='reduce')
    if any(p.sigma_hat is None for p in pairs):
        raise ValidationError('every pair needs sigma_hat for uncertainty bins',
                              field='sigma_hat')
    return np.array([SIGMA_REDUCERS[reduce](p.sigma_hat) for p in pairs])


def tercile_indices(values) -> list:
    """Split indices into three bins by value.

    Stable sort by value; bin edges at ``ceil(n/3)`` and ``ceil(2n/3)`` so
    boundary elements fall in the lower bin.
    """
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, kind='stable')
    n = len(values)
    first, second = -(-n // 3), -(-2 * n // 3)
    return [order[:first], order[first:second], order[second:]]


def sigma_tercile_bins(pairs, tau: float = DEFAULT_TAU, reduce: str = 'mean') -> list:
    """Size metrics over the low, mid and high routed-uncertainty terciles.

    Returns
    -------
    list[SizeMetrics or None]
        One entry per bin; empty bins (fewer than 3 pairs) are None.
    """
    sig = sigma_scalar(pairs, reduce)
    out = []
    for idx in tercile_indices(sig):
        out.append(size_metrics([pairs[i] for i in idx], tau) if len(idx) else None)
    return out


def routing_diagnostics(weights, class_ids, bank: PriorBank) -> dict:
    """Routing concentration per class.

    Parameters
    ----------
    weights : (N, K)
        Routing weight rows of matched true positives.
    class_ids : (N,)
        Ground-truth class index of each row.
    bank : PriorBank

    Returns
    -------
    dict[str, RoutingStats]
        Classes with at least one matched row, in bank order.
    """
    W = np.atleast_2d(np.asarray(weights, dtype=float))
    ids = np.asarray(class_ids, dtype=int)
    if W.shape != (len(ids), len(bank)):
        raise ValidationError(f'weights {W.shape} do not match {len(ids)} rows x '
                              f'{len(bank)} prototypes')
    top = W.max(axis=1)
    arg = W.argmax(axis=1)
    out = {}
    for c, name in enumerate(bank.classes):
        rows = ids == c
        if not np.any(rows):
            continue
        start, stop = bank.slices[c]
        used = np.unique(arg[rows])
        out[name] = RoutingStats(float(top[rows].mean()),
                                 int(np.sum((used >= start) & (used < stop))),
                                 stop - start)
    return out


def uncertainty_association(pairs, reduce: str = 'mean') -> float:
    """Spearman rank correlation between routed uncertainty and relative error.

    Returns NaN when fewer than three pairs or either side is constant.
    """
    if len(pairs) < 3:
        return float('nan')
    sig = sigma_scalar(pairs, reduce)
    rel = pair_rel_errors(pairs)
    if np.ptp(sig) == 0.0 or np.ptp(rel) == 0.0:
        return float('nan')
    return float(stats.spearmanr(sig, rel)[0])


# %% Report

@dataclass
class MetricsReport:
    per_class: dict
    tau: float = DEFAULT_TAU
    strata: dict = field(default_factory=dict)
    sigma_bins: list = None
    routing: dict = None
    association: float = None
    unimod: float = None

    @property
    def unified(self) -> SizeMetrics:
        return self.per_class['unified']

    def to_dict(self) -> dict:
        def _num(v):
            return None if v is None or (isinstance(v, float) and math.isnan(v)) else v

        return {
            'tau': self.tau,
            'per_class': {k: v.to_dict() for k, v in self.per_class.items()},
            'strata': {k: v.to_dict() for k, v in self.strata.items()},
            'sigma_bins': None if self.sigma_bins is None else [
                None if b is None else b.to_dict() for b in self.sigma_bins],
            'routing': None if self.routing is None else {
                k: v.to_dict() for k, v in self.routing.items()},
            'association': _num(self.association),
            'unimod': _num(self.unimod),
        }

    def format_text(self) -> str:
        lines = [f'{"group":<12} {"n":>6} {"size_mae":>10} {"rel_mae":>10} '
                 f'{"outlier@" + format(self.tau, "g"):>12}']

        def row(name, m):
            lines.append(f'{name:<12} {m.count:>6d} {m.size_mae:>10.4f} {m.rel_mae:>10.4f} '
                         f'{m.outlier_ratio:>12.4f}')

        for name, m in self.per_class.items():
            row(name, m)
        if self.strata:
            lines.append('')
            lines.append('occlusion strata')
            for name, m in self.strata.items():
                row(name, m)
        if self.sigma_bins is not None:
            lines.append('')
            lines.append('sigma terciles')
            for name, m in zip(('low', 'mid', 'high'), self.sigma_bins):
                if m is not None:
                    row(name, m)
        if self.routing:
            lines.append('')
            lines.append(f'{"class":<12} {"top1_share":>10} {"active":>10}')
            for name, r in self.routing.items():
                lines.append(f'{name:<12} {r.top1_share:>10.4f} '
                             f'{f"{r.active_used}/{r.active_total}":>10}')
        if self.association is not None and not math.isnan(self.association):
            lines.append('')
            lines.append(f'spearman(sigma, rel_err) = {self.association:.4f}')
        if self.unimod is not None:
            lines.append(f'unimod = {self.unimod:.4f}')
        return '\n'.join(lines)


def build_report(pairs, tau: float = DEFAULT_TAU, routing: dict = None,
                 ap_moderate: tuple = None, reduce: str = 'mean') -> MetricsReport:
    """Every applicable metric for a set of matched pairs."""
    report = MetricsReport(per_class_report(pairs, tau), tau, strata_report(pairs, tau),
                           routing=routing)
    if all(p.sigma_hat is not None for p in pairs):
        report.sigma_bins = sigma_tercile_bins(pairs, tau, reduce)
        report.association = uncertainty_association(pairs, reduce)
    if ap_moderate is not None:
        report.unimod = unimod(*ap_moderate)
    return report


# %% Pair files

def _fmt(v: float) -> str:
    return repr(float(v))


def write_pairs_file(pairs, path=None) -> str:
    """Render pairs in the tab-separated column format; write to ``path`` if given."""
    lines = ['\t'.join(PAIR_COLUMNS)]
    for p in pairs:
        fields = [p.class_name] + [_fmt(v) for v in p.pred] + [_fmt(v) for v in p.gt]
        if p.sigma_hat is not None:
            fields += [_fmt(v) for v in p.sigma_hat]
        if p.occlusion_bin is not None:
            fields.append(p.occlusion_bin)
        lines.append('\t'.join(fields))
    text = '\n'.join(lines) + '\n'
    if path is not None:
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(text)
    return text


def parse_pairs(text: str, source: str = '<pairs>') -> list:
    """Parse the tab-separated matched-pair format.

    Raises
    ------
    FormatError
        Wrong column count or a malformed number (message names the line).
    """
    out = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith('#'):
            continue
        tokens = line.rstrip('\n').split('\t')
        if tokens[0] == 'class':
            continue
        if len(tokens) not in (7, 8, 10, 11):
            raise FormatError(f'expected 7, 8, 10 or 11 columns, got {len(tokens)}',
                              source=source, field=f'line {line_no}')
        occlusion = tokens[-1] if len(tokens) in (8, 11) else None
        n_num = 9 if len(tokens) >= 10 else 6
        try:
            nums = [float(t) for t in tokens[1:1 + n_num]]
        except ValueError as exc:
            raise FormatError(str(exc), source=source, field=f'line {line_no}')
        try:
            out.append(MatchedPair(SizeTriple(*nums[0:3]), SizeTriple(*nums[3:6]), tokens[0],
                                   tuple(nums[6:9]) if n_num == 9 else None, occlusion))
        except ValidationError as exc:
            raise FormatError(str(exc), source=source, field=f'line {line_no}')
    return out


def read_pairs_file(path: Union[str, Path]) -> list:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except OSError as exc:
        raise ValidationError(str(exc), source=str(path))
    pairs = parse_pairs(text, source=str(path))
    logger.info('Read %d matched pairs from %s', len(pairs), path)
    return pairs
