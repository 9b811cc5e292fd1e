# -*- coding: utf-8 -*-
"""
Cluster-aligned prior regularisation on matched predictions.

    md2_ik = |(V_k^T (x_i - mu_k^log)) / sqrt(eta_k)|^2
    L_cap  = 1/N+ sum_i w_{y_i} sum_k a_ik md2_ik
    L      = L_det + lambda_cap rho(e) L_cap

``rho(e)`` holds CAP at full strength early and then decays it linearly.
``kappa(e)`` stages only the CAP gradient that flows through the routing
weights; it never changes a forward value.
"""
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from sizeprior.bank import PriorBank, Prototype
from sizeprior.config import CapConfig
from sizeprior.errors import ValidationError
from sizeprior.size_space import LogSize, SizeTriple

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class MatchedPrediction:
    """A prediction paired with its ground-truth object."""
    x: LogSize
    a: np.ndarray
    gt_class: int
    gt_size: SizeTriple = None

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        if np.any(a < 0.0) or abs(a.sum() - 1.0) > 1e-9:
            raise ValidationError('assignment weights must be non-negative and sum to 1',
                                  field='a')


def _as_vec(x) -> np.ndarray:
    if isinstance(x, LogSize):
        return x.as_array()
    return np.asarray(x, dtype=float)


def whitened_distance(x, proto: Prototype) -> float:
    """Squared Mahalanobis distance of log size ``x`` to a prototype."""
    y = proto.V_log.T @ (_as_vec(x) - proto.mu_log)
    return float(np.sum(y * y / proto.eta))


def whitened_distances(X: np.ndarray, bank: PriorBank) -> np.ndarray:
    """All squared distances between N log sizes and the K bank prototypes.

    Returns
    -------
    md2 : (N, K)
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    D = X[:, None, :] - bank.mu_log[None, :, :]
    Y = np.einsum('kji,nkj->nki', bank.V_log, D)
    return np.sum(Y * Y / bank.eta[None, :, :], axis=-1)


def cap_loss(matched: Sequence[MatchedPrediction], bank: PriorBank,
             cfg: CapConfig) -> float:
    """Assignment-weighted distance of matched predictions to the bank.

    An empty batch has loss 0.

    Raises
    ------
    ValidationError
        A ground-truth class id is not a bank class, or weights have the
        wrong length.
    """
    if not matched:
        return 0.0
    w = np.asarray(cfg.w_cap_vector(bank.classes), dtype=float)
    total = 0.0
    for i, m in enumerate(matched):
        if not 0 <= m.gt_class < len(bank.classes):
            raise ValidationError(f'class id {m.gt_class} outside bank classes '
                                  f'{list(bank.classes)}', field=f'matched[{i}].gt_class')
        a = np.asarray(m.a, dtype=float)
        if a.shape != (len(bank),):
            raise ValidationError(f'expected {len(bank)} weights, got {a.shape}',
                                  field=f'matched[{i}].a')
        md2 = whitened_distances(_as_vec(m.x), bank)[0]
        total += w[m.gt_class] * float(a @ md2)
    return total / len(matched)


def cap_schedule(e: float, cfg: CapConfig) -> float:
    """CAP weight rho(e): 1 until e_hold, linear to rho_end at e_end, then flat."""
    s = cfg.schedule
    if e <= s.e_hold:
        return 1.0
    if e >= s.e_end:
        return s.rho_end
    t = (e - s.e_hold) / (s.e_end - s.e_hold)
    return 1.0 + t * (s.rho_end - 1.0)


def staging_coefficient(e: float, cfg: CapConfig) -> float:
    """Routing-gradient staging kappa(e): 0 detached, linear blend, then 1."""
    g = cfg.staging
    if e <= g.e_detach_end:
        return 0.0
    if e >= g.e_blend_end:
        return 1.0
    return (e - g.e_detach_end) / (g.e_blend_end - g.e_detach_end)


def total_loss(l_det: float, l_cap: float, e: float, cfg: CapConfig) -> float:
    return l_det + cfg.lambda_cap * cap_schedule(e, cfg) * l_cap
