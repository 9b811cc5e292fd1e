# -*- coding: utf-8 -*-
"""
Uncertainty-attenuated log-space conditioning of the size head.

    c = sum_c p_c beta_c
    g = (1 + sigma^ / sigma_s)^-1          (elementwise over h, w, l)
    lambda = lambda0 c g
    s^ = exp(r + lambda * log(mu^ + eps))
"""
import logging
from dataclasses import dataclass

import numpy as np

from sizeprior.config import ConditioningConfig
from sizeprior.errors import NumericError, ValidationError
from sizeprior.size_space import SizeTriple, _EXP_LIMIT, _eps_value

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SizePrediction:
    r: np.ndarray
    lam: np.ndarray
    s_hat: SizeTriple
    c: float
    g: np.ndarray


def prior_strength(p, sigma_hat, cfg: ConditioningConfig, classes) -> tuple:
    """Class scaling c, attenuation g and effective strength lambda.

    Parameters
    ----------
    p : array (C,) or (N, C)
        Class probabilities in bank class order.
    sigma_hat : array (3,) or (N, 3)
        Routed uncertainty, meters.
    cfg : ConditioningConfig
    classes : sequence of str
        Class order of ``p``; selects ``beta_cls`` entries.

    Returns
    -------
    c : float or (N,), g : like sigma_hat, lam : like sigma_hat
    """
    p = np.asarray(p, dtype=float)
    sigma_hat = np.asarray(sigma_hat, dtype=float)
    if np.any(p < 0.0):
        raise ValidationError('class probabilities must be >= 0', field='p')
    if np.any(sigma_hat < 0.0):
        raise ValidationError('sigma_hat must be >= 0', field='sigma_hat')
    beta = np.asarray(cfg.beta_vector(classes), dtype=float)
    c = p @ beta
    g = 1.0 / (1.0 + sigma_hat / cfg.sigma_s)
    lam = cfg.lambda0 * np.asarray(c)[..., None] * g if np.ndim(c) else cfg.lambda0 * c * g
    return c, g, lam


def condition_log(r, mu_hat, lam, eps) -> np.ndarray:
    """Log of the conditioned size, ``r + lambda * log(mu^ + eps)``."""
    mu_hat = np.asarray(mu_hat, dtype=float)
    if np.any(mu_hat <= 0.0):
        raise ValidationError('mu_hat must be > 0', field='mu_hat')
    return np.asarray(r, dtype=float) + np.asarray(lam, dtype=float) * np.log(
        mu_hat + _eps_value(eps))


def condition_size(r, mu_hat, lam, eps=None) -> SizeTriple:
    """Conditioned metric size; positive by construction.

    Raises
    ------
    NumericError
        exp overflow; the message names the component.
    """
    x = condition_log(r, mu_hat, lam, eps)
    for name, value in zip(('h', 'w', 'l'), x):
        if not value < _EXP_LIMIT:
            raise NumericError(f'exp overflow in component {name}: {value!r}')
    return SizeTriple(*np.exp(x))


def predict_size(r, p, mu_hat, sigma_hat, cfg: ConditioningConfig, classes) -> SizePrediction:
    """prior_strength followed by condition_size for one query."""
    c, g, lam = prior_strength(p, sigma_hat, cfg, classes)
    s_hat = condition_size(r, mu_hat, lam, cfg.eps)
    return SizePrediction(np.asarray(r, dtype=float), lam, s_hat, float(c), g)
