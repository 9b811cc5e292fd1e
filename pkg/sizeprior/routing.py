# -*- coding: utf-8 -*-
"""
Class-gated routing of a query to a mixture prior over bank prototypes.

    q' = W_q q / |W_q q|,  v'_k = W_k v_k / |W_k v_k|
    l_k = alpha q'.v'_k
    a~_k = softmax(l over S_c)_k p_c  (k in S_c),  a = a~ / sum(a~)
    mu^ = sum a_k mu_k,  m2 = sum a_k (sigma_k^2 + mu_k^2),
    sigma^ = sqrt(max(m2 - mu^^2, eps_var))

Class probabilities are constants for gradient purposes.
"""
import logging
from dataclasses import dataclass

import numpy as np

from sizeprior.bank import PriorBank
from sizeprior.errors import FormatError, RoutingError, ValidationError

logger = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-12
EPS_VAR = 1e-12


@dataclass(frozen=True)
class Query:
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.q)):
            raise ValidationError('query embedding must be finite', field='q')
        if np.any(np.asarray(self.p) < 0.0) or not np.all(np.isfinite(self.p)):
            raise ValidationError('class probabilities must be finite and >= 0', field='p')


@dataclass(frozen=True, eq=False)
class RoutingParams:
    """Projection matrices W_q (P x D), W_k (P x F) and temperature alpha."""
    W_q: np.ndarray
    W_k: np.ndarray
    alpha: float

    def __post_init__(self):
        if not self.alpha > 0.0:
            raise ValidationError(f'alpha must be > 0, got {self.alpha}', field='alpha')
        if self.W_q.shape[0] != self.W_k.shape[0]:
            raise ValidationError('W_q and W_k must share the projection width', field='W_k')
        if not (np.all(np.isfinite(self.W_q)) and np.all(np.isfinite(self.W_k))):
            raise ValidationError('projection matrices must be finite')

    @property
    def proj_dim(self) -> int:
        return self.W_q.shape[0]

    def save(self, path: str):
        np.savez(path, W_q=self.W_q, W_k=self.W_k, alpha=np.float64(self.alpha))

    @classmethod
    def load(cls, path: str) -> 'RoutingParams':
        try:
            with np.load(path) as data:
                return cls(np.array(data['W_q']), np.array(data['W_k']), float(data['alpha']))
        except KeyError as exc:
            raise FormatError('missing array', source=str(path), field=str(exc.args[0]))
        except (OSError, ValueError) as exc:
            raise ValidationError(str(exc), source=str(path))


@dataclass(frozen=True, eq=False)
class RoutedPrior:
    a: np.ndarray
    mu_hat: np.ndarray
    sigma_hat: np.ndarray
    m2: np.ndarray


def init_routing_params(query_dim: int, feature_dim: int, proj_dim: int = 256,
                        seed: int = 0) -> RoutingParams:
    """Scaled uniform init, bound 1/sqrt(fan_in); alpha = 1/sqrt(proj_dim)."""
    rng = np.random.default_rng([int(seed), 0x52])
    bq = 1.0 / np.sqrt(query_dim)
    bk = 1.0 / np.sqrt(feature_dim)
    W_q = rng.uniform(-bq, bq, size=(proj_dim, query_dim))
    W_k = rng.uniform(-bk, bk, size=(proj_dim, feature_dim))
    return RoutingParams(W_q, W_k, 1.0 / np.sqrt(proj_dim))


def project_normalize(v, W) -> np.ndarray:
    """Return ``W v / |W v|``, or the zero vector when ``|W v| < 1e-12``."""
    v = np.asarray(v, dtype=float)
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or v.shape[-1] != W.shape[1]:
        raise ValidationError(f'dimension mismatch: W {W.shape} vs v {v.shape}')
    u = W @ v
    norm = np.linalg.norm(u)
    if norm < DEGENERATE_NORM:
        logger.debug('Degenerate projection (norm %.3g); using zero vector', norm)
        return np.zeros_like(u)
    return u / norm


def project_rows(X: np.ndarray, W: np.ndarray) -> tuple:
    """Row-wise `project_normalize`; also returns the raw projections and norms."""
    X = np.asarray(X, dtype=float)
    if X.shape[-1] != W.shape[1]:
        raise ValidationError(f'dimension mismatch: W {W.shape} vs rows {X.shape}')
    U = X @ W.T
    norms = np.linalg.norm(U, axis=1)
    safe = norms >= DEGENERATE_NORM
    out = np.zeros_like(U)
    out[safe] = U[safe] / norms[safe, None]
    return out, U, norms


def _check_p(P: np.ndarray, n_classes: int):
    if P.shape[-1] != n_classes:
        raise ValidationError(f'expected {n_classes} class probabilities, got {P.shape[-1]}',
                              field='p')
    if np.any(P < 0.0) or not np.all(np.isfinite(P)):
        raise ValidationError('class probabilities must be finite and >= 0', field='p')
    if np.any(P.sum(axis=-1) <= 0.0):
        raise RoutingError('all class probabilities are zero; routing is undefined', field='p')


def slice_softmax(logits: np.ndarray, slices) -> np.ndarray:
    """Softmax over the last axis independently inside each slice."""
    out = np.empty_like(logits, dtype=float)
    for start, stop in slices:
        z = logits[..., start:stop]
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        out[..., start:stop] = e / e.sum(axis=-1, keepdims=True)
    return out


def class_gated_weights(logits, p, slices) -> np.ndarray:
    """Per-slice softmax gated by class probability, renormalised globally.

    Works on a single row (K,) with p (C,) or a batch (N, K) with p (N, C).
    Slices of classes with ``p_c = 0`` receive exactly zero weight.

    Raises
    ------
    RoutingError
        All class probabilities are zero.
    """
    logits = np.asarray(logits, dtype=float)
    P = np.asarray(p, dtype=float)
    _check_p(P, len(slices))
    soft = slice_softmax(logits, slices)
    gated = np.zeros_like(soft)
    for c, (start, stop) in enumerate(slices):
        pc = P[..., c:c + 1]
        gated[..., start:stop] = np.where(pc > 0.0, soft[..., start:stop] * pc, 0.0)
    return gated / gated.sum(axis=-1, keepdims=True)


def mixture_moments(A: np.ndarray, bank: PriorBank, eps_var: float = EPS_VAR) -> tuple:
    """Batch mixture statistics. Returns (mu_hat, m2, var, sigma_hat)."""
    mu = bank.mu_lin
    second = bank.sigma_lin ** 2 + mu ** 2
    mu_hat = A @ mu
    m2 = A @ second
    var = m2 - mu_hat ** 2
    sigma_hat = np.sqrt(np.maximum(var, eps_var))
    return mu_hat, m2, var, sigma_hat


def mixture_prior(a, bank: PriorBank, eps_var: float = EPS_VAR) -> RoutedPrior:
    """Moment-matched mixture prior over the bank for one weight row."""
    a = np.asarray(a, dtype=float)
    if a.shape != (len(bank),):
        raise ValidationError(f'expected {len(bank)} weights, got {a.shape}', field='a')
    if np.any(a < 0.0) or abs(a.sum() - 1.0) > 1e-9:
        raise ValidationError('weights must be non-negative and sum to 1', field='a')
    mu_hat, m2, _, sigma_hat = mixture_moments(a, bank, eps_var)
    return RoutedPrior(a, mu_hat, sigma_hat, m2)


def routing_logits(Q: np.ndarray, params: RoutingParams, bank: PriorBank) -> np.ndarray:
    Qn, _, _ = project_rows(np.atleast_2d(Q), params.W_q)
    Vn, _, _ = project_rows(bank.centroids, params.W_k)
    return params.alpha * Qn @ Vn.T


def route_batch(Q, P, params: RoutingParams, bank: PriorBank,
                eps_var: float = EPS_VAR) -> tuple:
    """Route N queries at once.

    Returns
    -------
    A : (N, K), mu_hat : (N, 3), sigma_hat : (N, 3), m2 : (N, 3)
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    P = np.atleast_2d(np.asarray(P, dtype=float))
    if bank.centroids.shape[1] != params.W_k.shape[1]:
        raise ValidationError(f'bank feature_dim {bank.feature_dim} does not match W_k '
                              f'{params.W_k.shape}')
    A = class_gated_weights(routing_logits(Q, params, bank), P, bank.slices)
    mu_hat, m2, _, sigma_hat = mixture_moments(A, bank, eps_var)
    return A, mu_hat, sigma_hat, m2


def route(query: Query, params: RoutingParams, bank: PriorBank) -> RoutedPrior:
    """Route one query through projection, gating and mixture moments."""
    A, mu_hat, sigma_hat, m2 = route_batch(query.q[None, :], np.asarray(query.p)[None, :],
                                           params, bank)
    return RoutedPrior(A[0], mu_hat[0], sigma_hat[0], m2[0])
