# -*- coding: utf-8 -*-
"""
Analytic gradients of the composed size path and a central-difference verifier.

The forward pass runs over N instances at once::

    r = W_h q + b_h
    a = class-gated routing weights (p detached)
    x = r + lambda * log(mu^ + eps)
    L = 1/N sum |x - log(t + eps)|^2 + lambda_cap rho(e) L_cap

The CAP term weights prototype distances with
``a_eff = kappa a + (1 - kappa) stop_grad(a)``. Its forward value is ``a``;
only the CAP gradient that flows back through ``a`` into W_q and W_k is scaled
by kappa. The injection path (through mu^ and sigma^) is never staged.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from sizeprior.bank import PriorBank, Prototype, assemble_bank
from sizeprior.cap import cap_schedule, whitened_distances
from sizeprior.config import CapConfig, ConditioningConfig, GradcheckConfig
from sizeprior.errors import GradientCheckError, ValidationError
from sizeprior.routing import (
    EPS_VAR, RoutingParams, _check_p, mixture_moments, project_rows, slice_softmax)
from sizeprior.size_space import EpsilonConfig, _eps_value, log_array

logger = logging.getLogger(__name__)

BLOCKS = ('W_h', 'b_h', 'W_q', 'W_k')


@dataclass(frozen=True, eq=False)
class HeadParams:
    """Linear residual head ``r = W_h q + b_h`` (log-size units)."""
    W_h: np.ndarray
    b_h: np.ndarray

    def __post_init__(self):
        if self.W_h.ndim != 2 or self.W_h.shape[0] != 3 or self.b_h.shape != (3,):
            raise ValidationError(f'head must map to 3 outputs, got W_h {self.W_h.shape} '
                                  f'b_h {self.b_h.shape}', field='head')

    @classmethod
    def zeros(cls, query_dim: int, bias=(0.0, 0.0, 0.0)) -> 'HeadParams':
        return cls(np.zeros((3, query_dim)), np.array(bias, dtype=float))


@dataclass(eq=False)
class SizePathState:
    """Every intermediate of one batch forward pass, kept for backward."""
    Q: np.ndarray
    P: np.ndarray
    y: np.ndarray
    U: np.ndarray
    q_norm: np.ndarray
    Qn: np.ndarray
    Z: np.ndarray
    z_norm: np.ndarray
    Vn: np.ndarray
    logits: np.ndarray
    S: np.ndarray
    gate: np.ndarray
    A: np.ndarray
    A_eff: np.ndarray
    mu_hat: np.ndarray
    m2: np.ndarray
    var: np.ndarray
    sigma_hat: np.ndarray
    c: np.ndarray
    g: np.ndarray
    lam: np.ndarray
    log_mu: np.ndarray
    r: np.ndarray
    x: np.ndarray
    log_t: np.ndarray
    md2: np.ndarray
    w_y: np.ndarray
    rho: float
    l_det: float
    l_cap: float
    loss: float
    # Fixed inputs reused by backward.
    bank: PriorBank = None
    params: RoutingParams = None
    cond_cfg: ConditioningConfig = None
    cap_cfg: CapConfig = None

    @property
    def s_hat(self) -> np.ndarray:
        return np.exp(self.x)


@dataclass
class GradientReport:
    """Gradient blocks plus (optionally) their finite-difference comparison.

    ``block_errors[name]`` is the worst relative error of the block, each
    coordinate measured against ``max(|analytic|, |numeric|, 1e-8)``.
    """
    gradients: dict
    block_errors: dict = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max(self.block_errors.values(), default=0.0)

    @property
    def block_passed(self) -> dict:
        return {name: err <= self.tol for name, err in self.block_errors.items()}

    @property
    def passed(self) -> bool:
        return all(self.block_passed.values())


# %% Forward

def _gate_matrix(P: np.ndarray, bank: PriorBank) -> np.ndarray:
    """Normalised class probability of each prototype's class, (N, K)."""
    pi = P / P.sum(axis=1, keepdims=True)
    return pi[:, bank.proto_class]


def forward_sizepath(Q, P, params: RoutingParams, bank: PriorBank, head: HeadParams,
                     cond_cfg: ConditioningConfig, cap_cfg: CapConfig, targets, e: float,
                     gt_class=None, detached=None) -> tuple:
    """Composed size path over N instances.

    Parameters
    ----------
    Q : (N, D) or (D,)
        Query embeddings.
    P : (N, C) or (C,)
        Class probabilities (treated as constants).
    params, bank, head, cond_cfg, cap_cfg
        Routing parameters, prior bank, residual head and loss settings.
    targets : (N, 3) or (3,)
        Ground-truth metric sizes.
    e : float
        Epoch, selects rho(e).
    gt_class : (N,) int, optional
        Matched ground-truth class ids; defaults to ``argmax P``.
    detached : (kappa, A0), optional
        Evaluate the staged surrogate with ``stop_grad(a)`` frozen at ``A0``.
        Used only by the finite-difference check.

    Returns
    -------
    loss : float
    state : SizePathState
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    P = np.atleast_2d(np.asarray(P, dtype=float))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    n = Q.shape[0]
    if P.shape[0] != n or targets.shape != (n, 3):
        raise ValidationError(f'batch mismatch: Q {Q.shape}, P {P.shape}, targets '
                              f'{targets.shape}')
    if head.W_h.shape[1] != Q.shape[1]:
        raise ValidationError(f'head expects query_dim {head.W_h.shape[1]}, got {Q.shape[1]}')
    _check_p(P, len(bank.classes))
    y = np.argmax(P, axis=1) if gt_class is None else np.asarray(gt_class, dtype=int)
    if np.any(y < 0) or np.any(y >= len(bank.classes)):
        raise ValidationError('ground-truth class id outside bank classes', field='gt_class')
    eps = _eps_value(cond_cfg.eps)

    Qn, U, q_norm = project_rows(Q, params.W_q)
    Vn, Z, z_norm = project_rows(bank.centroids, params.W_k)
    logits = params.alpha * Qn @ Vn.T
    S = slice_softmax(logits, bank.slices)
    gate = _gate_matrix(P, bank)
    A = S * gate
    mu_hat, m2, var, sigma_hat = mixture_moments(A, bank, EPS_VAR)

    beta = np.asarray(cond_cfg.beta_vector(bank.classes), dtype=float)
    c = P @ beta
    g = 1.0 / (1.0 + sigma_hat / cond_cfg.sigma_s)
    lam = cond_cfg.lambda0 * c[:, None] * g
    log_mu = np.log(mu_hat + eps)
    r = Q @ head.W_h.T + head.b_h
    x = r + lam * log_mu
    log_t = log_array(targets, eps)
    l_det = float(np.sum((x - log_t) ** 2) / n)

    if detached is None:
        A_eff = A
    else:
        kappa, A0 = detached
        A_eff = kappa * A + (1.0 - kappa) * np.asarray(A0)
    md2 = whitened_distances(x, bank)
    w_y = np.asarray(cap_cfg.w_cap_vector(bank.classes), dtype=float)[y]
    l_cap = float(np.sum(w_y * np.sum(A_eff * md2, axis=1)) / n)
    rho = cap_schedule(e, cap_cfg)
    loss = l_det + cap_cfg.lambda_cap * rho * l_cap

    state = SizePathState(
        Q=Q, P=P, y=y, U=U, q_norm=q_norm, Qn=Qn, Z=Z, z_norm=z_norm, Vn=Vn,
        logits=logits, S=S, gate=gate, A=A, A_eff=A_eff, mu_hat=mu_hat, m2=m2, var=var,
        sigma_hat=sigma_hat, c=c, g=g, lam=lam, log_mu=log_mu, r=r, x=x, log_t=log_t,
        md2=md2, w_y=w_y, rho=rho, l_det=l_det, l_cap=l_cap, loss=loss,
        bank=bank, params=params, cond_cfg=cond_cfg, cap_cfg=cap_cfg)
    return loss, state


# %% Backward

def _normalize_backward(d_out: np.ndarray, out: np.ndarray, norm: np.ndarray) -> np.ndarray:
    """Gradient through ``u / |u|``; zero for degenerate rows."""
    safe = norm >= 1e-12
    d_u = np.zeros_like(d_out)
    proj = np.sum(out * d_out, axis=1, keepdims=True)
    d_u[safe] = (d_out[safe] - out[safe] * proj[safe]) / norm[safe, None]
    return d_u


def backward_sizepath(state: SizePathState, kappa: float) -> GradientReport:
    """Analytic gradients of ``state.loss`` w.r.t. W_h, b_h, W_q and W_k.

    ``kappa`` scales only the CAP gradient flowing through the routing
    weights. Class probabilities receive no gradient.
    """
    s = state
    bank, cond, cap = s.bank, s.cond_cfg, s.cap_cfg
    n = s.Q.shape[0]
    eps = _eps_value(cond.eps)
    cap_coef = cap.lambda_cap * s.rho / n

    # d loss / d x
    diff = s.x[:, None, :] - bank.mu_log[None, :, :]
    pdiff = np.einsum('kij,nkj->nki', bank.precision_log, diff)
    g_x = 2.0 * (s.x - s.log_t) / n
    g_x = g_x + cap_coef * s.w_y[:, None] * 2.0 * np.einsum('nk,nki->ni', s.A_eff, pdiff)

    d_W_h = g_x.T @ s.Q
    d_b_h = g_x.sum(axis=0)

    # injection path: x <- lambda, log(mu^ + eps)
    d_lam = g_x * s.log_mu
    d_mu_hat = g_x * s.lam / (s.mu_hat + eps)
    d_g = d_lam * cond.lambda0 * s.c[:, None]
    d_sigma = -d_g * s.g ** 2 / cond.sigma_s
    clamped = s.var <= EPS_VAR
    d_var = np.where(clamped, 0.0, d_sigma / (2.0 * s.sigma_hat))
    d_m2 = d_var
    d_mu_hat = d_mu_hat - 2.0 * s.mu_hat * d_var

    second = bank.sigma_lin ** 2 + bank.mu_lin ** 2
    d_A = d_mu_hat @ bank.mu_lin.T + d_m2 @ second.T
    # staged CAP weighting path
    d_A = d_A + kappa * cap_coef * s.w_y[:, None] * s.md2

    # a = softmax_slice(l) * pi_c
    d_S = d_A * s.gate
    d_logits = np.zeros_like(s.logits)
    for start, stop in bank.slices:
        Ss = s.S[:, start:stop]
        dSs = d_S[:, start:stop]
        d_logits[:, start:stop] = Ss * (dSs - np.sum(Ss * dSs, axis=1, keepdims=True))

    d_Qn = s.params.alpha * d_logits @ s.Vn
    d_Vn = s.params.alpha * d_logits.T @ s.Qn
    d_U = _normalize_backward(d_Qn, s.Qn, s.q_norm)
    d_Z = _normalize_backward(d_Vn, s.Vn, s.z_norm)
    d_W_q = d_U.T @ s.Q
    d_W_k = d_Z.T @ bank.centroids

    return GradientReport({'W_h': d_W_h, 'b_h': d_b_h, 'W_q': d_W_q, 'W_k': d_W_k})


# %% Finite differences

def finite_diff_check(loss_fn: Callable[[dict], float], params: dict, analytic: dict,
                      h: float = 1e-5, tol: float = 1e-4) -> GradientReport:
    """Compare analytic gradients with central differences.

    Parameters
    ----------
    loss_fn : callable
        Maps a dict of parameter arrays to a scalar loss.
    params : dict[str, np.ndarray]
        Point of evaluation; not modified.
    analytic : dict[str, np.ndarray]
        Analytic gradient blocks with the shapes of ``params``.
    h : float
        Two-sided step.
    tol : float
        A coordinate passes when its relative error (against
        ``max(|analytic|, |numeric|, 1e-8)``) is at most ``tol``.

    Returns
    -------
    GradientReport
        ``gradients`` holds the numeric blocks.
    """
    work = {name: np.array(value, dtype=float) for name, value in params.items()}
    numeric = {}
    errors = {}
    for name in analytic:
        arr = work[name]
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = loss_fn(work)
            arr[idx] = orig - h
            down = loss_fn(work)
            arr[idx] = orig
            num[idx] = (up - down) / (2.0 * h)
        ana = np.asarray(analytic[name], dtype=float)
        abs_err = np.abs(ana - num)
        scale = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-8)
        rel = abs_err / scale
        numeric[name] = num
        errors[name] = float(rel.max()) if rel.size else 0.0
    return GradientReport(numeric, errors, tol)


@dataclass(frozen=True, eq=False)
class SizePathInstance:
    """A random full-path problem for the gradient check."""
    Q: np.ndarray
    P: np.ndarray
    targets: np.ndarray
    e: float
    bank: PriorBank
    params: RoutingParams
    head: HeadParams
    cond_cfg: ConditioningConfig
    cap_cfg: CapConfig


def _random_rotation(rng) -> np.ndarray:
    M, R = np.linalg.qr(rng.normal(size=(3, 3)))
    return M * np.sign(np.diag(R))


def random_bank(rng, n_classes: int, protos_per_class: int, feature_dim: int) -> PriorBank:
    """Bank with random well-conditioned prototypes, for tests and gradcheck."""
    classes = tuple(f'class{c}' for c in range(n_classes))
    per_class = []
    for c in range(n_classes):
        protos = []
        for _ in range(protos_per_class):
            mu_lin = rng.uniform(0.5, 4.0, size=3)
            protos.append(Prototype(
                class_id=c,
                centroid=rng.normal(size=feature_dim),
                mu_lin=mu_lin,
                sigma_lin=rng.uniform(0.05, 0.5, size=3),
                mu_log=np.log(mu_lin),
                V_log=_random_rotation(rng),
                eta=np.sort(rng.uniform(0.01, 0.2, size=3))[::-1],
                count=int(rng.integers(20, 200)),
            ))
        per_class.append(protos)
    return assemble_bank(classes, per_class, feature_dim)


def random_instance(cfg: GradcheckConfig, trial: int) -> SizePathInstance:
    rng = np.random.default_rng([int(cfg.seed), int(trial), 0x47])
    bank = random_bank(rng, cfg.n_classes, cfg.protos_per_class, cfg.feature_dim)
    n, C = cfg.batch, cfg.n_classes
    P = rng.dirichlet(np.ones(C), size=n)
    if C > 1:
        # occasionally switch a class off entirely
        off = rng.random(n) < 0.3
        P[off, rng.integers(0, C)] = 0.0
    targets = bank.mu_lin[rng.integers(0, len(bank), size=n)] * np.exp(
        rng.normal(scale=0.1, size=(n, 3)))
    params = RoutingParams(rng.normal(size=(cfg.proj_dim, cfg.query_dim)),
                           rng.normal(size=(cfg.proj_dim, cfg.feature_dim)),
                           float(rng.uniform(0.5, 3.0)))
    head = HeadParams(rng.normal(scale=0.1, size=(3, cfg.query_dim)),
                      rng.normal(scale=0.1, size=3))
    cond_cfg = ConditioningConfig(
        lambda0=float(rng.uniform(0.2, 1.0)),
        beta_cls={name: float(rng.uniform(0.5, 1.5)) for name in bank.classes},
        sigma_s=float(rng.uniform(0.3, 1.0)),
        eps=EpsilonConfig(),
    )
    epochs = 100
    cap_cfg = CapConfig.for_epochs(
        epochs, lambda_cap=float(rng.uniform(0.05, 0.5)),
        w_cap={name: float(rng.uniform(0.5, 1.5)) for name in bank.classes})
    return SizePathInstance(rng.normal(size=(n, cfg.query_dim)), P, targets,
                            float(rng.uniform(0, epochs)), bank, params, head, cond_cfg,
                            cap_cfg)


def _pack(inst: SizePathInstance) -> dict:
    return {'W_h': inst.head.W_h, 'b_h': inst.head.b_h,
            'W_q': inst.params.W_q, 'W_k': inst.params.W_k}


def _surrogate(inst: SizePathInstance, kappa: float, A0: np.ndarray, cond_cfg=None,
               cap_cfg=None) -> Callable[[dict], float]:
    cond_cfg = cond_cfg or inst.cond_cfg
    cap_cfg = cap_cfg or inst.cap_cfg

    def loss_fn(values: dict) -> float:
        params = RoutingParams(values['W_q'], values['W_k'], inst.params.alpha)
        head = HeadParams(values['W_h'], values['b_h'])
        loss, _ = forward_sizepath(inst.Q, inst.P, params, inst.bank, head, cond_cfg,
                                   cap_cfg, inst.targets, inst.e, detached=(kappa, A0))
        return loss
    return loss_fn


@dataclass
class TrialResult:
    trial: int
    skipped: bool = False
    block_errors: dict = field(default_factory=dict)
    loss_spread: float = 0.0
    staged_zero: float = 0.0


def check_instance(inst: SizePathInstance, cfg: GradcheckConfig, trial: int = 0) -> TrialResult:
    """Analytic vs numeric gradients for one instance at every configured kappa."""
    base, state = forward_sizepath(inst.Q, inst.P, inst.params, inst.bank, inst.head,
                                   inst.cond_cfg, inst.cap_cfg, inst.targets, inst.e)
    if np.any(np.abs(state.var - EPS_VAR) < cfg.kink_margin):
        logger.debug('Trial %d skipped: variance clamp within %.1e', trial, cfg.kink_margin)
        return TrialResult(trial, skipped=True)
    if np.any(state.q_norm < 1e-12) or np.any(state.z_norm < 1e-12):
        return TrialResult(trial, skipped=True)
    out = TrialResult(trial)
    losses = []
    for kappa in cfg.kappas:
        loss_fn = _surrogate(inst, kappa, state.A)
        losses.append(loss_fn(_pack(inst)))
        analytic = backward_sizepath(state, kappa).gradients
        report = finite_diff_check(loss_fn, _pack(inst), analytic, cfg.h, cfg.tol)
        for name, err in report.block_errors.items():
            key = f'{name}@kappa={kappa:g}'
            out.block_errors[key] = max(out.block_errors.get(key, 0.0), err)
    out.loss_spread = float(max(abs(v - base) for v in losses))

    # staging contract: no injection, kappa 0 -> routing parameters get nothing
    no_inject = ConditioningConfig(0.0, inst.cond_cfg.beta_cls, inst.cond_cfg.sigma_s,
                                   inst.cond_cfg.eps)
    _, st0 = forward_sizepath(inst.Q, inst.P, inst.params, inst.bank, inst.head, no_inject,
                              inst.cap_cfg, inst.targets, inst.e)
    g0 = backward_sizepath(st0, 0.0).gradients
    out.staged_zero = float(max(np.abs(g0['W_q']).max(), np.abs(g0['W_k']).max()))
    return out


@dataclass
class GradcheckSummary:
    trials: int
    skipped: int
    block_errors: dict
    loss_spread: float
    staged_zero: float
    tol: float

    @property
    def max_rel_error(self) -> float:
        return max(self.block_errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return (self.max_rel_error <= self.tol and self.loss_spread <= 1e-12
                and self.staged_zero <= 1e-12)

    def raise_on_failure(self):
        if not self.passed:
            raise GradientCheckError(
                f'gradient check failed: max rel error {self.max_rel_error:.3e} '
                f'(tol {self.tol:g}), loss spread {self.loss_spread:.3e}, '
                f'staged residual {self.staged_zero:.3e}')

    def to_dict(self) -> dict:
        return {'trials': self.trials, 'skipped': self.skipped,
                'block_errors': dict(self.block_errors), 'max_rel_error': self.max_rel_error,
                'loss_spread': self.loss_spread, 'staged_zero': self.staged_zero,
                'tol': self.tol, 'passed': self.passed}

    def format_text(self) -> str:
        width = max((len(k) for k in self.block_errors), default=5)
        lines = [f'{"block":<{width}}  {"max_rel_err":>12}  status']
        for name in sorted(self.block_errors):
            err = self.block_errors[name]
            lines.append(f'{name:<{width}}  {err:>12.3e}  {"ok" if err <= self.tol else "FAIL"}')
        lines.append(f'trials={self.trials} skipped={self.skipped} tol={self.tol:g}')
        lines.append(f'forward loss spread across kappa: {self.loss_spread:.3e}')
        lines.append(f'max |grad W_q, W_k| at kappa=0, lambda0=0: {self.staged_zero:.3e}')
        lines.append('PASS' if self.passed else 'FAIL')
        return '\n'.join(lines)


def run_gradcheck(cfg: GradcheckConfig, threads: int = 1) -> GradcheckSummary:
    """Gradient check over ``cfg.trials`` random full-path instances."""
    def one(trial):
        return check_instance(random_instance(cfg, trial), cfg, trial)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(cfg.trials)))
    else:
        results = [one(t) for t in range(cfg.trials)]

    errors = {}
    for res in results:
        for key, err in res.block_errors.items():
            errors[key] = max(errors.get(key, 0.0), err)
    summary = GradcheckSummary(
        trials=cfg.trials,
        skipped=sum(r.skipped for r in results),
        block_errors=errors,
        loss_spread=max((r.loss_spread for r in results), default=0.0),
        staged_zero=max((r.staged_zero for r in results), default=0.0),
        tol=cfg.tol,
    )
    logger.info('Gradcheck: %d trials, %d skipped, max rel error %.3e',
                summary.trials, summary.skipped, summary.max_rel_error)
    return summary
