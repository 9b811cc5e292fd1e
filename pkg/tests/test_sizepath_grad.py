# -*- coding: utf-8 -*-
import dataclasses

import numpy as np
import pytest

from sizeprior.cap import MatchedPrediction, cap_loss, cap_schedule
from sizeprior.conditioning import predict_size
from sizeprior.config import GradcheckConfig
from sizeprior.errors import GradientCheckError, ValidationError
from sizeprior.routing import Query, route
from sizeprior.size_space import LogSize
from sizeprior.sizepath_grad import (
    GradcheckSummary, HeadParams, backward_sizepath, check_instance, finite_diff_check,
    forward_sizepath, random_bank, random_instance, run_gradcheck)

CFG = GradcheckConfig(trials=3, batch=3)


def forward(inst, **kwargs):
    return forward_sizepath(inst.Q, inst.P, inst.params, inst.bank, inst.head, inst.cond_cfg,
                            inst.cap_cfg, inst.targets, inst.e, **kwargs)


def test_forward_matches_per_instance_pipeline():
    """The batched forward equals route -> predict -> detection + CAP, one query at a time."""
    inst = random_instance(CFG, trial=1)
    loss, state = forward(inst)
    eps = inst.cond_cfg.eps.eps
    l_det = 0.0
    matched = []
    for i in range(len(inst.Q)):
        r = inst.head.W_h @ inst.Q[i] + inst.head.b_h
        prior = route(Query(inst.Q[i], inst.P[i]), inst.params, inst.bank)
        pred = predict_size(r, inst.P[i], prior.mu_hat, prior.sigma_hat, inst.cond_cfg,
                            inst.bank.classes)
        x = np.log(pred.s_hat.as_array())
        l_det += float(np.sum((x - np.log(inst.targets[i] + eps)) ** 2))
        matched.append(MatchedPrediction(LogSize.from_array(x), prior.a,
                                         int(np.argmax(inst.P[i]))))
    l_det /= len(inst.Q)
    l_cap = cap_loss(matched, inst.bank, inst.cap_cfg)
    expected = l_det + inst.cap_cfg.lambda_cap * cap_schedule(inst.e, inst.cap_cfg) * l_cap
    assert state.l_det == pytest.approx(l_det, rel=1e-9)
    assert state.l_cap == pytest.approx(l_cap, rel=1e-9)
    assert loss == pytest.approx(expected, rel=1e-9)


def test_forward_validates_shapes():
    inst = random_instance(CFG, trial=0)
    with pytest.raises(ValidationError):
        forward_sizepath(inst.Q, inst.P[:1], inst.params, inst.bank, inst.head, inst.cond_cfg,
                         inst.cap_cfg, inst.targets, inst.e)
    with pytest.raises(ValidationError):
        forward(inst, gt_class=np.array([0, 1, 7]))
    with pytest.raises(ValidationError):
        HeadParams(np.zeros((2, 5)), np.zeros(3))


def test_detached_surrogate_keeps_forward_value():
    inst = random_instance(CFG, trial=2)
    base, state = forward(inst)
    for kappa in (0.0, 0.25, 1.0):
        staged, _ = forward(inst, detached=(kappa, state.A))
        assert staged == pytest.approx(base, rel=1e-14)


def test_gradients_match_central_differences():
    inst = random_instance(CFG, trial=0)
    result = check_instance(inst, CFG, trial=0)
    assert not result.skipped
    assert set(result.block_errors) == {f'{b}@kappa={k:g}' for b in ('W_h', 'b_h', 'W_q', 'W_k')
                                        for k in CFG.kappas}
    assert max(result.block_errors.values()) <= CFG.tol
    assert result.loss_spread <= 1e-12
    assert result.staged_zero <= 1e-12


def test_quadratic_head_closed_form():
    """Without prior or CAP the loss is a plain quadratic in the bias."""
    inst = random_instance(CFG, trial=3)
    cond = dataclasses.replace(inst.cond_cfg, lambda0=0.0)
    cap = dataclasses.replace(inst.cap_cfg, lambda_cap=0.0)
    head = HeadParams.zeros(CFG.query_dim, bias=(0.1, -0.2, 0.3))
    loss, state = forward_sizepath(inst.Q, inst.P, inst.params, inst.bank, head, cond, cap,
                                   inst.targets, inst.e)
    log_t = np.log(inst.targets + 1e-6)
    resid = head.b_h - log_t
    n = len(inst.Q)
    assert loss == pytest.approx(np.sum(resid ** 2) / n, rel=1e-12)
    grads = backward_sizepath(state, kappa=1.0).gradients
    assert np.allclose(grads['b_h'], 2.0 * resid.sum(axis=0) / n, rtol=1e-12)
    assert np.allclose(grads['W_h'], 2.0 * resid.T @ inst.Q / n, rtol=1e-12)
    assert not np.any(grads['W_q']) and not np.any(grads['W_k'])


def test_staging_only_touches_routing_blocks():
    inst = random_instance(CFG, trial=4)
    _, state = forward(inst)
    g0 = backward_sizepath(state, 0.0).gradients
    g1 = backward_sizepath(state, 1.0).gradients
    assert np.array_equal(g0['W_h'], g1['W_h'])
    assert np.array_equal(g0['b_h'], g1['b_h'])
    assert not np.allclose(g0['W_q'], g1['W_q'])


def test_no_injection_and_detached_cap_leaves_routing_untrained():
    inst = random_instance(CFG, trial=5)
    cond = dataclasses.replace(inst.cond_cfg, lambda0=0.0)
    _, state = forward_sizepath(inst.Q, inst.P, inst.params, inst.bank, inst.head, cond,
                                inst.cap_cfg, inst.targets, inst.e)
    grads = backward_sizepath(state, 0.0).gradients
    assert np.all(grads['W_q'] == 0.0)
    assert np.all(grads['W_k'] == 0.0)
    assert np.any(grads['W_h'])


def test_finite_diff_check_on_known_function():
    params = {'w': np.array([0.5, -1.0, 2.0])}

    def loss_fn(values):
        return float(np.sum(values['w'] ** 3))

    good = finite_diff_check(loss_fn, params, {'w': 3 * params['w'] ** 2})
    assert good.passed
    assert good.max_rel_error < 1e-8
    assert np.allclose(good.gradients['w'], [0.75, 3.0, 12.0], rtol=1e-8)
    # the point of evaluation is left untouched
    assert params['w'].tolist() == [0.5, -1.0, 2.0]

    bad = finite_diff_check(loss_fn, params, {'w': 2 * params['w'] ** 2})
    assert not bad.passed
    assert bad.block_passed == {'w': False}


def test_small_absolute_error_still_counts():
    def loss_fn(values):
        return float(1e-7 * values['w'][0])

    # off by 5e-10 in absolute terms, half a percent in relative terms
    report = finite_diff_check(loss_fn, {'w': np.array([1.0])}, {'w': np.array([1.005e-7])})
    assert report.block_errors['w'] == pytest.approx(0.005 / 1.005, rel=1e-6)
    assert not report.passed


def test_random_bank_shape():
    bank = random_bank(np.random.default_rng(0), n_classes=2, protos_per_class=3, feature_dim=4)
    assert bank.classes == ('class0', 'class1')
    assert bank.slices == ((0, 3), (3, 6))
    assert bank.centroids.shape == (6, 4)


def test_run_gradcheck_passes():
    summary = run_gradcheck(CFG)
    assert summary.trials == 3
    assert summary.passed, summary.format_text()
    summary.raise_on_failure()
    d = summary.to_dict()
    assert d['passed'] is True
    assert 'PASS' in summary.format_text()


def test_run_gradcheck_threads_agree():
    a = run_gradcheck(dataclasses.replace(CFG, trials=2))
    b = run_gradcheck(dataclasses.replace(CFG, trials=2), threads=2)
    assert a.to_dict() == b.to_dict()


def test_failed_summary_raises():
    summary = GradcheckSummary(trials=1, skipped=0, block_errors={'W_q@kappa=1': 0.5},
                               loss_spread=0.0, staged_zero=0.0, tol=1e-4)
    assert not summary.passed
    assert 'FAIL' in summary.format_text()
    with pytest.raises(GradientCheckError, match='max rel error'):
        summary.raise_on_failure()
