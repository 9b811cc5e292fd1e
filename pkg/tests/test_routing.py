# -*- coding: utf-8 -*-
import dataclasses

import numpy as np
import pytest

from sizeprior.bank import assemble_bank
from sizeprior.errors import FormatError, RoutingError, ValidationError
from sizeprior.routing import (
    Query, RoutingParams, class_gated_weights, init_routing_params, mixture_prior,
    project_normalize, route, route_batch, slice_softmax)
from sizeprior.sizepath_grad import random_bank
from tests.helpers import two_class_bank


def test_mixture_moments_law_of_total_variance():
    """Moment-matched variance equals within- plus between-component variance."""
    bank = two_class_bank()
    a = np.array([0.2, 0.5, 0.3])
    prior = mixture_prior(a, bank)
    mu = bank.mu_lin
    sig = bank.sigma_lin
    expected_mu = sum(a[k] * mu[k] for k in range(3))
    within = sum(a[k] * sig[k] ** 2 for k in range(3))
    between = sum(a[k] * (mu[k] - expected_mu) ** 2 for k in range(3))
    assert np.allclose(prior.mu_hat, expected_mu, rtol=0, atol=1e-12)
    assert np.allclose(prior.sigma_hat ** 2, within + between, rtol=0, atol=1e-12)
    assert np.allclose(prior.m2, within + expected_mu ** 2 + between, atol=1e-12)


def test_one_hot_mixture_is_the_prototype():
    bank = two_class_bank()
    prior = mixture_prior([0.0, 1.0, 0.0], bank)
    assert np.allclose(prior.mu_hat, bank.mu_lin[1], rtol=0, atol=1e-12)
    assert np.allclose(prior.sigma_hat, bank.sigma_lin[1], rtol=0, atol=1e-12)


def test_zero_spread_is_clamped():
    bank = two_class_bank()
    flat = [dataclasses.replace(p, sigma_lin=np.zeros(3)) for p in bank.prototypes]
    bank0 = assemble_bank(bank.classes, [flat[:2], flat[2:]], bank.feature_dim)
    prior = mixture_prior([0.0, 0.0, 1.0], bank0)
    assert np.allclose(prior.sigma_hat, 1e-6, rtol=1e-12, atol=0)


def test_mixture_prior_rejects_bad_weights():
    bank = two_class_bank()
    with pytest.raises(ValidationError):
        mixture_prior([0.5, 0.6, 0.0], bank)
    with pytest.raises(ValidationError):
        mixture_prior([0.5, 0.5], bank)
    with pytest.raises(ValidationError):
        mixture_prior([1.5, -0.5, 0.0], bank)


def test_slice_softmax_is_per_slice():
    logits = np.array([1.0, 2.0, 5.0, -3.0])
    out = slice_softmax(logits, ((0, 2), (2, 4)))
    assert out[:2].sum() == pytest.approx(1.0)
    assert out[2:].sum() == pytest.approx(1.0)
    assert out[1] / out[0] == pytest.approx(np.e)


def test_class_gate_masses_follow_p():
    slices = ((0, 2), (2, 3), (3, 6))
    logits = np.array([0.3, -1.0, 2.0, 0.1, 0.4, -0.2])
    p = np.array([0.2, 0.3, 0.1])
    a = class_gated_weights(logits, p, slices)
    assert np.all(a >= 0.0)
    assert a.sum() == pytest.approx(1.0, abs=1e-12)
    pi = p / p.sum()
    for c, (start, stop) in enumerate(slices):
        assert a[start:stop].sum() == pytest.approx(pi[c], abs=1e-12)
    # a single-prototype slice receives exactly its class mass
    assert a[2] == pytest.approx(pi[1], abs=1e-14)


def test_zero_probability_slice_is_exactly_zero():
    slices = ((0, 2), (2, 3))
    a = class_gated_weights(np.array([10.0, 20.0, -5.0]), np.array([0.0, 0.7]), slices)
    assert a[0] == 0.0 and a[1] == 0.0
    assert a[2] == 1.0


def test_batch_gating_matches_rows():
    rng = np.random.default_rng(0)
    slices = ((0, 2), (2, 3))
    L = rng.normal(size=(4, 3))
    P = rng.dirichlet(np.ones(2), size=4)
    A = class_gated_weights(L, P, slices)
    for i in range(4):
        assert np.allclose(A[i], class_gated_weights(L[i], P[i], slices), atol=1e-15)


def test_all_zero_probabilities_raise():
    with pytest.raises(RoutingError):
        class_gated_weights(np.zeros(3), np.zeros(2), ((0, 2), (2, 3)))


def test_bad_probability_vector():
    with pytest.raises(ValidationError):
        class_gated_weights(np.zeros(3), np.array([0.5, 0.5, 0.0]), ((0, 2), (2, 3)))
    with pytest.raises(ValidationError):
        class_gated_weights(np.zeros(3), np.array([1.5, -0.5]), ((0, 2), (2, 3)))
    with pytest.raises(ValidationError):
        Query(np.zeros(4), np.array([np.nan, 1.0]))


def test_project_normalize():
    W = np.array([[3.0, 0.0], [0.0, 4.0], [0.0, 0.0]])
    assert np.allclose(project_normalize([1.0, 1.0], W), [0.6, 0.8, 0.0])
    assert np.array_equal(project_normalize([0.0, 0.0], W), np.zeros(3))
    with pytest.raises(ValidationError):
        project_normalize([1.0, 1.0, 1.0], W)


def test_init_routing_params():
    a = init_routing_params(16, 8, proj_dim=64, seed=3)
    b = init_routing_params(16, 8, proj_dim=64, seed=3)
    c = init_routing_params(16, 8, proj_dim=64, seed=4)
    assert a.W_q.shape == (64, 16) and a.W_k.shape == (64, 8)
    assert np.array_equal(a.W_q, b.W_q) and np.array_equal(a.W_k, b.W_k)
    assert not np.array_equal(a.W_q, c.W_q)
    assert a.alpha == pytest.approx(1.0 / 8.0)
    assert np.abs(a.W_q).max() <= 0.25
    assert np.abs(a.W_k).max() <= 1.0 / np.sqrt(8)
    assert init_routing_params(4, 4).proj_dim == 256


def test_routing_params_validation():
    with pytest.raises(ValidationError):
        RoutingParams(np.ones((3, 2)), np.ones((4, 2)), 1.0)
    with pytest.raises(ValidationError):
        RoutingParams(np.ones((3, 2)), np.ones((3, 2)), 0.0)


def test_routing_params_save_load(tmp_path):
    params = init_routing_params(5, 2, proj_dim=6, seed=1)
    path = str(tmp_path / 'params.npz')
    params.save(path)
    loaded = RoutingParams.load(path)
    assert np.array_equal(loaded.W_q, params.W_q)
    assert loaded.alpha == params.alpha
    np.savez(str(tmp_path / 'partial.npz'), W_q=params.W_q)
    with pytest.raises(FormatError, match='W_k'):
        RoutingParams.load(str(tmp_path / 'partial.npz'))


def test_route_matches_batch_and_hand_logits():
    bank = two_class_bank()
    params = init_routing_params(4, 2, proj_dim=5, seed=2)
    q = np.array([0.3, -0.2, 1.0, 0.5])
    p = np.array([0.8, 0.2])
    prior = route(Query(q, p), params, bank)

    qn = project_normalize(q, params.W_q)
    logits = np.array([params.alpha * qn @ project_normalize(v, params.W_k)
                       for v in bank.centroids])
    a = class_gated_weights(logits, p, bank.slices)
    assert np.allclose(prior.a, a, rtol=0, atol=1e-12)
    assert np.allclose(prior.mu_hat, a @ bank.mu_lin, rtol=0, atol=1e-12)

    A, mu_hat, sigma_hat, _ = route_batch(np.vstack([q, q]), np.vstack([p, p]), params, bank)
    assert np.allclose(A[1], prior.a, atol=1e-15)
    assert np.allclose(sigma_hat[0], prior.sigma_hat, atol=1e-15)


def test_degenerate_query_routes_uniformly_in_slice():
    bank = two_class_bank()
    params = init_routing_params(4, 2, proj_dim=5, seed=2)
    prior = route(Query(np.zeros(4), np.array([0.5, 0.5])), params, bank)
    assert prior.a.tolist() == pytest.approx([0.25, 0.25, 0.5])


def test_route_rejects_feature_dim_mismatch():
    bank = two_class_bank()
    params = init_routing_params(4, 3, proj_dim=5)
    with pytest.raises(ValidationError):
        route_batch(np.zeros((1, 4)), np.array([[1.0, 0.0]]), params, bank)


def test_random_mixture_moments_against_enumeration():
    rng = np.random.default_rng(11)
    for _ in range(200):
        bank = random_bank(rng, n_classes=int(rng.integers(1, 4)),
                           protos_per_class=int(rng.integers(1, 3)), feature_dim=3)
        a = rng.dirichlet(np.ones(len(bank)))
        prior = mixture_prior(a, bank)
        mu = np.zeros(3)
        m2 = np.zeros(3)
        for k, proto in enumerate(bank.prototypes):
            mu += a[k] * proto.mu_lin
            m2 += a[k] * (proto.sigma_lin ** 2 + proto.mu_lin ** 2)
        assert np.allclose(prior.mu_hat, mu, rtol=0, atol=1e-12)
        assert np.allclose(prior.m2, m2, rtol=0, atol=1e-12)
        assert np.allclose(prior.sigma_hat, np.sqrt(np.maximum(m2 - mu ** 2, 1e-12)),
                           rtol=0, atol=1e-12)


def test_random_routing_invariants():
    rng = np.random.default_rng(12)
    for _ in range(200):
        n_classes = int(rng.integers(1, 4))
        bank = random_bank(rng, n_classes, int(rng.integers(1, 4)), feature_dim=3)
        params = init_routing_params(5, 3, proj_dim=4, seed=int(rng.integers(1000)))
        q = rng.normal(size=5)
        p = rng.dirichlet(np.ones(n_classes))
        if n_classes > 1:
            p[rng.integers(n_classes)] = 0.0
        a = route(Query(q, p), params, bank).a
        assert abs(a.sum() - 1.0) <= 1e-9
        for c, (start, stop) in enumerate(bank.slices):
            if p[c] == 0.0:
                assert np.all(a[start:stop] == 0.0)

        logits = rng.normal(size=len(bank))
        shifted = logits.copy()
        for start, stop in bank.slices:
            shifted[start:stop] += rng.normal() * 5.0
        assert np.allclose(class_gated_weights(logits, p, bank.slices),
                           class_gated_weights(shifted, p, bank.slices), rtol=0, atol=1e-12)

        c = int(rng.integers(n_classes))
        one_hot = np.eye(n_classes)[c]
        start, stop = bank.slices[c]
        collapsed = class_gated_weights(logits, one_hot, bank.slices)
        assert abs(collapsed[start:stop].sum() - 1.0) <= 1e-9
