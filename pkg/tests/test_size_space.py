# -*- coding: utf-8 -*-
import math

import numpy as np
import pytest

from sizeprior.errors import NumericError, ValidationError
from sizeprior.size_space import (
    DEFAULT_EPS, POSITIVITY_FLOOR, EpsilonConfig, LogSize, SizeTriple, from_log, log_array,
    to_log)


def test_to_log_componentwise():
    x = to_log(SizeTriple(1.52, 1.63, 3.88))
    assert x.x_h == math.log(1.52 + DEFAULT_EPS)
    assert x.x_w == math.log(1.63 + DEFAULT_EPS)
    assert x.x_l == math.log(3.88 + DEFAULT_EPS)


def test_from_log_inverts_to_log():
    d = SizeTriple(1.52, 0.48, 3.88)
    back = from_log(to_log(d))
    assert np.allclose(back.as_array(), d.as_array(), rtol=1e-12, atol=0)


def test_zero_eps_is_plain_log():
    x = to_log((2.0, 1.0, 4.0), EpsilonConfig(0.0))
    assert x.as_array().tolist() == [math.log(2.0), 0.0, math.log(4.0)]


def test_from_log_clamps_at_floor():
    """exp(x) - eps below zero is clamped at the positivity floor."""
    d = from_log(LogSize(-40.0, 0.0, 0.0), EpsilonConfig(1e-6))
    assert d.h == POSITIVITY_FLOOR
    assert d.w == pytest.approx(1.0 - 1e-6)


def test_from_log_overflow_names_component():
    try:
        from_log(LogSize(0.0, 800.0, 0.0))
    except NumericError as exc:
        assert 'w' in str(exc)
    else:
        assert False


@pytest.mark.parametrize('bad', [(0.0, 1.0, 1.0), (1.0, -2.0, 1.0), (1.0, 1.0, float('nan')),
                                 (float('inf'), 1.0, 1.0)])
def test_size_triple_rejects(bad):
    with pytest.raises(ValidationError):
        SizeTriple(*bad)


def test_size_triple_names_field():
    try:
        SizeTriple(1.0, 1.0, 0.0)
    except ValidationError as exc:
        assert exc.field == 'l'
        assert str(exc).startswith('l: ')
    else:
        assert False


def test_negative_eps_rejected():
    with pytest.raises(ValidationError):
        EpsilonConfig(-1e-3)
    with pytest.raises(ValidationError):
        EpsilonConfig(float('nan'))


def test_log_array_matches_scalar_path():
    sizes = np.array([[1.5, 1.6, 3.9], [1.7, 0.6, 0.8]])
    logs = log_array(sizes)
    for row, d in zip(logs, sizes):
        assert np.allclose(row, to_log(SizeTriple.from_array(d)).as_array(), rtol=1e-14, atol=0)


def test_log_array_rejects_non_positive():
    with pytest.raises(ValidationError):
        log_array(np.array([[1.0, 1.0, 0.0]]))


def test_log_size_rejects_non_finite():
    with pytest.raises(ValidationError):
        LogSize(0.0, float('inf'), 0.0)
