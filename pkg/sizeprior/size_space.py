# -*- coding: utf-8 -*-
"""
Metric size triples and their log-space image.

All sizes are (h, w, l) in meters. Conditioning and CAP operate on the
componentwise natural logarithm ``log(d + eps)``.

    >>> from sizeprior.size_space import SizeTriple, to_log, from_log
    >>> x = to_log(SizeTriple(1.52, 1.63, 3.88))
    >>> d = from_log(x)
"""
import logging
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from sizeprior.errors import NumericError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-6
POSITIVITY_FLOOR = 1e-9
# exp() overflows float64 just above this.
_EXP_LIMIT = 709.78


@dataclass(frozen=True)
class EpsilonConfig:
    """Offset added before taking logarithms (meters)."""
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if not (math.isfinite(self.eps) and self.eps >= 0.0):
            raise ValidationError(f'eps must be finite and >= 0, got {self.eps!r}',
                                  field='eps')


@dataclass(frozen=True)
class SizeTriple:
    """Object dimensions in meters, KITTI order (h, w, l)."""
    h: float
    w: float
    l: float

    def __post_init__(self):
        for name in ('h', 'w', 'l'):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValidationError(f'size component must be finite, got {value!r}',
                                      field=name)
            if value <= 0.0:
                raise ValidationError(f'size component must be > 0, got {value!r}',
                                      field=name)

    def __iter__(self) -> Iterator[float]:
        return iter((self.h, self.w, self.l))

    def as_array(self) -> np.ndarray:
        return np.array([self.h, self.w, self.l], dtype=float)

    @classmethod
    def from_array(cls, values) -> 'SizeTriple':
        h, w, l = (float(v) for v in values)
        return cls(h, w, l)


@dataclass(frozen=True)
class LogSize:
    """Componentwise log of a size triple (dimensionless log-meters)."""
    x_h: float
    x_w: float
    x_l: float

    def __post_init__(self):
        for name in ('x_h', 'x_w', 'x_l'):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError('log-size component must be finite', field=name)

    def __iter__(self) -> Iterator[float]:
        return iter((self.x_h, self.x_w, self.x_l))

    def as_array(self) -> np.ndarray:
        return np.array([self.x_h, self.x_w, self.x_l], dtype=float)

    @classmethod
    def from_array(cls, values) -> 'LogSize':
        a, b, c = (float(v) for v in values)
        return cls(a, b, c)


def _eps_value(eps) -> float:
    if eps is None:
        return DEFAULT_EPS
    if isinstance(eps, EpsilonConfig):
        return eps.eps
    return EpsilonConfig(float(eps)).eps


def to_log(d: SizeTriple, eps: EpsilonConfig = None) -> LogSize:
    """Map a metric size to log-space, ``ln(d + eps)`` componentwise.

    Parameters
    ----------
    d : SizeTriple
        Positive finite size. Plain sequences of three floats are validated
        through SizeTriple first.
    eps : EpsilonConfig, optional
        Offset. The default is ``EpsilonConfig()`` (1e-6 m).

    Raises
    ------
    ValidationError
        Non-finite or non-positive components.
    """
    if not isinstance(d, SizeTriple):
        d = SizeTriple.from_array(d)
    e = _eps_value(eps)
    return LogSize(math.log(d.h + e), math.log(d.w + e), math.log(d.l + e))


def from_log(x: LogSize, eps: EpsilonConfig = None) -> SizeTriple:
    """Inverse of `to_log`: ``exp(x) - eps`` clamped at the positivity floor."""
    if not isinstance(x, LogSize):
        x = LogSize.from_array(x)
    e = _eps_value(eps)
    out = []
    for name, value in zip(('h', 'w', 'l'), x):
        if value > _EXP_LIMIT:
            raise NumericError(f'exp overflow in component {name}: {value!r}')
        out.append(max(math.exp(value) - e, POSITIVITY_FLOOR))
    return SizeTriple(*out)


def log_array(sizes: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Vectorised `to_log` over an (N, 3) array of sizes in meters."""
    sizes = np.asarray(sizes, dtype=float)
    if not np.all(np.isfinite(sizes)) or np.any(sizes <= 0.0):
        raise ValidationError('sizes must be finite and strictly positive')
    return np.log(sizes + eps)
