# -*- coding: utf-8 -*-
"""
Prior-bank value types and the canonical ``prio-bank/1`` text form.

The text form is JSON with sorted keys, two-space indentation and floats
rendered as shortest round-trip decimals, so equal banks serialise to equal
bytes.
"""
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from sizeprior.errors import FormatError, ValidationError

logger = logging.getLogger(__name__)

BANK_VERSION = 'prio-bank/1'
ORTHO_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class Prototype:
    """One size mode of a class.

    Attributes
    ----------
    class_id : int
        Index into the bank's class list.
    centroid : np.ndarray
        Visual centroid v_k (mean of unit-normalised member features).
    mu_lin, sigma_lin : np.ndarray
        Linear mean and population standard deviation of (h, w, l), meters.
    mu_log : np.ndarray
        Mean of log sizes.
    V_log : np.ndarray
        3x3 orthonormal eigenvectors (columns) of the log-size covariance.
    eta : np.ndarray
        Eigenvalues, descending, clamped at the bank's floor.
    count : int
        Number of member instances.
    """
    class_id: int
    centroid: np.ndarray
    mu_lin: np.ndarray
    sigma_lin: np.ndarray
    mu_log: np.ndarray
    V_log: np.ndarray
    eta: np.ndarray
    count: int

    @property
    def cov_log(self) -> np.ndarray:
        return self.V_log @ np.diag(self.eta) @ self.V_log.T

    def to_dict(self) -> dict:
        return {
            'class_id': int(self.class_id),
            'centroid': [float(v) for v in self.centroid],
            'mu_lin': [float(v) for v in self.mu_lin],
            'sigma_lin': [float(v) for v in self.sigma_lin],
            'mu_log': [float(v) for v in self.mu_log],
            'V_log': [[float(v) for v in row] for row in self.V_log],
            'eta': [float(v) for v in self.eta],
            'count': int(self.count),
        }

    @classmethod
    def from_dict(cls, d: dict) -> 'Prototype':
        try:
            return cls(
                class_id=int(d['class_id']),
                centroid=np.array(d['centroid'], dtype=float),
                mu_lin=np.array(d['mu_lin'], dtype=float),
                sigma_lin=np.array(d['sigma_lin'], dtype=float),
                mu_log=np.array(d['mu_log'], dtype=float),
                V_log=np.array(d['V_log'], dtype=float).reshape(3, 3),
                eta=np.array(d['eta'], dtype=float),
                count=int(d['count']),
            )
        except KeyError as exc:
            raise FormatError('missing prototype field', field=str(exc.args[0]))


@dataclass(frozen=True, eq=False)
class PriorBank:
    """Frozen collection of prototypes partitioned into class slices.

    Prototypes of class ``classes[c]`` occupy ``prototypes[slices[c][0]:slices[c][1]]``.
    """
    classes: tuple
    slices: tuple
    prototypes: tuple
    feature_dim: int
    build_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def __len__(self):
        return len(self.prototypes)

    def __repr__(self):
        sizes = ', '.join(f'{c}={b - a}' for c, (a, b) in zip(self.classes, self.slices))
        return f'PriorBank({sizes}, feature_dim={self.feature_dim})'

    def validate(self):
        """Check the slice partition and per-prototype invariants."""
        if len(self.slices) != len(self.classes):
            raise ValidationError('one slice per class required', field='slices')
        expected = 0
        for c, (start, stop) in enumerate(self.slices):
            if start != expected or stop <= start:
                raise ValidationError(f'slice {self.classes[c]} is not contiguous and '
                                      'non-empty', field='slices')
            for proto in self.prototypes[start:stop]:
                if proto.class_id != c:
                    raise ValidationError(f'prototype class_id {proto.class_id} in slice of '
                                          f'{self.classes[c]}', field='prototypes')
            expected = stop
        if expected != len(self.prototypes):
            raise ValidationError('slices do not cover every prototype', field='slices')
        for k, proto in enumerate(self.prototypes):
            V = proto.V_log
            if np.max(np.abs(V.T @ V - np.eye(3))) > ORTHO_TOL:
                raise ValidationError(f'V_log of prototype {k} not orthonormal',
                                      field='prototypes')
            if np.any(proto.eta <= 0.0):
                raise ValidationError(f'eta of prototype {k} not positive', field='prototypes')
            if len(proto.centroid) != self.feature_dim:
                raise ValidationError(f'centroid of prototype {k} has wrong length',
                                      field='prototypes')

    def slice_of(self, name: str) -> slice:
        start, stop = self.slices[self.classes.index(name)]
        return slice(start, stop)

    def class_index(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise ValidationError(f'class {name!r} not in bank {list(self.classes)}')

    # Stacked views for vectorised routing and CAP.

    @cached_property
    def proto_class(self) -> np.ndarray:
        return np.array([p.class_id for p in self.prototypes], dtype=int)

    @cached_property
    def centroids(self) -> np.ndarray:
        return np.stack([p.centroid for p in self.prototypes])

    @cached_property
    def mu_lin(self) -> np.ndarray:
        return np.stack([p.mu_lin for p in self.prototypes])

    @cached_property
    def sigma_lin(self) -> np.ndarray:
        return np.stack([p.sigma_lin for p in self.prototypes])

    @cached_property
    def mu_log(self) -> np.ndarray:
        return np.stack([p.mu_log for p in self.prototypes])

    @cached_property
    def V_log(self) -> np.ndarray:
        return np.stack([p.V_log for p in self.prototypes])

    @cached_property
    def eta(self) -> np.ndarray:
        return np.stack([p.eta for p in self.prototypes])

    @cached_property
    def precision_log(self) -> np.ndarray:
        """Per-prototype inverse log covariance V diag(1/eta) V^T, shape (K, 3, 3)."""
        V = self.V_log
        return np.einsum('kij,kj,klj->kil', V, 1.0 / self.eta, V)

    def to_dict(self) -> dict:
        return {
            'version': BANK_VERSION,
            'classes': list(self.classes),
            'slices': [[int(a), int(b)] for a, b in self.slices],
            'feature_dim': int(self.feature_dim),
            'build_meta': self.build_meta,
            'prototypes': [p.to_dict() for p in self.prototypes],
        }

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2,
                          separators=(',', ': '), allow_nan=False) + '\n'

    @classmethod
    def from_text(cls, text: str, source: str = '<bank>') -> 'PriorBank':
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f'invalid bank document: {exc}', source=source)
        if d.get('version') != BANK_VERSION:
            raise FormatError(f'unsupported version {d.get("version")!r}', source=source,
                              field='version')
        try:
            return cls(
                classes=tuple(d['classes']),
                slices=tuple((int(a), int(b)) for a, b in d['slices']),
                prototypes=tuple(Prototype.from_dict(p) for p in d['prototypes']),
                feature_dim=int(d['feature_dim']),
                build_meta=d.get('build_meta', {}),
            )
        except KeyError as exc:
            raise FormatError('missing bank field', source=source, field=str(exc.args[0]))
        except ValidationError as exc:
            raise FormatError(str(exc), source=source)

    def save(self, path: str):
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(self.to_text())
        logger.info('Saved %s to %s', self, path)

    @classmethod
    def load(cls, path: str) -> 'PriorBank':
        try:
            with open(path, 'r', encoding='utf-8') as f:
                return cls.from_text(f.read(), source=str(path))
        except OSError as exc:
            raise ValidationError(str(exc), source=str(path))


def assemble_bank(classes: Sequence[str], per_class: Sequence[Sequence[Prototype]],
                  feature_dim: int, build_meta: dict = None) -> PriorBank:
    """Concatenate per-class prototype lists into contiguous slices."""
    prototypes = []
    slices = []
    for protos in per_class:
        start = len(prototypes)
        prototypes.extend(protos)
        slices.append((start, len(prototypes)))
    return PriorBank(tuple(classes), tuple(slices), tuple(prototypes), int(feature_dim),
                     dict(build_meta or {}))
