# -*- coding: utf-8 -*-
"""
Offline construction of the class-aware prior bank.

Per class: filter -> k-means on log sizes (geometry groups) -> k-means on
unit-normalised features inside each group (appearance subtypes) -> prototype
statistics -> merge prototypes below the minimum support into the retained
prototype with the most similar visual centroid.

    >>> from sizeprior.bank_builder import build_bank
    >>> bank = build_bank(labels, features, thresholds, BankConfig(seed=7))
    >>> bank.save('bank.json')
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from sizeprior.bank import PriorBank, Prototype, assemble_bank
from sizeprior.config import BankConfig, FilterThresholds, KMeansConfig, config_hash
from sizeprior.errors import ValidationError
from sizeprior.kitti_io import FeatureTable, filter_instances
from sizeprior.size_space import DEFAULT_EPS, log_array

logger = logging.getLogger(__name__)


# %% k-means

def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[rng.integers(0, n)]
    closest = _sq_dists(X, centroids[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = rng.integers(0, n)
        else:
            idx = rng.choice(n, p=closest / total)
        centroids[i] = X[idx]
        closest = np.minimum(closest, _sq_dists(X, centroids[i:i + 1])[:, 0])
    return centroids


def _lloyd(X: np.ndarray, centroids: np.ndarray, cfg: KMeansConfig) -> tuple:
    k = centroids.shape[0]
    labels = np.argmin(_sq_dists(X, centroids), axis=1)
    for _ in range(cfg.max_iters):
        new = np.empty_like(centroids)
        for j in range(k):
            mask = labels == j
            if np.any(mask):
                new[j] = X[mask].mean(axis=0)
            else:
                # Reseed an empty cluster at the worst-fitted point.
                fit = _sq_dists(X, centroids)[np.arange(len(X)), labels]
                new[j] = X[int(np.argmax(fit))]
        shift = np.max(np.abs(new - centroids))
        centroids = new
        new_labels = np.argmin(_sq_dists(X, centroids), axis=1)
        stable = np.array_equal(new_labels, labels)
        labels = new_labels
        if shift <= cfg.tol or stable:
            break
    inertia = float(_sq_dists(X, centroids)[np.arange(len(X)), labels].sum())
    return labels, centroids, inertia


def _canonical(labels: np.ndarray) -> np.ndarray:
    """Relabel groups in order of first appearance."""
    mapping = {}
    out = np.empty_like(labels)
    for i, lab in enumerate(labels):
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out[i] = mapping[lab]
    return out


def kmeans(X, k: int, seed: int, cfg: KMeansConfig = None, stream: tuple = ()) -> np.ndarray:
    """Lloyd's k-means with k-means++ seeding and independent restarts.

    Parameters
    ----------
    X : array (N, d)
        Points.
    k : int
        Requested number of groups; the effective count is
        ``min(k, number of distinct points)``.
    seed : int
        Base seed. Restart ``r`` draws from ``default_rng([seed, *stream, r])``.
    cfg : KMeansConfig, optional
    stream : tuple[int]
        Extra seed words identifying the caller (class, pass, group).

    Returns
    -------
    np.ndarray[int]
        Group index per point, numbered by first appearance.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValidationError('k-means needs a non-empty (N, d) array')
    if k < 1:
        raise ValidationError(f'k must be >= 1, got {k}', field='k')
    if seed < 0:
        raise ValidationError(f'seed must be non-negative, got {seed}', field='seed')
    cfg = cfg or KMeansConfig()
    k_eff = min(int(k), len(np.unique(X, axis=0)))
    if k_eff == 1:
        return np.zeros(len(X), dtype=int)

    best = None
    for r in range(cfg.restarts):
        rng = np.random.default_rng([int(seed), *[int(s) for s in stream], r])
        labels, _, inertia = _lloyd(X, _kmeans_pp(X, k_eff, rng), cfg)
        logger.debug('k-means restart %d (stream %s): inertia %.6g', r, stream, inertia)
        if best is None or inertia < best[1]:
            best = (labels, inertia)
    return _canonical(best[0])


def cluster_geometry(log_sizes, k: int, seed: int, cfg: KMeansConfig = None,
                     stream: tuple = ()) -> np.ndarray:
    """Cluster log sizes (N, 3) into coarse geometry groups."""
    X = np.array([list(x) for x in log_sizes], dtype=float).reshape(-1, 3)
    if len(X) == 0:
        raise ValidationError('cannot cluster an empty set of sizes')
    return kmeans(X, k, seed, cfg, stream)


def unit_rows(features) -> np.ndarray:
    """Scale rows to unit norm, leaving zero rows untouched."""
    F = np.asarray(features, dtype=float)
    norms = np.linalg.norm(F, axis=1, keepdims=True)
    return np.divide(F, norms, out=F.copy(), where=norms > 0.0)


def cluster_appearance(features, k2: int, seed: int, cfg: KMeansConfig = None,
                       stream: tuple = ()) -> np.ndarray:
    """Cluster cosine-normalised feature vectors into appearance subtypes."""
    F = np.asarray(features, dtype=float)
    if F.ndim != 2 or len(F) == 0:
        raise ValidationError('cannot cluster an empty set of features')
    return kmeans(unit_rows(F), k2, seed, cfg, stream)


# %% Prototype statistics

def _eigen(cov: np.ndarray, floor: float) -> tuple:
    if not np.any(cov):
        return np.eye(3), np.full(3, floor)
    values, vectors = np.linalg.eigh(cov)
    order = np.argsort(-values, kind='stable')
    values = np.maximum(values[order], floor)
    vectors = vectors[:, order]
    for j in range(3):
        col = vectors[:, j]
        if col[int(np.argmax(np.abs(col)))] < 0.0:
            vectors[:, j] = -col
    return vectors, values


def prototype_from_arrays(sizes: np.ndarray, features: np.ndarray, class_id: int,
                          eps: float = DEFAULT_EPS, floor: float = 1e-4) -> Prototype:
    sizes = np.asarray(sizes, dtype=float).reshape(-1, 3)
    features = np.asarray(features, dtype=float)
    if len(sizes) == 0:
        raise ValidationError('prototype needs at least one member')
    logs = log_array(sizes, eps)
    mu_log = logs.mean(axis=0)
    centred = logs - mu_log
    cov = centred.T @ centred / len(logs)
    V, eta = _eigen(cov, floor)
    return Prototype(
        class_id=int(class_id),
        centroid=unit_rows(features.reshape(len(sizes), -1)).mean(axis=0),
        mu_lin=sizes.mean(axis=0),
        sigma_lin=sizes.std(axis=0),
        mu_log=mu_log,
        V_log=V,
        eta=eta,
        count=len(sizes),
    )


def compute_prototype_stats(members: Sequence[tuple], class_id: int,
                            eps: float = DEFAULT_EPS, floor: float = 1e-4) -> Prototype:
    """Moments and log-space manifold of a member set.

    Parameters
    ----------
    members : sequence of (SizeTriple, feature vector)
    class_id : int
    eps : float
        Log offset.
    floor : float
        Lower clamp on covariance eigenvalues.

    Returns
    -------
    Prototype
        Linear mean/population std, log mean, descending eigenpairs of the
        population log covariance (largest-magnitude entry of each eigenvector
        positive) and the mean unit-normalised feature.
    """
    if len(members) == 0:
        raise ValidationError('prototype needs at least one member')
    sizes = np.array([list(size) for size, _ in members], dtype=float)
    feats = np.array([np.asarray(vec, dtype=float) for _, vec in members])
    return prototype_from_arrays(sizes, feats, class_id, eps, floor)


# %% Merging

@dataclass
class Members:
    """Member sizes, features and instance keys of one prototype."""
    sizes: np.ndarray
    features: np.ndarray
    keys: list

    def __len__(self):
        return len(self.sizes)

    def union(self, other: 'Members') -> 'Members':
        return Members(np.vstack([self.sizes, other.sizes]),
                       np.vstack([self.features, other.features]),
                       list(self.keys) + list(other.keys))


def _as_members(item) -> Members:
    if isinstance(item, Members):
        return item
    sizes = np.array([list(size) for size, _ in item], dtype=float)
    feats = np.array([np.asarray(vec, dtype=float) for _, vec in item])
    return Members(sizes, feats, list(range(len(sizes))))


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def merge_small_clusters(protos: Sequence[Prototype], min_support: int, member_store,
                         eps: float = DEFAULT_EPS, floor: float = 1e-4,
                         return_members: bool = False):
    """Fold prototypes below ``min_support`` into retained prototypes.

    The smallest under-supported prototype (lowest index on ties) moves its
    members to the retained prototype with the most cosine-similar centroid
    (lowest index on ties); the recipient is recomputed from the pooled set.
    Repeats until stable. With no retained prototype every member pools into
    a single prototype.

    Parameters
    ----------
    protos : sequence of Prototype
        All of one class.
    min_support : int
    member_store : sequence
        Members of each prototype, aligned with ``protos``: `Members` or
        sequences of (SizeTriple, feature vector).

    Returns
    -------
    list[Prototype], and the aligned member list if ``return_members``.
    """
    protos = list(protos)
    members = [_as_members(m) for m in member_store]
    if len(protos) != len(members):
        raise ValidationError('member_store must align with protos')
    if not protos:
        return (protos, members) if return_members else protos
    class_id = protos[0].class_id

    while True:
        small = [i for i, p in enumerate(protos) if p.count < min_support]
        if not small:
            break
        retained = [i for i, p in enumerate(protos) if p.count >= min_support]
        if not retained:
            pooled = members[0]
            for m in members[1:]:
                pooled = pooled.union(m)
            logger.debug('No prototype reaches support %d; pooling %d members',
                         min_support, len(pooled))
            protos = [prototype_from_arrays(pooled.sizes, pooled.features, class_id, eps, floor)]
            members = [pooled]
            break
        donor = min(small, key=lambda i: (protos[i].count, i))
        sims = [(-_cosine(protos[donor].centroid, protos[r].centroid), r) for r in retained]
        recipient = min(sims)[1]
        pooled = members[recipient].union(members[donor])
        logger.debug('Merging prototype %d (count %d) into %d', donor, protos[donor].count,
                     recipient)
        protos[recipient] = prototype_from_arrays(pooled.sizes, pooled.features, class_id,
                                                  eps, floor)
        members[recipient] = pooled
        del protos[donor]
        del members[donor]

    if return_members:
        return protos, members
    return protos


# %% Bank assembly

def build_class_prototypes(sizes: np.ndarray, features: np.ndarray, keys: list,
                           class_id: int, cfg: BankConfig, name: str = '') -> tuple:
    """Geometry-first then appearance clustering, statistics and merging for one class.

    Returns
    -------
    (list[Prototype], list[Members])
    """
    logs = log_array(sizes, cfg.eps)
    groups = cluster_geometry(logs, cfg.geometry_k_of(name), cfg.seed, cfg.kmeans,
                              stream=(class_id, 0))
    protos, members = [], []
    for g in range(int(groups.max()) + 1):
        idx = np.flatnonzero(groups == g)
        subtypes = cluster_appearance(features[idx], cfg.appearance_k_of(name), cfg.seed,
                                      cfg.kmeans, stream=(class_id, 1, g))
        for s in range(int(subtypes.max()) + 1):
            sub = idx[subtypes == s]
            m = Members(sizes[sub], features[sub], [keys[i] for i in sub])
            protos.append(prototype_from_arrays(m.sizes, m.features, class_id, cfg.eps,
                                                cfg.eigenvalue_floor))
            members.append(m)
    logger.debug('%s: %d geometry groups, %d subtypes before merging', name,
                 int(groups.max()) + 1, len(protos))
    return merge_small_clusters(protos, cfg.min_support, members, cfg.eps,
                                cfg.eigenvalue_floor, return_members=True)


def build_bank(labels, features: FeatureTable, thresholds: FilterThresholds,
               cfg: BankConfig, threads: int = 1, return_members: bool = False):
    """Build the class-aware prior bank offline.

    Parameters
    ----------
    labels : sequence of LabelInstance
    features : FeatureTable
        One row per filtered instance, keyed by instance_key.
    thresholds : FilterThresholds
    cfg : BankConfig
    threads : int
        Classes are built concurrently on up to this many threads.

    Raises
    ------
    ValidationError
        A class without surviving instances, or a filtered instance without
        a feature row.
    """
    filtered = filter_instances(labels, thresholds)
    per_class = []
    for class_id, name in enumerate(cfg.classes):
        insts = [inst for inst in filtered if inst.class_name == name]
        if not insts:
            raise ValidationError('no instances survive filtering', field=name)
        for inst in insts:
            if inst.instance_key not in features:
                raise ValidationError('missing feature row', field=f'instance_key {inst.instance_key}')
        sizes = np.array([list(inst.size) for inst in insts], dtype=float)
        feats = np.array([features.get(inst.instance_key) for inst in insts], dtype=float)
        keys = [inst.instance_key for inst in insts]
        per_class.append((sizes, feats, keys, class_id, name))

    def work(item):
        sizes, feats, keys, class_id, name = item
        return build_class_prototypes(sizes, feats, keys, class_id, cfg, name)

    with ThreadPoolExecutor(max_workers=max(1, int(threads))) as pool:
        results = list(pool.map(work, per_class))

    meta = {
        'seed': int(cfg.seed),
        'config_hash': config_hash(cfg),
        'eigenvalue_floor': float(cfg.eigenvalue_floor),
        'eps': float(cfg.eps),
        'source_counts': {
            'labels': len(labels),
            'filtered': len(filtered),
            'per_class': {name: len(item[2]) for name, item in zip(cfg.classes, per_class)},
        },
    }
    bank = assemble_bank(cfg.classes, [protos for protos, _ in results], features.dim, meta)
    logger.info('Built %s from %d filtered instances', bank, len(filtered))
    if return_members:
        return bank, [m for _, m in results]
    return bank
