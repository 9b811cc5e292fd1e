# -*- coding: utf-8 -*-
"""Small builders shared by the test modules."""
import numpy as np

from sizeprior.bank import Prototype, assemble_bank
from sizeprior.kitti_io import FeatureTable


def feature_table_for(labels, dim: int = 4) -> FeatureTable:
    """Deterministic feature rows: a per-class direction plus key-seeded noise."""
    names = sorted({inst.class_name for inst in labels})
    base = {name: np.eye(dim)[i % dim] for i, name in enumerate(names)}
    rows = {}
    for inst in labels:
        rng = np.random.default_rng(inst.instance_key)
        rows[inst.instance_key] = base[inst.class_name] + 0.1 * rng.normal(size=dim)
    return FeatureTable(dim, rows)


def make_proto(class_id, mu_lin, sigma_lin=(0.1, 0.1, 0.2), centroid=(1.0, 0.0),
               eta=(0.04, 0.02, 0.01), V=None, mu_log=None, count=30) -> Prototype:
    mu_lin = np.array(mu_lin, dtype=float)
    return Prototype(
        class_id=class_id,
        centroid=np.array(centroid, dtype=float),
        mu_lin=mu_lin,
        sigma_lin=np.array(sigma_lin, dtype=float),
        mu_log=np.log(mu_lin) if mu_log is None else np.array(mu_log, dtype=float),
        V_log=np.eye(3) if V is None else np.array(V, dtype=float),
        eta=np.array(eta, dtype=float),
        count=count,
    )


def two_class_bank():
    """Car with two size modes, Pedestrian with one; 2-d centroids."""
    car = [make_proto(0, (1.50, 1.62, 3.80), centroid=(1.0, 0.2)),
           make_proto(0, (1.80, 1.80, 4.70), sigma_lin=(0.1, 0.15, 0.3), centroid=(0.1, 1.0))]
    ped = [make_proto(1, (1.72, 0.64, 0.86), sigma_lin=(0.08, 0.05, 0.07),
                      centroid=(-1.0, 0.3))]
    return assemble_bank(('Car', 'Pedestrian'), [car, ped], feature_dim=2)
