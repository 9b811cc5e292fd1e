"""
Sizeprior
---------
Adaptive size priors for monocular 3D detection heads. Metric object size is
conditioned on a bank of class-aware size prototypes built offline from
labels, selected per query by class-gated soft routing, and attenuated by the
routed uncertainty. A cluster-aligned regulariser (CAP) pulls matched
predictions toward the prototype manifolds during training.

Usage
-----

Build a bank from KITTI labels and precomputed features:

    >>> from sizeprior import BankConfig, FilterThresholds, build_bank
    >>> from sizeprior.kitti_io import load_label_dir, load_feature_file
    >>> labels = load_label_dir('training/label_2')
    >>> features = load_feature_file(open('features.bin', 'rb').read())
    >>> bank = build_bank(labels, features, FilterThresholds(), BankConfig())
    >>> bank.save('bank.json')

Route a query and condition a residual:

    >>> from sizeprior import Query, init_routing_params, route, predict_size
    >>> params = init_routing_params(query_dim=256, feature_dim=bank.feature_dim)
    >>> prior = route(Query(q, p), params, bank)
    >>> size = predict_size(r, p, prior.mu_hat, prior.sigma_hat,
    >>>                     ConditioningConfig(), bank.classes)

Run the synthetic ambiguity suite:

    >>> from sizeprior import RunConfig, run_suite
    >>> summary = run_suite(RunConfig(), seeds=range(11))
    >>> print(summary.format_text())

Force global settings:

    >>> import sizeprior
    >>> sizeprior.Settings.threads = 4
    >>> sizeprior.Settings.disable_cache = True

The same stages are available from the ``sizeprior`` command line.
"""
from sizeprior.errors import (
    FormatError, GradientCheckError, NumericError, PrioError, RoutingError, ValidationError)
from sizeprior.config import (
    BankConfig, CapConfig, ConditioningConfig, FilterThresholds, GradcheckConfig,
    RoutingConfig, RunConfig, Settings, ToyConfig, load_run_config)
from sizeprior.size_space import EpsilonConfig, LogSize, SizeTriple, from_log, to_log
from sizeprior.bank import PriorBank, Prototype
from sizeprior.bank_builder import build_bank
from sizeprior.routing import Query, RoutedPrior, RoutingParams, init_routing_params, route
from sizeprior.conditioning import condition_size, predict_size, prior_strength
from sizeprior.cap import cap_loss, cap_schedule, staging_coefficient, total_loss
from sizeprior.toy_harness import run_suite
