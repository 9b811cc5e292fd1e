# -*- coding: utf-8 -*-
"""
Settings and run configuration.

Global overrides live on `Settings`; they win over whatever a caller passes in,
the same way the per-function options of a cache are overridden globally.

    >>> from sizeprior.config import Settings
    >>> Settings.threads = 4

Experiment configuration is a nested YAML document loaded into frozen
dataclasses. Unknown keys are rejected with the dotted key in the message.

    >>> cfg = load_run_config('run.yaml', overrides=['cap.lambda_cap=0.1'])
"""
import copy
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Union

import yaml

from sizeprior.errors import ValidationError
from sizeprior.size_space import DEFAULT_EPS, EpsilonConfig

logger = logging.getLogger(__name__)

DEFAULT_CLASSES = ('Car', 'Pedestrian', 'Cyclist')
DEFAULT_SEED = 0
DEFAULT_THREADS = 1
DEFAULT_CACHE_DIR = '.sizeprior-cache'
DEFAULT_TOY_EPOCHS = 200

ENV_SEED = 'PRIO_SEED'
ENV_THREADS = 'PRIO_THREADS'


class Settings:
    """Global settings. These overwrite local settings if set.

    Attributes
    ----------
    seed : int or None
        Forces the global seed for every run. None leaves it to the caller.
    threads : int or None
        Caps worker threads for bank building and suite runs.
    cache_dir : str
        Directory of the on-disk run cache. '' for default.
    disable_cache : bool
        True to bypass the run cache entirely.
    """
    seed = None
    threads = None
    cache_dir = ''
    disable_cache = False


def get_seed(flag: Union[int, None] = None, config_seed: Union[int, None] = None) -> int:
    """Resolve the seed: Settings > flag > env PRIO_SEED > config > default."""
    if Settings.seed is not None:
        return int(Settings.seed)
    if flag is not None:
        return int(flag)
    env = os.environ.get(ENV_SEED, '')
    if env != '':
        try:
            return int(env)
        except ValueError:
            raise ValidationError(f'not an integer: {env!r}', source='environment',
                                  field=ENV_SEED)
    if config_seed is not None:
        return int(config_seed)
    return DEFAULT_SEED


def get_threads(flag: Union[int, None] = None) -> int:
    if Settings.threads is not None:
        return max(1, int(Settings.threads))
    if flag is not None:
        return max(1, int(flag))
    env = os.environ.get(ENV_THREADS, '')
    if env != '':
        try:
            return max(1, int(env))
        except ValueError:
            raise ValidationError(f'not an integer: {env!r}', source='environment',
                                  field=ENV_THREADS)
    return DEFAULT_THREADS


def get_cache_dir(cache_dir: str = '') -> str:
    """Global cache_dir overwrites the local preference."""
    if Settings.cache_dir != '':
        return Settings.cache_dir
    if cache_dir != '':
        return cache_dir
    return DEFAULT_CACHE_DIR


# %% Helpers

def _check_keys(data: dict, allowed, prefix: str):
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValidationError('expected a mapping', source='config', field=prefix or '<root>')
    for key in data:
        if key not in allowed:
            dotted = f'{prefix}.{key}' if prefix else str(key)
            raise ValidationError('unknown config key', source='config', field=dotted)
    return data


def _class_map(defaults: dict, given, prefix: str, cast=float) -> dict:
    out = dict(defaults)
    if given is None:
        return out
    if not isinstance(given, dict):
        raise ValidationError('expected a per-class mapping', source='config', field=prefix)
    for name, value in given.items():
        try:
            out[str(name)] = cast(value)
        except (TypeError, ValueError):
            raise ValidationError(f'bad value {value!r}', source='config',
                                  field=f'{prefix}.{name}')
    return out


def _to_plain(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _require(condition: bool, message: str, field_name: str):
    if not condition:
        raise ValidationError(message, source='config', field=field_name)


# %% Filter thresholds

@dataclass(frozen=True)
class ClassThreshold:
    max_truncation: float = 0.5
    max_occlusion: int = 1
    min_bbox_height: float = 25.0


@dataclass(frozen=True)
class FilterThresholds:
    """Per-class visibility and truncation thresholds.

    Defaults follow KITTI's Moderate cutoffs for every class.
    """
    per_class: dict = field(default_factory=lambda: {
        name: ClassThreshold() for name in DEFAULT_CLASSES})

    @classmethod
    def default(cls, classes=DEFAULT_CLASSES) -> 'FilterThresholds':
        return cls({name: ClassThreshold() for name in classes})

    def covers(self, classes) -> bool:
        return all(name in self.per_class for name in classes)

    @classmethod
    def from_dict(cls, data, classes=DEFAULT_CLASSES, prefix='filter') -> 'FilterThresholds':
        per_class = {name: ClassThreshold() for name in classes}
        if data is None:
            return cls(per_class)
        if not isinstance(data, dict):
            raise ValidationError('expected a mapping', source='config', field=prefix)
        allowed = {f.name for f in dataclasses.fields(ClassThreshold)}
        for name, values in data.items():
            key = f'{prefix}.{name}'
            values = _check_keys(values, allowed, key)
            base = dataclasses.asdict(per_class.get(str(name), ClassThreshold()))
            base.update(values)
            t = ClassThreshold(float(base['max_truncation']), int(base['max_occlusion']),
                               float(base['min_bbox_height']))
            _require(0.0 <= t.max_truncation <= 1.0, 'must be in [0, 1]',
                     f'{key}.max_truncation')
            _require(t.max_occlusion in (0, 1, 2, 3), 'must be one of 0, 1, 2, 3',
                     f'{key}.max_occlusion')
            per_class[str(name)] = t
        return cls(per_class)


# %% Bank

@dataclass(frozen=True)
class KMeansConfig:
    max_iters: int = 100
    restarts: int = 8
    tol: float = 1e-8


@dataclass(frozen=True)
class BankConfig:
    """Offline prior-bank construction settings.

    Attributes
    ----------
    classes : tuple[str]
        Ordered class list; defines the slice order of the bank.
    geometry_k, appearance_k : dict[str, int]
        Requested cluster counts for the geometry and appearance passes.
    min_support : int
        Prototypes with fewer members are merged into a retained one.
    eigenvalue_floor : float
        Lower clamp on log-space covariance eigenvalues.
    """
    classes: tuple = DEFAULT_CLASSES
    geometry_k: dict = field(default_factory=lambda: {
        'Car': 5, 'Pedestrian': 4, 'Cyclist': 4})
    appearance_k: dict = field(default_factory=lambda: {
        'Car': 3, 'Pedestrian': 4, 'Cyclist': 4})
    min_support: int = 20
    eigenvalue_floor: float = 1e-4
    eps: float = DEFAULT_EPS
    seed: int = DEFAULT_SEED
    kmeans: KMeansConfig = KMeansConfig()

    def __post_init__(self):
        for name in self.classes:
            _require(int(self.geometry_k.get(name, 1)) >= 1, 'must be >= 1',
                     f'bank.geometry_k.{name}')
            _require(int(self.appearance_k.get(name, 1)) >= 1, 'must be >= 1',
                     f'bank.appearance_k.{name}')
        _require(self.min_support >= 1, 'must be >= 1', 'bank.min_support')
        _require(self.eigenvalue_floor > 0.0, 'must be > 0', 'bank.eigenvalue_floor')
        _require(self.kmeans.restarts >= 1, 'must be >= 1', 'bank.kmeans.restarts')
        _require(self.kmeans.max_iters >= 1, 'must be >= 1', 'bank.kmeans.max_iters')

    def geometry_k_of(self, name: str) -> int:
        return int(self.geometry_k.get(name, 1))

    def appearance_k_of(self, name: str) -> int:
        return int(self.appearance_k.get(name, 1))

    @classmethod
    def from_dict(cls, data, classes=DEFAULT_CLASSES, prefix='bank',
                  default_seed=DEFAULT_SEED) -> 'BankConfig':
        data = _check_keys(data, {f.name for f in dataclasses.fields(cls)}, prefix)
        default = cls(classes=tuple(classes))
        kmeans = _check_keys(data.get('kmeans'), {f.name for f in dataclasses.fields(KMeansConfig)},
                             f'{prefix}.kmeans')
        return cls(
            classes=tuple(data.get('classes', classes)),
            geometry_k=_class_map(default.geometry_k, data.get('geometry_k'),
                                  f'{prefix}.geometry_k', int),
            appearance_k=_class_map(default.appearance_k, data.get('appearance_k'),
                                    f'{prefix}.appearance_k', int),
            min_support=int(data.get('min_support', default.min_support)),
            eigenvalue_floor=float(data.get('eigenvalue_floor', default.eigenvalue_floor)),
            eps=float(data.get('eps', default.eps)),
            seed=int(data.get('seed', default_seed)),
            kmeans=KMeansConfig(**{k: type(getattr(KMeansConfig(), k))(v)
                                   for k, v in kmeans.items()}),
        )


# %% Routing, conditioning, CAP

@dataclass(frozen=True)
class RoutingConfig:
    proj_dim: int = 256
    init_seed: int = 0

    @property
    def alpha(self) -> float:
        return 1.0 / float(self.proj_dim) ** 0.5

    @classmethod
    def from_dict(cls, data, prefix='routing') -> 'RoutingConfig':
        data = _check_keys(data, {f.name for f in dataclasses.fields(cls)}, prefix)
        out = cls(**{k: int(v) for k, v in data.items()})
        _require(out.proj_dim >= 1, 'must be >= 1', f'{prefix}.proj_dim')
        return out


@dataclass(frozen=True)
class ConditioningConfig:
    """Prior-strength settings: lambda_i = lambda0 * c_i * g_i."""
    lambda0: float = 0.5
    beta_cls: dict = field(default_factory=lambda: {name: 1.0 for name in DEFAULT_CLASSES})
    sigma_s: float = 0.5
    eps: EpsilonConfig = EpsilonConfig()

    def __post_init__(self):
        _require(self.lambda0 >= 0.0, 'must be >= 0', 'conditioning.lambda0')
        _require(self.sigma_s > 0.0, 'must be > 0', 'conditioning.sigma_s')
        for name, beta in self.beta_cls.items():
            _require(beta >= 0.0, 'must be >= 0', f'conditioning.beta_cls.{name}')

    def beta_vector(self, classes) -> list:
        return [float(self.beta_cls.get(name, 1.0)) for name in classes]

    @classmethod
    def from_dict(cls, data, classes=DEFAULT_CLASSES, prefix='conditioning') -> 'ConditioningConfig':
        data = _check_keys(data, {f.name for f in dataclasses.fields(cls)}, prefix)
        default = cls(beta_cls={name: 1.0 for name in classes})
        return cls(
            lambda0=float(data.get('lambda0', default.lambda0)),
            beta_cls=_class_map(default.beta_cls, data.get('beta_cls'), f'{prefix}.beta_cls'),
            sigma_s=float(data.get('sigma_s', default.sigma_s)),
            eps=EpsilonConfig(float(data.get('eps', default.eps.eps))),
        )


@dataclass(frozen=True)
class ScheduleConfig:
    e_hold: float = 0.5 * DEFAULT_TOY_EPOCHS
    e_end: float = 1.0 * DEFAULT_TOY_EPOCHS
    rho_end: float = 0.1


@dataclass(frozen=True)
class StagingConfig:
    e_detach_end: float = 0.3 * DEFAULT_TOY_EPOCHS
    e_blend_end: float = 0.6 * DEFAULT_TOY_EPOCHS


@dataclass(frozen=True)
class CapConfig:
    lambda_cap: float = 0.05
    w_cap: dict = field(default_factory=lambda: {name: 1.0 for name in DEFAULT_CLASSES})
    schedule: ScheduleConfig = ScheduleConfig()
    staging: StagingConfig = StagingConfig()

    def __post_init__(self):
        s, g = self.schedule, self.staging
        _require(self.lambda_cap >= 0.0, 'must be >= 0', 'cap.lambda_cap')
        _require(0.0 <= s.e_hold <= s.e_end, 'need 0 <= e_hold <= e_end', 'cap.schedule.e_hold')
        _require(0.0 <= s.rho_end <= 1.0, 'must be in [0, 1]', 'cap.schedule.rho_end')
        _require(0.0 <= g.e_detach_end <= g.e_blend_end, 'need e_detach_end <= e_blend_end',
                 'cap.staging.e_detach_end')

    @classmethod
    def for_epochs(cls, total_epochs: float, **kwargs) -> 'CapConfig':
        """Schedule breakpoints at fixed fractions of the training length."""
        return cls(schedule=ScheduleConfig(0.5 * total_epochs, float(total_epochs), 0.1),
                   staging=StagingConfig(0.3 * total_epochs, 0.6 * total_epochs),
                   **kwargs)

    def w_cap_vector(self, classes) -> list:
        return [float(self.w_cap.get(name, 1.0)) for name in classes]

    @classmethod
    def from_dict(cls, data, classes=DEFAULT_CLASSES, total_epochs=DEFAULT_TOY_EPOCHS,
                  prefix='cap') -> 'CapConfig':
        data = _check_keys(data, {f.name for f in dataclasses.fields(cls)}, prefix)
        default = cls.for_epochs(total_epochs, w_cap={name: 1.0 for name in classes})
        sched = _check_keys(data.get('schedule'), {f.name for f in dataclasses.fields(ScheduleConfig)},
                            f'{prefix}.schedule')
        stage = _check_keys(data.get('staging'), {f.name for f in dataclasses.fields(StagingConfig)},
                            f'{prefix}.staging')
        return cls(
            lambda_cap=float(data.get('lambda_cap', default.lambda_cap)),
            w_cap=_class_map(default.w_cap, data.get('w_cap'), f'{prefix}.w_cap'),
            schedule=dataclasses.replace(default.schedule, **{k: float(v) for k, v in sched.items()}),
            staging=dataclasses.replace(default.staging, **{k: float(v) for k, v in stage.items()}),
        )


# %% Toy harness

@dataclass(frozen=True)
class ModeSpec:
    """One log-normal size mode: median size (meters), log-space spread, weight."""
    mean: tuple
    spread: tuple
    weight: float = 1.0


def _default_modes() -> dict:
    return {
        'Car': (ModeSpec((1.50, 1.62, 3.80), (0.04, 0.04, 0.05), 0.6),
                ModeSpec((1.78, 1.80, 4.70), (0.04, 0.04, 0.05), 0.4)),
        'Pedestrian': (ModeSpec((1.72, 0.64, 0.86), (0.05, 0.06, 0.06), 0.6),
                       ModeSpec((1.30, 0.52, 0.68), (0.05, 0.06, 0.06), 0.4)),
        'Cyclist': (ModeSpec((1.72, 0.58, 1.74), (0.05, 0.06, 0.05), 0.6),
                    ModeSpec((1.84, 0.72, 1.96), (0.05, 0.06, 0.05), 0.4)),
    }


@dataclass(frozen=True)
class ToyConfig:
    """Synthetic ambiguity experiment.

    Attributes
    ----------
    modes : dict[str, tuple[ModeSpec]]
        Size modes per class; class order is the key order.
    evidence_noise : float
        Base query-evidence noise in log-size units, scaled by (1 + 4 mask).
    mask_levels : tuple[float]
        Evidence degradation levels standing in for occlusion strata.
    clamp_step : bool
        Cap the fixed gradient step at the stability bound of the head loss.
    """
    modes: dict = field(default_factory=_default_modes)
    feature_dim: int = 8
    query_dim: int = 16
    evidence_noise: float = 0.15
    feature_noise: float = 0.3
    mask_levels: tuple = (0.0, 0.4, 0.8)
    n_train: int = 600
    n_val: int = 600
    epochs: int = DEFAULT_TOY_EPOCHS
    learning_rate: float = 0.05
    label_smoothing: float = 0.05
    train_fraction: float = 1.0
    clamp_step: bool = True

    def __post_init__(self):
        _require(list(self.mask_levels) == sorted(self.mask_levels), 'must be sorted ascending',
                 'toy.mask_levels')
        _require(all(0.0 <= m <= 1.0 for m in self.mask_levels), 'must lie in [0, 1]',
                 'toy.mask_levels')
        _require(len(self.modes) >= 1, 'need at least one class', 'toy.modes')
        for name, modes in self.modes.items():
            _require(len(modes) >= 1, 'need at least one mode', f'toy.modes.{name}')
            for mode in modes:
                _require(all(s > 0.0 for s in mode.spread), 'spreads must be > 0',
                         f'toy.modes.{name}.spread')
                _require(all(m > 0.0 for m in mode.mean), 'means must be > 0',
                         f'toy.modes.{name}.mean')
                _require(mode.weight > 0.0, 'must be > 0', f'toy.modes.{name}.weight')
        _require(0.0 < self.train_fraction <= 1.0, 'must be in (0, 1]', 'toy.train_fraction')
        _require(self.query_dim >= 3, 'must be >= 3', 'toy.query_dim')
        _require(self.feature_dim >= 1, 'must be >= 1', 'toy.feature_dim')
        _require(self.epochs >= 1, 'must be >= 1', 'toy.epochs')

    @property
    def classes(self) -> tuple:
        return tuple(self.modes)

    @classmethod
    def from_dict(cls, data, prefix='toy') -> 'ToyConfig':
        names = {f.name for f in dataclasses.fields(cls)}
        data = dict(_check_keys(data, names, prefix))
        if 'modes' in data:
            modes = {}
            raw = data['modes']
            if not isinstance(raw, dict):
                raise ValidationError('expected a per-class mapping', source='config',
                                      field=f'{prefix}.modes')
            for name, items in raw.items():
                specs = []
                for i, item in enumerate(items):
                    key = f'{prefix}.modes.{name}[{i}]'
                    item = _check_keys(item, {'mean', 'spread', 'weight'}, key)
                    try:
                        specs.append(ModeSpec(tuple(float(v) for v in item['mean']),
                                              tuple(float(v) for v in item['spread']),
                                              float(item.get('weight', 1.0))))
                    except KeyError as exc:
                        raise ValidationError('missing field', source='config',
                                              field=f'{key}.{exc.args[0]}')
                modes[str(name)] = tuple(specs)
            data['modes'] = modes
        if 'mask_levels' in data:
            data['mask_levels'] = tuple(float(m) for m in data['mask_levels'])
        casts = {'feature_dim': int, 'query_dim': int, 'n_train': int, 'n_val': int,
                 'epochs': int, 'clamp_step': bool}
        for key, value in list(data.items()):
            if key in casts:
                data[key] = casts[key](value)
            elif key not in ('modes', 'mask_levels'):
                data[key] = float(value)
        return cls(**data)


# %% Gradient check

@dataclass(frozen=True)
class GradcheckConfig:
    trials: int = 100
    h: float = 1e-5
    tol: float = 1e-4
    kappas: tuple = (0.0, 0.5, 1.0)
    n_classes: int = 3
    protos_per_class: int = 2
    query_dim: int = 5
    feature_dim: int = 4
    proj_dim: int = 6
    batch: int = 2
    kink_margin: float = 1e-7
    seed: int = DEFAULT_SEED

    @classmethod
    def from_dict(cls, data, prefix='gradcheck', default_seed=DEFAULT_SEED) -> 'GradcheckConfig':
        data = dict(_check_keys(data, {f.name for f in dataclasses.fields(cls)}, prefix))
        data.setdefault('seed', default_seed)
        if 'kappas' in data:
            data['kappas'] = tuple(float(k) for k in data['kappas'])
        for key in ('trials', 'n_classes', 'protos_per_class', 'query_dim', 'feature_dim',
                    'proj_dim', 'batch', 'seed'):
            if key in data:
                data[key] = int(data[key])
        for key in ('h', 'tol', 'kink_margin'):
            if key in data:
                data[key] = float(data[key])
        return cls(**data)


# %% Run config

PRESETS = ('default', 'strong-prior')


@dataclass(frozen=True)
class RunConfig:
    """Merged view over every section of a config file."""
    seed: int = DEFAULT_SEED
    output_dir: str = 'out'
    threads: int = DEFAULT_THREADS
    preset: str = 'default'
    filter: FilterThresholds = field(default_factory=FilterThresholds)
    bank: BankConfig = field(default_factory=BankConfig)
    routing: RoutingConfig = RoutingConfig()
    conditioning: ConditioningConfig = field(default_factory=ConditioningConfig)
    cap: CapConfig = field(default_factory=CapConfig)
    toy: ToyConfig = field(default_factory=ToyConfig)
    gradcheck: GradcheckConfig = GradcheckConfig()

    @classmethod
    def from_dict(cls, data: dict) -> 'RunConfig':
        data = _check_keys(data or {}, {f.name for f in dataclasses.fields(cls)}, '')
        toy = ToyConfig.from_dict(data.get('toy'))
        bank_data = data.get('bank') or {}
        classes = tuple(bank_data.get('classes', DEFAULT_CLASSES)) if isinstance(
            bank_data, dict) else DEFAULT_CLASSES
        preset = str(data.get('preset', 'default'))
        _require(preset in PRESETS, f'must be one of {PRESETS}', 'preset')
        seed = int(data.get('seed', DEFAULT_SEED))
        out = cls(
            seed=seed,
            output_dir=str(data.get('output_dir', 'out')),
            threads=int(data.get('threads', DEFAULT_THREADS)),
            preset=preset,
            filter=FilterThresholds.from_dict(data.get('filter'), classes),
            bank=BankConfig.from_dict(bank_data, classes, default_seed=seed),
            routing=RoutingConfig.from_dict(data.get('routing')),
            conditioning=ConditioningConfig.from_dict(data.get('conditioning'), classes),
            cap=CapConfig.from_dict(data.get('cap'), classes, total_epochs=toy.epochs),
            toy=toy,
            gradcheck=GradcheckConfig.from_dict(data.get('gradcheck'), default_seed=seed),
        )
        if preset == 'strong-prior':
            out = apply_strong_prior(out)
        return out

    def to_dict(self) -> dict:
        return _to_plain(self)

    def config_hash(self) -> str:
        return config_hash(self)


def config_hash(obj) -> str:
    """sha256 of the canonical JSON form of a config dataclass."""
    text = json.dumps(_to_plain(obj), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def apply_strong_prior(cfg: RunConfig) -> RunConfig:
    """Low-data variant: double lambda0 and the CAP weight."""
    cond = dataclasses.replace(cfg.conditioning, lambda0=2.0 * cfg.conditioning.lambda0)
    cap = dataclasses.replace(cfg.cap, lambda_cap=2.0 * cfg.cap.lambda_cap)
    return dataclasses.replace(cfg, conditioning=cond, cap=cap, preset='strong-prior')


def parse_override(text: str) -> tuple:
    """Split ``a.b.c=value`` into (['a','b','c'], value parsed as YAML)."""
    if '=' not in text:
        raise ValidationError(f'expected key=value, got {text!r}', source='--set')
    key, raw = text.split('=', 1)
    path = [p for p in key.strip().split('.') if p]
    if not path:
        raise ValidationError(f'empty key in {text!r}', source='--set')
    return path, yaml.safe_load(raw)


def apply_overrides(data: dict, overrides) -> dict:
    data = copy.deepcopy(data or {})
    for text in overrides or ():
        path, value = parse_override(text)
        node = data
        for part in path[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ValidationError('cannot set a key below a scalar', source='--set',
                                      field='.'.join(path))
            node = child
        node[path[-1]] = value
    return data


def load_run_config(path: Union[str, None] = None, overrides=()) -> RunConfig:
    """Read a YAML config file (or defaults when path is None) into RunConfig."""
    data = {}
    if path:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = yaml.safe_load(f) or {}
        except OSError as exc:
            raise ValidationError(str(exc), source=str(path))
        except yaml.YAMLError as exc:
            raise ValidationError(f'invalid YAML: {exc}', source=str(path))
    data = apply_overrides(data, overrides)
    logger.debug('Loading run config from %s with %d overrides', path, len(overrides or ()))
    return RunConfig.from_dict(data)


CONFIG_KEYS_HELP = """\
Config file keys (YAML, nested; --set uses dotted paths):
  seed, output_dir, threads, preset (default | strong-prior)
  filter.<class>.max_truncation | max_occlusion | min_bbox_height
  bank.classes, bank.geometry_k.<class>, bank.appearance_k.<class>,
  bank.min_support, bank.eigenvalue_floor, bank.eps, bank.seed,
  bank.kmeans.max_iters | restarts | tol
  routing.proj_dim, routing.init_seed
  conditioning.lambda0, conditioning.beta_cls.<class>, conditioning.sigma_s,
  conditioning.eps
  cap.lambda_cap, cap.w_cap.<class>, cap.schedule.e_hold | e_end | rho_end,
  cap.staging.e_detach_end | e_blend_end
  toy.modes.<class>: list of {mean: [h,w,l], spread: [sh,sw,sl], weight},
  toy.feature_dim, toy.query_dim, toy.evidence_noise, toy.feature_noise,
  toy.mask_levels, toy.n_train, toy.n_val, toy.epochs, toy.learning_rate,
  toy.label_smoothing, toy.train_fraction, toy.clamp_step
  gradcheck.trials | h | tol | kappas | n_classes | protos_per_class |
  query_dim | feature_dim | proj_dim | batch | kink_margin | seed
bank.seed and gradcheck.seed default to the top-level seed.
Environment: PRIO_SEED overrides every config seed (flag > env > config);
PRIO_THREADS caps worker threads.
"""
