# -*- coding: utf-8 -*-
import logging
from pathlib import Path

import pytest

from sizeprior.config import Settings
from sizeprior.kitti_io import FeatureTable, load_label_dir
from tests.helpers import feature_table_for

logging.basicConfig()
logging.getLogger('sizeprior').setLevel(logging.DEBUG)

DATA_DIR = Path(__file__).parent / 'data'


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False,
                     help='run multi-seed toy suites')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def reset_settings():
    """Settings are process globals; put them back after every test."""
    saved = dict(seed=Settings.seed, threads=Settings.threads,
                 cache_dir=Settings.cache_dir, disable_cache=Settings.disable_cache)
    yield
    for name, value in saved.items():
        setattr(Settings, name, value)


@pytest.fixture
def label_dir() -> Path:
    return DATA_DIR / 'label_2'


@pytest.fixture
def pairs_path() -> Path:
    return DATA_DIR / 'pairs_small.tsv'


@pytest.fixture
def labels(label_dir):
    return load_label_dir(label_dir)


@pytest.fixture
def features(labels) -> FeatureTable:
    return feature_table_for(labels)
