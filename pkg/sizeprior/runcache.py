# -*- coding: utf-8 -*-
"""
Memoisation of expensive deterministic run results.

Results live in a size-limited in-memory dict. With ``write=True`` they are
also persisted to a shelve file under the cache directory, and with
``read=True`` a later process can pick them up again. Setting
`Settings.cache_dir` turns on both for every cache. Keys must be strings
that fully determine the result (mode, seed, config hash, ...).
"""
import logging
import os
import shelve
import threading
from collections import OrderedDict
from glob import glob
from os.path import join
from typing import Any, Callable

from sizeprior.config import Settings, get_cache_dir

logger = logging.getLogger(__name__)

DEFAULT_SIZE_LIMIT = 256


class LimitDict(OrderedDict):
    """Dictionary with limited size; the oldest entries are evicted first.

    Attributes
    ----------
    size_limit : int or None
        Max length of dict. None for unlimited.
    """
    def __init__(self, *args, _size_limit: int = None, **kwargs):
        self.size_limit = _size_limit
        super().__init__(*args, **kwargs)
        self._check_size_limit()

    def __setitem__(self, key, value):
        super().__setitem__(key, value)
        self._check_size_limit()

    def _check_size_limit(self):
        if self.size_limit is not None:
            while len(self) > self.size_limit:
                self.popitem(last=False)


class RunCache:
    """Keyed result cache with optional shelve persistence.

    Parameters
    ----------
    name : str
        Shelve file name inside the cache directory.
    size_limit : int or None
        In-memory entry limit.
    write : bool
        Write new results to the shelve.
    read : bool
        Look results up in the shelve before computing.
    cache_dir : str
        Local preference for the cache directory; `Settings.cache_dir` wins.
    """
    def __init__(self, name: str, size_limit: int = DEFAULT_SIZE_LIMIT,
                 write: bool = False, read: bool = False, cache_dir: str = ''):
        self.name = name
        self.write = write
        self.read = read
        self.cache_dir = cache_dir
        self.results = LimitDict(_size_limit=size_limit)
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def __repr__(self):
        return f'RunCache({self.name!r}, entries={len(self.results)})'

    def __contains__(self, key: str) -> bool:
        return key in self.results

    @property
    def shelve_path(self) -> str:
        return join(get_cache_dir(self.cache_dir), self.name)

    @property
    def reads(self) -> bool:
        return self.read or Settings.cache_dir != ''

    @property
    def writes(self) -> bool:
        return self.write or Settings.cache_dir != ''

    def _shelve_init(self):
        os.makedirs(get_cache_dir(self.cache_dir), exist_ok=True)

    def _is_shelved(self, key: str) -> bool:
        if not glob(self.shelve_path + '*'):
            return False
        with shelve.open(self.shelve_path, 'r') as db:
            return key in db

    def _shelve_read(self, key: str) -> Any:
        with shelve.open(self.shelve_path, 'r') as db:
            return db[key]

    def _shelve_save(self, key: str, value: Any):
        self._shelve_init()
        with shelve.open(self.shelve_path) as db:
            db[key] = value

    def get_or_compute(self, key: str, fn: Callable[[], Any]) -> Any:
        """Return the cached result for ``key``, computing it with ``fn()`` if absent."""
        if Settings.disable_cache:
            return fn()
        with self._lock:
            if key in self.results:
                self.hits += 1
                logger.debug('Cache hit %s in %s', key, self.name)
                return self.results[key]
            if self.reads and self._is_shelved(key):
                value = self._shelve_read(key)
                self.results[key] = value
                self.hits += 1
                logger.debug('Read key=%s from shelve for %s', key, self.name)
                return value
        self.misses += 1
        logger.debug('key=%s not cached; computing for %s', key, self.name)
        value = fn()
        with self._lock:
            self.results[key] = value
            if self.writes:
                self._shelve_save(key, value)
        return value

    def reset(self):
        """Drop in-memory results."""
        with self._lock:
            self.results.clear()
            self.hits = self.misses = 0

    def save(self):
        """Write every in-memory result to the shelve."""
        with self._lock:
            for key, value in self.results.items():
                self._shelve_save(key, value)
                logger.debug('Saving to shelve for %s, %s', key, self.name)

    def delete_shelve(self):
        """Delete the persistent shelve files."""
        for path in glob(self.shelve_path + '*'):
            os.remove(path)
            logger.info('Deleted %s', path)
