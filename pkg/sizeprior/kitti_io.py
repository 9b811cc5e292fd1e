# -*- coding: utf-8 -*-
"""
KITTI label ingestion, class-aware filtering and precomputed feature files.

Label lines follow the public KITTI object format::

    type truncated occluded alpha left top right bottom h w l x y z rotation_y [score]

Feature files (PRIOFEAT) are little-endian::

    b'PRIOFEAT' | u32 version=1 | u32 dim | u64 count
    count x [u64 instance_key][dim x f32]

Query files reuse the layout with version 2, an extra ``u32 n_classes`` after
``count`` and a trailing ``n_classes x f32`` class-probability block per record.
"""
import logging
import struct
from collections import Counter
from dataclasses import dataclass
from os.path import basename, splitext
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from sizeprior.config import FilterThresholds
from sizeprior.errors import FormatError, ValidationError
from sizeprior.size_space import SizeTriple

logger = logging.getLogger(__name__)

MAGIC = b'PRIOFEAT'
FEATURE_VERSION = 1
QUERY_VERSION = 2
_HEADER = struct.Struct('<8sIIQ')
_QUERY_EXTRA = struct.Struct('<I')
MIN_FIELDS = 15
DONT_CARE = 'DontCare'
LINES_PER_FILE = 1000
_COLUMNS = ('type', 'truncated', 'occluded', 'alpha', 'left', 'top', 'right', 'bottom',
            'h', 'w', 'l', 'x', 'y', 'z', 'rotation_y')


@dataclass(frozen=True)
class LabelInstance:
    """One labelled object from a KITTI label file."""
    class_name: str
    truncation: float
    occlusion: int
    alpha: float
    bbox2d: tuple
    size: SizeTriple
    location: tuple
    rotation_y: float
    instance_key: int

    def __post_init__(self):
        left, top, right, bottom = self.bbox2d
        if not right > left:
            raise ValidationError('bbox right must exceed left', field='bbox2d')
        if not bottom > top:
            raise ValidationError('bbox bottom must exceed top', field='bbox2d')
        if not 0.0 <= self.truncation <= 1.0:
            raise ValidationError(f'truncation out of [0, 1]: {self.truncation}',
                                  field='truncated')
        if self.occlusion not in (0, 1, 2, 3):
            raise ValidationError(f'occlusion code not in 0..3: {self.occlusion}',
                                  field='occluded')

    @property
    def bbox_height(self) -> float:
        return self.bbox2d[3] - self.bbox2d[1]


@dataclass(frozen=True)
class FeatureTable:
    """Precomputed per-instance feature vectors keyed by instance_key."""
    dim: int
    rows: dict

    def __post_init__(self):
        if self.dim < 1:
            raise ValidationError(f'dim must be positive, got {self.dim}', field='dim')
        for key, vec in self.rows.items():
            if len(vec) != self.dim:
                raise ValidationError(f'vector length {len(vec)} != dim {self.dim}',
                                      field=str(key))
            if not np.all(np.isfinite(vec)):
                raise ValidationError('non-finite feature entry', field=str(key))

    def __len__(self):
        return len(self.rows)

    def __contains__(self, key):
        return key in self.rows

    def get(self, key: int) -> np.ndarray:
        return self.rows[key]


# %% Labels

def instance_key(file_id: int, line_index: int) -> int:
    if not 0 <= int(line_index) < LINES_PER_FILE:
        raise ValidationError(f'line index {line_index} outside 0..{LINES_PER_FILE - 1}; '
                              'instance keys would collide', field='line_index')
    return int(file_id) * LINES_PER_FILE + int(line_index)


def _parse_float(token: str, source: str, line_no: int, column: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise ValidationError(f'malformed numeric field {token!r}', source=source,
                              field=f'line {line_no}, column {column + 1} ({_COLUMNS[column]})')


def parse_label_file(text: Union[str, bytes], file_id: int = 0,
                     source: str = '<labels>') -> list:
    """Parse a KITTI label file into LabelInstance records.

    Parameters
    ----------
    text : str or bytes
        File content.
    file_id : int
        Numeric id of the file; instance keys are ``file_id * 1000 + line``.
    source : str
        Name used in error messages.

    Returns
    -------
    list[LabelInstance]
        One record per non-DontCare line, in file order.

    Raises
    ------
    ValidationError
        Invalid UTF-8, more than 1000 lines, fewer than 15 fields or a
        malformed numeric field (message names file, line and column).
    """
    if isinstance(text, bytes):
        try:
            text = text.decode('utf-8')
        except UnicodeDecodeError as exc:
            raise ValidationError(f'not valid UTF-8 at byte {exc.start}', source=source)
    out = []
    for line_index, line in enumerate(text.splitlines()):
        tokens = line.split()
        if not tokens:
            continue
        line_no = line_index + 1
        if len(tokens) < MIN_FIELDS:
            raise ValidationError(f'expected >= {MIN_FIELDS} fields, got {len(tokens)}',
                                  source=source, field=f'line {line_no}')
        if tokens[0] == DONT_CARE:
            continue
        values = [_parse_float(tokens[c], source, line_no, c) for c in range(1, MIN_FIELDS)]
        occlusion = values[1]
        if occlusion != int(occlusion):
            raise ValidationError(f'occlusion must be an integer code, got {tokens[2]!r}',
                                  source=source, field=f'line {line_no}, column 3 (occluded)')
        try:
            out.append(LabelInstance(
                class_name=tokens[0],
                truncation=values[0],
                occlusion=int(occlusion),
                alpha=values[2],
                bbox2d=tuple(values[3:7]),
                size=SizeTriple(values[7], values[8], values[9]),
                location=tuple(values[10:13]),
                rotation_y=values[13],
                instance_key=instance_key(file_id, line_index),
            ))
        except ValidationError as exc:
            raise ValidationError(str(exc), source=source, field=f'line {line_no}')
    logger.debug('Parsed %d instances from %s', len(out), source)
    return out


def _fmt(value: float) -> str:
    return f'{value:.2f}'


def serialize_label(inst: LabelInstance) -> str:
    """Render one record as a KITTI label line (two-decimal fields)."""
    fields = [inst.class_name, _fmt(inst.truncation), str(inst.occlusion), _fmt(inst.alpha)]
    fields += [_fmt(v) for v in inst.bbox2d]
    fields += [_fmt(v) for v in inst.size]
    fields += [_fmt(v) for v in inst.location]
    fields.append(_fmt(inst.rotation_y))
    return ' '.join(fields)


def _file_id(path: Path, position: int) -> int:
    stem = splitext(basename(str(path)))[0]
    return int(stem) if stem.isdigit() else position


def load_label_dir(path: Union[str, Path]) -> list:
    """Parse every ``*.txt`` in a directory, sorted by name."""
    path = Path(path)
    if not path.is_dir():
        raise ValidationError('not a directory', source=str(path))
    out = []
    for position, file in enumerate(sorted(path.glob('*.txt'))):
        out.extend(parse_label_file(file.read_bytes(), _file_id(file, position), str(file)))
    logger.info('Loaded %d labelled instances from %s', len(out), path)
    return out


def keep_instance(inst: LabelInstance, thresholds: FilterThresholds) -> bool:
    t = thresholds.per_class.get(inst.class_name)
    if t is None:
        return False
    return (inst.truncation <= t.max_truncation
            and inst.occlusion <= t.max_occlusion
            and inst.bbox_height >= t.min_bbox_height)


def filter_instances(instances: Sequence[LabelInstance],
                     thresholds: FilterThresholds) -> list:
    """Keep sufficiently visible, non-severely truncated instances per class.

    Unknown class names are dropped and counted with a warning.
    """
    unknown = Counter()
    kept = []
    for inst in instances:
        if inst.class_name not in thresholds.per_class:
            unknown[inst.class_name] += 1
            continue
        if keep_instance(inst, thresholds):
            kept.append(inst)
    if unknown:
        logger.warning('Dropped instances of unknown classes: %s',
                       ', '.join(f'{k}={v}' for k, v in sorted(unknown.items())))
    logger.debug('Kept %d of %d instances', len(kept), len(instances))
    return kept


# %% Binary feature and query files

def _record_dtype(dim: int, n_classes: int = 0) -> np.dtype:
    fields = [('key', '<u8'), ('vec', '<f4', (dim,))]
    if n_classes:
        fields.append(('prob', '<f4', (n_classes,)))
    return np.dtype(fields)


def _read_header(data: bytes, version: int, source: str) -> tuple:
    if len(data) < _HEADER.size:
        raise FormatError('truncated header', source=source)
    magic, file_version, dim, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f'bad magic {magic!r}', source=source)
    if file_version != version:
        raise FormatError(f'version {file_version} != expected {version}', source=source)
    return dim, count, _HEADER.size


def _read_records(data: bytes, offset: int, dtype: np.dtype, count: int,
                  source: str) -> np.ndarray:
    need = offset + dtype.itemsize * count
    if len(data) < need:
        raise FormatError(f'truncated stream: need {need} bytes, have {len(data)}',
                          source=source)
    if len(data) > need:
        raise FormatError(f'{len(data) - need} trailing bytes', source=source)
    return np.frombuffer(data, dtype=dtype, count=count, offset=offset)


def load_feature_file(data: bytes, source: str = '<features>') -> FeatureTable:
    """Decode a PRIOFEAT version 1 stream.

    Raises
    ------
    FormatError
        Bad magic, version mismatch, truncated stream or duplicate key.
    """
    dim, count, offset = _read_header(data, FEATURE_VERSION, source)
    if dim < 1:
        raise FormatError('dim must be positive', source=source, field='dim')
    records = _read_records(data, offset, _record_dtype(dim), count, source)
    rows = {}
    for rec in records:
        key = int(rec['key'])
        if key in rows:
            raise FormatError('duplicate instance_key', source=source, field=str(key))
        rows[key] = rec['vec'].astype(np.float64)
    return FeatureTable(dim, rows)


def write_feature_file(table: FeatureTable) -> bytes:
    keys = sorted(table.rows)
    records = np.zeros(len(keys), dtype=_record_dtype(table.dim))
    for i, key in enumerate(keys):
        records[i]['key'] = key
        records[i]['vec'] = table.rows[key]
    return _HEADER.pack(MAGIC, FEATURE_VERSION, table.dim, len(keys)) + records.tobytes()


def load_query_file(data: bytes, source: str = '<queries>') -> tuple:
    """Decode a PRIOFEAT version 2 query stream.

    Returns
    -------
    keys : np.ndarray[uint64], queries : (N, dim) float64, probs : (N, C) float64
    """
    dim, count, offset = _read_header(data, QUERY_VERSION, source)
    if len(data) < offset + _QUERY_EXTRA.size:
        raise FormatError('truncated header', source=source)
    (n_classes,) = _QUERY_EXTRA.unpack_from(data, offset)
    offset += _QUERY_EXTRA.size
    if n_classes < 1:
        raise FormatError('n_classes must be positive', source=source, field='n_classes')
    records = _read_records(data, offset, _record_dtype(dim, n_classes), count, source)
    if len(set(records['key'].tolist())) != count:
        raise FormatError('duplicate instance_key', source=source)
    return (records['key'].astype(np.uint64), records['vec'].astype(np.float64),
            records['prob'].astype(np.float64))


def write_query_file(keys, queries, probs) -> bytes:
    queries = np.asarray(queries, dtype=float)
    probs = np.asarray(probs, dtype=float)
    n, dim = queries.shape
    n_classes = probs.shape[1]
    records = np.zeros(n, dtype=_record_dtype(dim, n_classes))
    records['key'] = np.asarray(keys, dtype=np.uint64)
    records['vec'] = queries
    records['prob'] = probs
    header = _HEADER.pack(MAGIC, QUERY_VERSION, dim, n) + _QUERY_EXTRA.pack(n_classes)
    return header + records.tobytes()
