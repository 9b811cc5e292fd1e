# -*- coding: utf-8 -*-
import logging
import struct

import numpy as np
import pytest

from sizeprior.config import ClassThreshold, FilterThresholds
from sizeprior.errors import FormatError, ValidationError
from sizeprior.kitti_io import (
    MAGIC, FeatureTable, filter_instances, instance_key, load_feature_file, load_query_file,
    parse_label_file, serialize_label, write_feature_file, write_query_file)

CAR_LINE = ('Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 '
            '-0.65 1.71 46.70 -1.59')


def test_load_label_dir(labels):
    assert len(labels) == 20
    assert all(inst.class_name != 'DontCare' for inst in labels)
    first = labels[0]
    assert first.class_name == 'Car'
    assert first.instance_key == 0
    assert tuple(first.size) == (1.65, 1.67, 3.64)
    # line indices count DontCare lines too
    keys = [inst.instance_key for inst in labels]
    assert 5 in keys and 4 not in keys
    assert instance_key(1, 0) in keys
    assert instance_key(2, 7) == 2007 and 2007 in keys


def test_filter_default_thresholds(labels, caplog):
    with caplog.at_level(logging.WARNING, logger='sizeprior.kitti_io'):
        kept = filter_instances(labels, FilterThresholds())
    counts = {}
    for inst in kept:
        counts[inst.class_name] = counts.get(inst.class_name, 0) + 1
    assert counts == {'Car': 7, 'Pedestrian': 5, 'Cyclist': 4}
    # a short box and a heavily truncated car are gone
    assert instance_key(0, 1) not in {inst.instance_key for inst in kept}
    assert instance_key(1, 2) not in {inst.instance_key for inst in kept}
    assert 'Misc=1' in caplog.text and 'Van=1' in caplog.text


def test_filter_per_class_thresholds(labels):
    strict = FilterThresholds({'Car': ClassThreshold(max_occlusion=0),
                               'Pedestrian': ClassThreshold(min_bbox_height=90.0)})
    kept = filter_instances(labels, strict)
    assert {inst.class_name for inst in kept} == {'Car', 'Pedestrian'}
    assert all(inst.occlusion == 0 for inst in kept if inst.class_name == 'Car')
    assert all(inst.bbox_height >= 90.0 for inst in kept if inst.class_name == 'Pedestrian')


def test_parse_bytes_and_serialize():
    insts = parse_label_file(CAR_LINE.encode('utf-8') + b'\n', file_id=12)
    assert len(insts) == 1
    assert insts[0].instance_key == 12000
    assert serialize_label(insts[0]) == CAR_LINE


def test_malformed_numeric_field_names_position():
    text = CAR_LINE + '\n' + CAR_LINE.replace('-1.58', 'abc')
    try:
        parse_label_file(text, source='000009.txt')
    except ValidationError as exc:
        msg = str(exc)
        assert '000009.txt' in msg
        assert 'line 2' in msg
        assert 'column 4 (alpha)' in msg
    else:
        assert False


def test_short_line_rejected():
    with pytest.raises(ValidationError, match='line 1'):
        parse_label_file('Car 0.00 0 -1.58 587.01\n')


def test_invalid_box_rejected():
    line = CAR_LINE.replace('614.12', '500.00')
    with pytest.raises(ValidationError, match='bbox'):
        parse_label_file(line)


def test_invalid_utf8_names_source():
    try:
        parse_label_file(b'\xff' + CAR_LINE.encode('utf-8'), source='bad.txt')
    except ValidationError as exc:
        assert 'bad.txt' in str(exc)
        assert 'UTF-8' in str(exc)
    else:
        assert False


DONT_CARE_LINE = 'DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10'


def test_line_index_limit():
    last = parse_label_file('\n'.join([DONT_CARE_LINE] * 999 + [CAR_LINE]), file_id=4)
    assert last[0].instance_key == 4999
    with pytest.raises(ValidationError, match='line 1001'):
        parse_label_file('\n'.join([DONT_CARE_LINE] * 1000 + [CAR_LINE]), file_id=4)
    with pytest.raises(ValidationError, match='collide'):
        instance_key(0, 1000)


def test_feature_file_round_trip(labels, features):
    data = write_feature_file(features)
    table = load_feature_file(data)
    assert table.dim == features.dim
    assert sorted(table.rows) == sorted(features.rows)
    for key, vec in features.rows.items():
        assert np.allclose(table.get(key), vec, rtol=1e-6, atol=1e-7)


def _header(version=1, dim=2, count=1, magic=MAGIC):
    return struct.pack('<8sIIQ', magic, version, dim, count)


def _record(key, vec):
    return struct.pack('<Q', key) + np.asarray(vec, dtype='<f4').tobytes()


def test_feature_file_errors():
    good = _header(count=2) + _record(1, [0.5, 1.0]) + _record(2, [1.0, 0.0])
    assert len(load_feature_file(good)) == 2

    with pytest.raises(FormatError, match='magic'):
        load_feature_file(_header(magic=b'NOTFEATS') + _record(1, [0.0, 1.0]))
    with pytest.raises(FormatError, match='version'):
        load_feature_file(_header(version=3) + _record(1, [0.0, 1.0]))
    with pytest.raises(FormatError, match='truncated'):
        load_feature_file(good[:-4])
    with pytest.raises(FormatError, match='trailing'):
        load_feature_file(good + b'\x00')
    with pytest.raises(FormatError, match='truncated header'):
        load_feature_file(MAGIC)
    with pytest.raises(FormatError, match='duplicate'):
        load_feature_file(_header(count=2) + _record(7, [0.5, 1.0]) + _record(7, [1.0, 0.0]))


def test_feature_table_validation():
    with pytest.raises(ValidationError):
        FeatureTable(2, {1: np.array([1.0, 2.0, 3.0])})
    with pytest.raises(ValidationError):
        FeatureTable(2, {1: np.array([1.0, np.nan])})


def test_query_file_round_trip():
    keys = np.array([3, 1, 2], dtype=np.uint64)
    Q = np.arange(12, dtype=float).reshape(3, 4) / 8.0
    P = np.array([[1.0, 0.0, 0.0], [0.25, 0.5, 0.25], [0.0, 0.0, 1.0]])
    data = write_query_file(keys, Q, P)
    k2, Q2, P2 = load_query_file(data)
    assert k2.tolist() == [3, 1, 2]
    assert np.array_equal(Q2, Q)
    assert np.array_equal(P2, P)
    # a query stream is not a feature stream
    with pytest.raises(FormatError, match='version'):
        load_feature_file(data)
