"""Deterministic plumbing: reductions, hashing, seed substreams."""

import numpy as np
import pytest

from homlab.util import (canonical_json, compensated_sum, config_hash,
                         fmt_float, pmap, substream)


def test_compensated_sum_order_insensitive():
    rng = np.random.default_rng(3)
    vals = list(rng.standard_normal(500) * 10.0 ** rng.integers(-8, 9, 500))
    shuffled = list(vals)
    rng.shuffle(shuffled)
    assert compensated_sum(vals) == compensated_sum(shuffled)


def test_compensated_sum_survives_cancellation():
    assert compensated_sum([1e16, 1.0, -1e16]) == 1.0


def test_pmap_matches_serial_and_preserves_order():
    items = list(range(37))
    serial = pmap(lambda x: x * x - 1, items, workers=1)
    threaded = pmap(lambda x: x * x - 1, items, workers=5)
    assert serial == [x * x - 1 for x in items]
    assert threaded == serial


def test_pmap_single_item():
    assert pmap(lambda x: -x, [4], workers=8) == [-4]


def test_canonical_json_sorted_compact():
    assert canonical_json({"b": 1, "a": [2, {"z": 3}]}) == '{"a":[2,{"z":3}],"b":1}'


def test_canonical_json_rejects_nan():
    with pytest.raises(ValueError):
        canonical_json({"x": float("nan")})


def test_config_hash_key_order_insensitive():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_config_hash_frozen():
    # hashes name output rows and directories; changing the scheme is an
    # interface break, so pin one value
    assert config_hash({}) == "44136fa355b3678a"


def test_fmt_float_round_trips():
    rng = np.random.default_rng(0)
    xs = rng.standard_normal(200) * 10.0 ** rng.integers(-250, 250, 200)
    for x in xs:
        assert float(fmt_float(x)) == x
    assert fmt_float(1.0) == "1"


def test_substream_reproducible_and_keyed():
    a = substream(7, 1, 2).standard_normal(8)
    b = substream(7, 1, 2).standard_normal(8)
    c = substream(7, 2, 1).standard_normal(8)
    d = substream(8, 1, 2).standard_normal(8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)
