"""Shared helpers: deterministic reductions, config hashing, seeded substreams."""

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np


def compensated_sum(values):
    """Order-insensitive float reduction (exact rounding via math.fsum).

    Used at merge points where work may have been split across workers, so
    that the worker count never changes the emitted numbers.
    """
    return math.fsum(float(v) for v in values)


def pmap(fn, items, workers=1):
    """Map preserving input order, optionally on a thread pool.

    numpy releases the GIL in transforms and solves, which is where the
    time goes, so threads are enough here.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(obj):
    """Stable short hash of a JSON-serializable config."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def substream(seed, *key):
    """Independent generator for (seed, key...), reproducible across platforms."""
    return np.random.default_rng(np.random.SeedSequence((int(seed),) + tuple(int(k) for k in key)))


def fmt_float(x):
    """17 significant digits, enough to round-trip a float64 exactly."""
    return format(float(x), ".17g")
