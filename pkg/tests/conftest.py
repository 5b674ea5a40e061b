"""Shared fixtures: the tiny exact ensembles most test modules lean on."""

import numpy as np
import pytest

from homlab import EnsembleSpec, LatticeGrid, enumerate_exact


def two_valued(lo=0.9, hi=1.1, p=0.5, block=1, seed=0):
    """Two-point scalar law; the workhorse of the exact-enumeration tests."""
    model = "iid" if block == 1 else "block"
    return EnsembleSpec(model, values=(lo, hi), weights=(p, 1.0 - p),
                        block=block, seed=seed)


@pytest.fixture(scope="session")
def exact_d1():
    """All 16 configurations of the {0.9, 1.1} law on 4 sites, d=1."""
    return enumerate_exact(two_valued(), LatticeGrid((4,)))


@pytest.fixture(scope="session")
def exact_d2():
    """All 16 configurations of the {0.9, 1.1} law on a 2x2 torus."""
    return enumerate_exact(two_valued(), LatticeGrid((2, 2)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240517)
