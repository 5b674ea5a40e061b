"""Torus geometry: min-image maps, coarse cells, cube selections."""

import numpy as np
import pytest

from homlab import LatticeGrid
from homlab.errors import ConfigError


def test_dimension_and_side_guards():
    for bad in [(), (2, 2, 2, 2)]:
        with pytest.raises(ConfigError):
            LatticeGrid(bad)
    with pytest.raises(ConfigError):
        LatticeGrid((0,))
    with pytest.raises(ConfigError):
        LatticeGrid((6,), coarse=4)
    with pytest.raises(ConfigError):
        LatticeGrid((6,), coarse=0)


def test_counts():
    g = LatticeGrid((8, 4), coarse=2)
    assert g.ndim == 2
    assert g.nsites == 32
    assert g.ncells == 8
    counts = np.bincount(g.cell_labels, minlength=g.ncells)
    assert (counts == 4).all()


def test_refined_and_with_coarse():
    g = LatticeGrid((4, 6), coarse=2)
    r = g.refined(3)
    assert r.shape == (12, 18) and r.coarse == 2
    assert g.with_coarse(1).coarse == 1
    with pytest.raises(ConfigError):
        g.with_coarse(4)  # 6 % 4 != 0


def test_min_image_range():
    g = LatticeGrid((8, 6))
    m = g.min_image(g.sites)
    assert m[0].min() == -4 and m[0].max() == 3
    assert m[1].min() == -3 and m[1].max() == 2
    # identity modulo the torus
    assert np.array_equal(np.mod(m, np.array([8, 6])[:, None, None]), g.sites)


def test_offsets_and_radii_d1():
    g = LatticeGrid((4,))
    assert g.offsets[0].tolist() == [0, 1, -2, -1]
    assert np.allclose(g.radius, [0.0, 1.0, 2.0, 1.0])
    assert g.radius_inf.tolist() == [0, 1, 2, 1]


def test_torus_dist_inf_wraps():
    g = LatticeGrid((10, 10))
    assert g.torus_dist_inf([0, 0], [9, 1]) == 1
    assert g.torus_dist_inf([0, 0], [5, 0]) == 5
    assert g.torus_dist_inf([2, 3], [2, 3]) == 0


def _nearest_multiple(x, step):
    # covering-space rule: nearest multiple of step, tie toward the smaller
    q, r = divmod(x, step)
    return q * step if 2 * r <= step else (q + 1) * step


def test_coarse_site_matches_covering_space_rule():
    g = LatticeGrid((12, 8), coarse=4)
    for x0 in range(12):
        for x1 in range(8):
            z = g.coarse_site(np.array([x0, x1]))
            assert z[0] == _nearest_multiple(x0, 4) % 12
            assert z[1] == _nearest_multiple(x1, 4) % 8


def test_coarse_site_tie_breaks_toward_smaller():
    g = LatticeGrid((8,), coarse=4)
    assert g.coarse_site(np.array([2]))[0] == 0  # tie between 0 and 4
    assert g.coarse_site(np.array([6]))[0] == 4  # tie between 4 and 8
    assert g.coarse_site(np.array([3]))[0] == 4
    assert g.coarse_site(np.array([7]))[0] == 0  # 8 wraps to 0


def test_coarse_site_is_nearest_in_max_norm():
    g = LatticeGrid((12, 12), coarse=3)
    subl = np.array([(i, j) for i in range(0, 12, 3) for j in range(0, 12, 3)])
    for x0 in range(12):
        for x1 in range(12):
            z = g.coarse_site(np.array([x0, x1]))
            dist = g.torus_dist_inf(np.array([x0, x1]), z, axis=0)
            best = min(g.torus_dist_inf(np.array([x0, x1]), s, axis=0) for s in subl)
            assert dist == best


def test_cube_slices_is_the_cell_of_its_center():
    g = LatticeGrid((8, 8), coarse=4)
    for center in [(4, 0), (0, 4), (4, 4)]:
        sel = g.cube_slices(center)
        cube = set(zip(*(idx.tolist() for idx in sel)))
        member = {tuple(p) for p in np.argwhere(
            (g.coarse_sites[0] == center[0]) & (g.coarse_sites[1] == center[1]))}
        assert cube == member


def test_cube_slices_size_and_wrap():
    g = LatticeGrid((6,))
    sel = g.cube_slices((0,), size=3)
    # one site above the center, the rest below, wrapping through the torus
    assert sorted(sel[0].tolist()) == [0, 1, 5]
    assert len(g.cube_slices((2,), size=5)[0]) == 5


def test_forward_symbol_matches_definition():
    g = LatticeGrid((6, 4))
    assert np.allclose(g.forward_symbol, np.exp(1j * g.freq) - 1.0)
    # zero frequency has zero symbol
    assert abs(g.forward_symbol[0][0, 0]) == 0.0
