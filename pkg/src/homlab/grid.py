"""Periodic lattice geometry: torus indexing, Fourier frequencies, coarse cells."""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class LatticeGrid:
    """Periodic box of Z^d with per-axis side lengths ``shape``.

    Sites are integer coordinates taken modulo the side length on every
    axis.  ``coarse`` is the cell size R of the sublattice (R*Z)^d; every
    side must be divisible by it.  A site belongs to the cell of its
    nearest sublattice point in the max norm.  Per axis the tie at half a
    cell is resolved toward the smaller coordinate, which picks the
    lexicographically smallest nearest point and keeps the cell map well
    defined on the torus.
    """

    shape: tuple
    coarse: int = 1

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "coarse", int(self.coarse))
        if not 1 <= len(shape) <= 3:
            raise ConfigError(f"dimension must be 1, 2 or 3, got {len(shape)}")
        if any(s < 1 for s in shape):
            raise ConfigError(f"side lengths must be positive, got {shape}")
        if self.coarse < 1:
            raise ConfigError(f"coarse cell size must be positive, got {self.coarse}")
        if any(s % self.coarse for s in shape):
            raise ConfigError(f"sides {shape} not divisible by cell size {self.coarse}")

    @property
    def ndim(self):
        return len(self.shape)

    @property
    def nsites(self):
        return int(np.prod(self.shape))

    def with_coarse(self, coarse):
        return LatticeGrid(self.shape, coarse)

    def refined(self, factor):
        """Same geometry with every side multiplied by ``factor``."""
        return LatticeGrid(tuple(s * int(factor) for s in self.shape), self.coarse)

    @cached_property
    def sites(self):
        """Integer coordinates of every site, shape (d, *shape)."""
        out = np.indices(self.shape)
        out.setflags(write=False)
        return out

    @cached_property
    def freq(self):
        """Angular frequencies 2*pi*k/L per axis in FFT bin order, shape (d, *shape)."""
        axes = [2.0 * np.pi * np.fft.fftfreq(s) for s in self.shape]
        out = np.stack(np.meshgrid(*axes, indexing="ij"))
        out.setflags(write=False)
        return out

    @cached_property
    def forward_symbol(self):
        """Fourier symbol exp(i*freq) - 1 of the forward difference, shape (d, *shape)."""
        out = np.exp(1j * self.freq) - 1.0
        out.setflags(write=False)
        return out

    def min_image(self, offsets, axis=0):
        """Map integer offsets to representatives in [-L/2, L/2) per axis.

        ``offsets`` has axis ``axis`` of length d running over the axes of
        the torus.
        """
        offsets = np.asarray(offsets)
        shape = np.array(self.shape)
        ext = [None] * offsets.ndim
        ext[axis] = slice(None)
        half = shape[tuple(ext)] // 2
        period = shape[tuple(ext)]
        return (offsets + half) % period - half

    @cached_property
    def offsets(self):
        """Min-image displacement of every site from the origin, shape (d, *shape)."""
        out = self.min_image(self.sites)
        out.setflags(write=False)
        return out

    @cached_property
    def radius(self):
        """Euclidean min-image distance from the origin, shape (*shape,)."""
        out = np.sqrt((self.offsets.astype(float) ** 2).sum(axis=0))
        out.setflags(write=False)
        return out

    @cached_property
    def radius_inf(self):
        """Max-norm min-image distance from the origin, shape (*shape,)."""
        out = np.abs(self.offsets).max(axis=0)
        out.setflags(write=False)
        return out

    def torus_dist_inf(self, u, v, axis=-1):
        """Max-norm distance on the torus; coordinate axis given by ``axis``."""
        diff = self.min_image(np.asarray(u) - np.asarray(v), axis=axis)
        return np.abs(diff).max(axis=axis)

    def coarse_site(self, coords, axis=0):
        """Nearest coarse sublattice point per site; same shape as ``coords``.

        Works per axis: x = q*R + r maps to q*R when 2r <= R and to
        (q+1)*R otherwise, then reduces modulo the side length.  For the
        max norm this per-axis rounding, with the tie at 2r = R broken
        downward, is exactly the lexicographically smallest nearest point.
        """
        coords = np.asarray(coords)
        r = np.mod(coords, self.coarse)
        down = coords - r
        z = np.where(2 * r <= self.coarse, down, down + self.coarse)
        shape = np.array(self.shape)
        ext = [None] * coords.ndim
        ext[axis] = slice(None)
        return np.mod(z, shape[tuple(ext)])

    @cached_property
    def coarse_sites(self):
        out = self.coarse_site(self.sites)
        out.setflags(write=False)
        return out

    @cached_property
    def cell_labels(self):
        """Flat integer cell label for every site, shape (nsites,)."""
        per_axis = tuple(s // self.coarse for s in self.shape)
        idx = self.coarse_sites // self.coarse
        out = np.ravel_multi_index(tuple(idx), per_axis).reshape(-1)
        out.setflags(write=False)
        return out

    @property
    def ncells(self):
        return self.nsites // self.coarse ** self.ndim

    def cube_slices(self, center, size=None):
        """Index arrays selecting the cube of side ``size`` around ``center``.

        The cube uses the same per-axis offsets as the coarse cells
        (size // 2 sites above the center, the rest below), so with
        ``size == coarse`` and ``center`` on the sublattice it is exactly
        the cell of ``center``.  Returns a tuple usable as a spatial index.
        """
        size = self.coarse if size is None else int(size)
        center = np.asarray(center, dtype=int)
        lo = -((size - 1) // 2)
        axes = [(center[j] + np.arange(lo, lo + size)) % self.shape[j] for j in range(self.ndim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return tuple(m.reshape(-1) for m in mesh)
