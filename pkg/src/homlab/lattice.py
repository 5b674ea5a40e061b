"""Discrete differential operators on the periodic lattice.

Conventions used throughout the package:

* spatial axes are always the *last* ``d`` axes of an array, so a scalar
  field is ``(..., L_1, ..., L_d)`` and a vector field carries its component
  axis just before the spatial block, ``(..., d, L_1, ..., L_d)``.  Leading
  axes are batch axes (ensemble members, right-hand sides) and every
  operator here is transparent to them.
* the gradient is the forward difference ``(grad u)_j(x) = u(x+e_j) - u(x)``
  and the divergence is its negative adjoint, the backward difference
  ``(div g)(x) = sum_j g_j(x) - g_j(x - e_j)``, so that
  ``<grad u, g> = -<u, div g>`` exactly on the torus.
* a vector ``phases`` of unit complex numbers turns both into their
  twisted versions, ``phase_j * u(x+e_j) - u(x)`` and
  ``g_j(x) - conj(phase_j) * g_j(x-e_j)``, which is how Bloch waves
  ``exp(i xi . x)`` are factored out without leaving the torus.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import CapacityError, ConfigError, ZeroModeError
from .grid import LatticeGrid

_AXES = "uvw"  # spare einsum letters for spatial axes


def _spatial(grid):
    return tuple(range(-grid.ndim, 0))


def fft_spatial(u, grid):
    return np.fft.fftn(u, axes=_spatial(grid))


def ifft_spatial(u, grid):
    return np.fft.ifftn(u, axes=_spatial(grid))


def gradient(u, grid, phases=None):
    """Forward-difference gradient; output gains a component axis at -d-1."""
    d = grid.ndim
    parts = []
    for j in range(d):
        shifted = np.roll(u, -1, axis=j - d)
        if phases is not None:
            shifted = shifted * phases[j]
        parts.append(shifted - u)
    return np.stack(parts, axis=-d - 1)


def divergence(g, grid, phases=None):
    """Backward-difference divergence, the negative adjoint of `gradient`."""
    d = grid.ndim
    out = None
    for j in range(d):
        comp = g[(Ellipsis, j) + (slice(None),) * d]
        back = np.roll(comp, 1, axis=j - d)
        if phases is not None:
            back = back * np.conj(phases[j])
        term = comp - back
        out = term if out is None else out + term
    return out


def coeff_apply(a, g, grid):
    """Pointwise product of a coefficient field with a vector field.

    Scalar coefficients have one axis fewer than ``g`` (no component axis),
    matrix coefficients one more (two component axes).  Batch axes on either
    side broadcast as usual.
    """
    d = grid.ndim
    if g.ndim >= d + 1 and a.shape[-d:] == g.shape[-d:]:
        if a.ndim == g.ndim - 1:
            return np.expand_dims(a, -d - 1) * g
        if a.ndim == g.ndim + 1 and a.shape[-d - 2] == a.shape[-d - 1] == g.shape[-d - 1]:
            sp = _AXES[:d]
            return np.einsum(f"...ij{sp},...j{sp}->...i{sp}", a, g)
    raise ConfigError(
        f"coefficient shape {a.shape} does not match field shape {g.shape}"
    )


def dirichlet_energy(a, u, grid):
    """Mean of  grad(u) . a grad(u)  over the lattice (and any batch axes)."""
    g = gradient(u, grid)
    ag = coeff_apply(a, g, grid)
    dens = np.einsum("...i,...i->...", np.moveaxis(np.conj(g), -grid.ndim - 1, -1),
                     np.moveaxis(ag, -grid.ndim - 1, -1))
    return dens.real.mean(axis=_spatial(grid))


def _symbol(grid, phases):
    """Twisted forward-difference symbol, shape (d, *shape)."""
    d = grid.ndim
    sym = np.exp(1j * grid.freq)
    if phases is not None:
        sym = sym * np.asarray(phases).reshape((d,) + (1,) * d)
    return sym - 1.0


def laplace_symbol(grid, mass=0.0, phases=None):
    sym = _symbol(grid, phases)
    return mass + np.sum(np.abs(sym) ** 2, axis=0)


def solve_poisson(f, grid, mass=0.0, phases=None, zero_tol=1e-10,
                  on_zero_mode="raise"):
    """Invert ``mass - div grad`` (twisted when ``phases`` is given) by FFT.

    With ``mass == 0`` the operator annihilates constants.  The zero bin
    is then required to vanish (relative to the rest of the spectrum); if
    it does not, the system is inconsistent and `ZeroModeError` is raised.
    Passing ``on_zero_mode="project"`` instead silently drops whatever
    sits on the kernel (the pseudo-inverse, as a preconditioner wants).
    The returned solution has no component in the kernel.
    """
    sym = laplace_symbol(grid, mass=mass, phases=phases)
    fhat = fft_spatial(np.asarray(f), grid)
    dead = sym <= zero_tol * sym.max()
    if dead.any():
        if on_zero_mode == "raise":
            scale = np.max(np.abs(fhat))
            if scale > 0 and np.max(np.abs(fhat[..., dead])) > 1e-8 * scale:
                raise ZeroModeError(
                    "right-hand side has weight on the kernel of the massless operator"
                )
        fhat = np.where(dead, 0.0, fhat)  # return the mean-free solution
        sym = np.where(dead, 1.0, sym)
    out = ifft_spatial(fhat / sym, grid)
    if np.isrealobj(f) and phases is None:
        return out.real
    return out


def poisson_site_matrix(grid, mass=0.0, phases=None, zero_tol=1e-10):
    """Dense site-space inverse of ``mass - div grad``, kernel projected out.

    The twisted operator is translation invariant, so the plain DFT
    diagonalizes it; folding the diagonal inverse back gives one
    (nsites, nsites) matrix.  Worth it only on small torii, where a
    single matmul beats batched FFTs as a preconditioner: apply as
    ``rows @ P.T`` on (batch, nsites) data.  Semantics match
    ``solve_poisson(..., on_zero_mode="project")``.
    """
    d = grid.ndim
    ang = grid.freq.reshape(d, -1).T @ grid.sites.reshape(d, -1).astype(float)
    fmat = np.exp(-1j * ang)
    sym = laplace_symbol(grid, mass=mass, phases=phases).ravel()
    dead = sym <= zero_tol * sym.max()
    inv = np.where(dead, 0.0, 1.0 / np.where(dead, 1.0, sym))
    out = (fmat.conj().T * inv[None, :]) @ fmat / grid.nsites
    if phases is None and np.isrealobj(np.asarray(mass)):
        return out.real
    return out


# -- gradient projection -----------------------------------------------------

@lru_cache(maxsize=8)
def _projection_symbol_cached(shape):
    grid = LatticeGrid(shape)
    sym = _symbol(grid, None)  # (d, *shape)
    norm = np.sum(np.abs(sym) ** 2, axis=0)
    norm[(0,) * grid.ndim] = 1.0  # zero mode maps to zero anyway
    khat = sym[:, None] * np.conj(sym[None, :]) / norm
    khat[(slice(None), slice(None)) + (0,) * grid.ndim] = 0.0
    khat.setflags(write=False)
    return khat


def grad_projection_symbol(grid):
    """Fourier multiplier of the projection onto gradient fields, (d, d, *shape).

    The multiplier is the rank-one Hermitian projector onto the direction of
    the forward-difference symbol, with the zero mode mapped to zero, so the
    operator kills constants and mean-free divergence-free fields alike.
    """
    return _projection_symbol_cached(grid.shape)


@lru_cache(maxsize=8)
def _projection_kernel_cached(shape):
    grid = LatticeGrid(shape)
    khat = _projection_symbol_cached(shape)
    kern = np.fft.ifftn(khat, axes=_spatial(grid)).real
    kern.setflags(write=False)
    return kern


def grad_projection_kernel(grid):
    """Real-space convolution kernel of the gradient projection, (d, d, *shape).

    ``kernel[i, j, v]`` is the response at displacement ``v`` in component
    ``i`` to a unit source in component ``j`` at the origin.  The kernel is
    real and satisfies ``kernel[:, :, -v] == kernel[:, :, v].T``.
    """
    return _projection_kernel_cached(grid.shape)


def apply_grad_projection(g, grid):
    """Project a vector field onto gradients (batch axes pass through)."""
    khat = grad_projection_symbol(grid)
    ghat = fft_spatial(g, grid)
    sp = _AXES[: grid.ndim]
    out = ifft_spatial(
        np.einsum(f"ij{sp},...j{sp}->...i{sp}", khat, ghat), grid
    )
    if np.isrealobj(g):
        return out.real
    return out


@lru_cache(maxsize=2)
def _truncated_projection_matrix(shape, coarse, reach):
    grid = LatticeGrid(shape, coarse=coarse)
    d, s = grid.ndim, grid.nsites
    if s * s * d * d > 1 << 24:
        raise CapacityError(
            f"truncated projection on {shape} needs {s * s * d * d} kernel "
            "entries; the guard allows at most 2^24"
        )
    kern = np.asarray(grad_projection_kernel(grid)).reshape(d, d, s)
    sites = grid.sites.reshape(d, s)
    diff = np.mod(sites[:, :, None] - sites[:, None, :],
                  np.asarray(shape).reshape(d, 1, 1))
    flat = np.ravel_multi_index(tuple(diff), shape)
    mat = kern[:, :, flat]  # (d, d, s, s) indexed by x - y
    zx = grid.coarse_sites.reshape(d, s)
    far = grid.torus_dist_inf(zx[:, :, None], zx[:, None, :], axis=0) > reach
    mat = np.where(far, 0.0, mat)
    mat.setflags(write=False)
    return mat


def apply_truncated_projection(g, grid, reach):
    """Gradient projection with the kernel cut at coarse-cell separation `reach`.

    Site pairs contribute only when the sup distance between their cell
    centers (lattice units, torus metric) is at most ``reach``, which must
    be at least the cell size.  Dense in the site count; guarded.
    """
    if reach < grid.coarse:
        raise ConfigError(
            f"truncation radius {reach} smaller than cell size {grid.coarse}")
    d, s = grid.ndim, grid.nsites
    mat = _truncated_projection_matrix(grid.shape, grid.coarse, int(reach))
    gf = np.asarray(g).reshape(g.shape[: -d - 1] + (d, s))
    out = np.einsum("ijxy,...jy->...ix", mat, gf)
    return out.reshape(g.shape)


# -- norms --------------------------------------------------------------------

def mixed_norm(u, grid, p=2.0, q=np.inf, cell=None):
    """Outer l^p over cells of inner l^q over the sites of each cell.

    ``cell`` overrides the grid's coarse size.  Vector fields (component
    axis at -d-1) are first reduced pointwise by the Euclidean norm.
    Norms are raw sums, not averages, so p == q collapses to the plain
    l^p norm.  Batch axes are not supported here; pass one field at a time.
    """
    if cell is not None and cell != grid.coarse:
        grid = grid.with_coarse(int(cell))
    d = grid.ndim
    u = np.asarray(u)
    if u.ndim == d + 1 and u.shape[0] == d:
        u = np.sqrt(np.sum(np.abs(u) ** 2, axis=0))
    elif u.ndim != d:
        raise ConfigError(f"expected a scalar or vector field, got shape {u.shape}")
    vals = np.abs(u).reshape(-1)
    labels = grid.cell_labels.reshape(-1)
    n = grid.ncells
    if np.isinf(q):
        inner = np.zeros(n)
        np.maximum.at(inner, labels, vals)
    else:
        inner = np.bincount(labels, weights=vals ** q, minlength=n) ** (1.0 / q)
    if np.isinf(p):
        return float(inner.max())
    return float(np.sum(inner ** p) ** (1.0 / p))


@dataclass(frozen=True)
class NormEstimate:
    """Bracketed operator-norm estimate for one cell pair."""

    value: float
    lower: float
    upper: float
    method: str
    iterations: int = 0

    def __post_init__(self):
        if not (self.lower <= self.value <= self.upper) and not np.isclose(
            self.lower, self.upper, rtol=1e-9, atol=0.0
        ):
            raise ConfigError("norm estimate must satisfy lower <= value <= upper")


def averaged_kernel_norm(op, grid, x, y, q=2.0, size=None, tol=1e-6, seed=11):
    """Norm of the block of ``op`` mapping the cell at ``y`` to the cell at ``x``.

    The operator is probed with unit basis vectors supported on the source
    cube (side ``size``, default the grid's coarsening), the response is
    restricted to the target cube, and the norm of the resulting dense
    matrix is taken as a map l^q -> l^q on vector fields:

    * ``q == 2`` runs power iteration to `tol` (certified by convergence);
    * ``q in (1, inf)`` is the exact max column / row sum;
    * other ``q`` returns a Riesz-Thorin interpolation upper bound and the
      best column lower bound.
    """
    from .solvers import power_iteration

    d = grid.ndim
    size = grid.coarse if size is None else int(size)
    src = grid.cube_slices(np.asarray(y, dtype=int), size)
    dst = grid.cube_slices(np.asarray(x, dtype=int), size)
    ncube = size ** d
    probe = np.zeros((d,) + grid.shape)
    cols = []
    for j in range(d):
        for s in range(ncube):
            probe[...] = 0.0
            probe[(j,) + tuple(ax.reshape(-1)[s] for ax in src)] = 1.0
            resp = np.asarray(op(probe))
            cols.append(resp[(slice(None),) + dst].reshape(-1))
    mat = np.stack(cols, axis=1)
    if q == 2.0:
        sigma, iters = power_iteration(mat, tol=tol)
        return NormEstimate(float(sigma), float(sigma * (1 - 2 * tol)),
                            float(sigma * (1 + 2 * tol)), "power-iteration", iters)
    n1 = float(np.abs(mat).sum(axis=0).max())
    ninf = float(np.abs(mat).sum(axis=1).max())
    if q == 1.0:
        return NormEstimate(n1, n1, n1, "column-sums")
    if np.isinf(q):
        return NormEstimate(ninf, ninf, ninf, "row-sums")
    if not 1.0 < q < np.inf:
        raise ConfigError(f"q must lie in [1, inf], got {q}")
    theta = 1.0 - 1.0 / q  # interpolate l^1 (theta=0) against l^inf (theta=1)
    upper = n1 ** (1.0 - theta) * ninf ** theta
    colq = np.sum(np.abs(mat) ** q, axis=0) ** (1.0 / q)
    lower = float(colq.max())  # unit basis vectors have unit q-norm
    value = min(upper, max(lower, (lower + upper) / 2.0))
    return NormEstimate(value, lower, float(upper), "interpolation")


@dataclass(frozen=True)
class OperatorHandle:
    """A named linear map on vector fields, for norm probes and reporting."""

    apply: callable
    label: str
    grid: LatticeGrid

    def __call__(self, g):
        return self.apply(g)
