"""Annealed Green's function tables and their homogenized corrections.

Everything here is a weighted inverse transform over one frequency grid.
The annealed field divides a smooth compactly supported cutoff by the
quadratic m(xi) = xi . A(xi) xi of the tabled symbol; the homogenized
reference uses the constant-coefficient quadratic m0; and the correction
hierarchy expands 1/m around 1/m0 in powers of the higher tensors, one
homogeneity degree per order.  The integrable singularity at frequency
zero is handled by excluding the zero bin and checking convergence
against the half-density inversion (every other bin), whose difference
field doubles as the error bar of every decay fit.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .grid import LatticeGrid
from .series import FitResult, KernelEstimate, fit_decay_exponent

__all__ = ["GreenConfig", "GreenTable", "annealed_green",
           "homogenized_green_corrections", "green_decay_fit", "bump_cutoff"]


def bump_cutoff(s):
    """Smooth bump exp(1 - 1/(1-s)) of the squared relative radius s."""
    s = np.asarray(s, dtype=float)
    out = np.zeros(s.shape)
    inside = s < 1.0
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - s[inside]))
    return out


@dataclass(frozen=True)
class GreenConfig:
    """Evaluation grid, cutoff radius, derivative index, correction order.

    The cutoff profile maps the squared relative radius |xi/xi_max|^2 to
    a weight; it must be smooth, even and supported in [0, 1) for the
    output fields to be real and rapidly converging.
    """

    grid: LatticeGrid
    xi_max: float
    alpha: tuple
    ell: int = 1
    profile: object = field(default=bump_cutoff, repr=False)

    def __post_init__(self):
        d = self.grid.ndim
        alpha = tuple(int(a) for a in self.alpha)
        object.__setattr__(self, "alpha", alpha)
        if len(alpha) != d or any(a < 0 for a in alpha):
            raise ConfigError(f"derivative index {alpha} does not fit "
                              f"dimension {d}")
        if sum(alpha) == 0 and d < 3:
            raise ConfigError("the undifferentiated field needs d >= 3; "
                              "below that only gradients are defined")
        if not 0.0 < self.xi_max <= math.pi:
            raise ConfigError(f"cutoff radius must lie in (0, pi], "
                              f"got {self.xi_max}")
        if not 1 <= self.ell <= 2 * d:
            raise ConfigError(f"correction order must lie in [1, {2 * d}], "
                              f"got {self.ell}")
        if any(s % 2 or s < 8 for s in self.grid.shape):
            raise ConfigError("the half-density check needs even sides "
                              f">= 8, got {self.grid.shape}")


@dataclass(frozen=True)
class GreenTable:
    """Real-space fields and frequency quadratics of one configuration.

    ``green``, ``homog`` and ``corrected`` are the cutoff-mollified
    fields of the exact symbol, of the leading tensor and of the
    order-ell corrected hierarchy.  ``coarse`` maps each of those names
    to its half-density inversion; the mismatch on the shared sites
    estimates the truncation error.  ``imag_residual`` is the largest
    imaginary part discarded by any inversion.
    """

    config: GreenConfig
    green: np.ndarray
    homog: np.ndarray
    corrected: np.ndarray
    m: np.ndarray
    m0: np.ndarray
    coarse: dict
    imag_residual: float
    ellipticity_margin: float

    def gap(self, name="green"):
        """Two-density mismatch of one output, on the shared offsets.

        Halving the bin density halves the torus extent but keeps the
        site spacing, so the comparison pairs equal integer offsets.
        """
        fine = getattr(self, name)
        take = np.ix_(*_shared_offsets(self.config.grid.shape))
        return np.abs(fine[take] - self.coarse[name])


def _principal_freq(grid):
    axes = [2.0 * math.pi * np.fft.fftfreq(s) for s in grid.shape]
    return np.stack(np.meshgrid(*axes, indexing="ij"))


def _shared_offsets(shape):
    """Per-axis fine indices of the offsets the half-density torus keeps."""
    return [np.concatenate([np.arange(s // 4), np.arange(s - s // 4, s)])
            for s in shape]


def _quadratic(xi, mat):
    # same contraction signature and dtype path as the tabled route, so a
    # constant table reproduces this bit for bit
    d = xi.shape[0]
    lift = mat.reshape((d, d) + (1,) * (xi.ndim - 1)).astype(complex)
    return np.einsum("i...,ij...,j...->...", xi, lift, xi).real


def _invert(spectrum):
    out = np.fft.ifftn(spectrum)
    return out.real, float(np.abs(out.imag).max())


def _tensor_limit(table):
    """Leading symbol matrix from the two smallest bins on each axis.

    The real part of the symbol is even in the frequency, so the h^2
    error of the nearest bin cancels against the doubled bin and the
    axis-averaged extrapolation carries an h^4 one.
    """
    d = table.grid.ndim
    acc = np.zeros((d, d))
    for ax in range(d):
        one = (Ellipsis,) + tuple(1 if j == ax else 0 for j in range(d))
        two = (Ellipsis,) + tuple(2 if j == ax else 0 for j in range(d))
        acc += (4.0 * table.values[one].real - table.values[two].real) / 3.0
    return acc / d


def _correction_multipliers(tensors, xi, m0, ell):
    """Fourier multipliers g_n with F[corrected] = sum of g_1 .. g_ell.

    Expanding 1/m around 1/m0 and collecting by homogeneity degree gives
    g_1 = 1/m0 and g_n = -(sum_{k=2..n} m_k g_{n-k+1}) / m0, where m_k
    is the degree-(k+1) form of the order-k tensor.  Odd powers of the
    frequency enter the symbol through odd powers of i, so every even
    order contributes nothing real and is skipped.
    """
    d = xi.shape[0]
    letters = "abcdefg"
    forms = {}
    for k in range(2, ell + 1):
        sign = (1j) ** (k - 1)
        if abs(sign.real) < 0.5:
            continue
        tens = tensors.tensor(k)
        slots = letters[:k + 1]
        spatial = "".join(f",{c}..." for c in slots)
        forms[k] = sign.real * np.einsum(f"{slots}{spatial}->...",
                                         tens, *([xi] * (k + 1)))
    safe = np.where(m0 == 0.0, 1.0, m0)
    g = [np.where(m0 == 0.0, 0.0, 1.0 / safe)]
    for n in range(2, ell + 1):
        acc = np.zeros(xi.shape[1:])
        for k, mk in forms.items():
            if k <= n:
                acc = acc + mk * g[n - k]
        g.append(np.where(m0 == 0.0, 0.0, -acc / safe))
    return g


def _weight(config, xi):
    s = np.sum(xi ** 2, axis=0) / config.xi_max ** 2
    chi = config.profile(s)
    pref = chi.astype(complex)
    # forward-difference symbol, so shifted tables difference exactly
    for j, aj in enumerate(config.alpha):
        if aj:
            pref = pref * (np.exp(1j * xi[j]) - 1.0) ** aj
    pref[(0,) * len(config.grid.shape)] = 0.0
    return pref


def _zero_bin_average(abar, spans, profile, subdiv=48):
    """Bin average of profile/quadratic over the frequency-zero bin.

    Splitting the bin into a shrinking chain of half-scale boxes turns
    the integrable singularity into a geometric series: the average is
    the regular annulus integral divided by (1 - 2^(2-d)).  Odd
    derivative indices average to zero by symmetry and even ones are
    negligible, so only the undifferentiated field needs this value.
    """
    d = len(spans)
    axes = [(np.arange(subdiv) + 0.5) / subdiv - 0.5 for _ in spans]
    u = np.stack(np.meshgrid(*[ax * h for ax, h in zip(axes, spans)],
                             indexing="ij"))
    inner = np.all(np.abs(u) <= np.array(spans).reshape((d,) + (1,) * d) / 4.0,
                   axis=0)
    quad = np.einsum("i...,ij,j...->...", u, abar, u)
    cell = np.prod([h / subdiv for h in spans])
    annulus = float(np.sum(np.where(inner, 0.0, 1.0 / quad)) * cell)
    integral = annulus / (1.0 - 2.0 ** (2 - d))
    chi0 = float(np.asarray(profile(np.zeros(1)))[0])
    return chi0 * integral / float(np.prod(spans))


def annealed_green(table, config, tensors=None):
    """Green table of a symbol: exact, leading-order and corrected fields.

    The corrected field needs the tensor hierarchy through the requested
    order; without it only order one (corrected = homogenized) is
    available.  The leading matrix is taken from the tensors when given,
    otherwise extrapolated from the table's small-frequency bins.
    """
    grid = config.grid
    d = grid.ndim
    if table.grid.shape != grid.shape:
        raise ConfigError(f"symbol table on {table.grid.shape} does not "
                          f"cover the requested grid {grid.shape}")
    if tensors is None and config.ell > 1:
        raise ConfigError("corrections beyond order one need the tensors")
    xi = _principal_freq(grid)
    pref = _weight(config, xi)
    support = np.abs(pref) > 0.0

    m = np.einsum("i...,ij...,j...->...", xi, table.values, xi).real
    abar = tensors.tensor(1) if tensors is not None else _tensor_limit(table)
    m0 = _quadratic(xi, abar)
    norm2 = np.sum(xi ** 2, axis=0)
    margin = float(np.min(np.where(support, m, np.inf) /
                          np.where(support, norm2, 1.0)))
    if margin <= 0.0:
        raise ConfigError("symbol quadratic is not positive on the "
                          "cutoff support")

    g = (_correction_multipliers(tensors, xi, m0, config.ell)
         if tensors is not None else
         [np.where(m0 == 0.0, 0.0, 1.0 / np.where(m0 == 0.0, 1.0, m0))])
    minv = np.where(support, 1.0 / np.where(support, m, 1.0), 0.0)
    spectra = {"green": pref * minv,
               "homog": pref * g[0],
               "corrected": pref * sum(g)}
    zero = (0,) * d
    if sum(config.alpha) == 0:
        spans = [2.0 * math.pi / s for s in grid.shape]
        v0 = _zero_bin_average(abar, spans, config.profile)
        v0c = _zero_bin_average(abar, [2.0 * h for h in spans], config.profile)
    else:
        v0 = v0c = 0.0
    fine, coarse, worst = {}, {}, 0.0
    half = tuple(slice(None, None, 2) for _ in grid.shape)
    for name, spec in spectra.items():
        spec[zero] = v0
        fine[name], dust = _invert(spec)
        worst = max(worst, dust)
        cspec = spec[half].copy()
        cspec[zero] = v0c
        coarse[name], dust = _invert(cspec)
        worst = max(worst, dust)
    return GreenTable(config, fine["green"], fine["homog"],
                      fine["corrected"], m, m0, coarse, worst, margin)


def homogenized_green_corrections(tensors, config):
    """Real-space correction fields, one per order from two to ell.

    Each field inverts its own multiplier g_n, so the sum of the
    homogenized field and these corrections is the corrected field of
    `annealed_green` exactly.  Orders whose symbol contribution is not
    real (the even ones) come out as zero fields.
    """
    xi = _principal_freq(config.grid)
    pref = _weight(config, xi)
    m0 = _quadratic(xi, tensors.tensor(1))
    g = _correction_multipliers(tensors, xi, m0, config.ell)
    out = {}
    for n in range(2, config.ell + 1):
        out[n], _ = _invert(pref * g[n - 1])
    return out


def green_decay_fit(table, alpha, ell, window):
    """Decay exponent of the difference field over a radial window.

    ``ell`` selects the reference: order one fits green minus homog,
    the table's own order fits green minus corrected.  The two-density
    mismatch of the difference, spread back to the fine sites, stands
    in as the noise bar, so shells dominated by inversion error are
    flagged instead of fitted.
    """
    config = table.config
    if tuple(alpha) != config.alpha:
        raise ConfigError(f"table holds derivative {config.alpha}, "
                          f"not {tuple(alpha)}")
    if ell == 1:
        ref, cref = table.homog, table.coarse["homog"]
    elif ell == config.ell:
        ref, cref = table.corrected, table.coarse["corrected"]
    else:
        raise ConfigError(f"table carries orders 1 and {config.ell}, "
                          f"not {ell}")
    diff = table.green - ref
    if not np.any(diff):
        empty = np.empty(0)
        return FitResult(float("nan"), float("nan"), float("nan"),
                         empty, empty, 0, noise_floor=True)
    take = _shared_offsets(config.grid.shape)
    gap = np.abs(diff[np.ix_(*take)] - (table.coarse["green"] - cref))
    bar = np.zeros(config.grid.shape)
    bar[np.ix_(*take)] = gap
    spatial = tuple(range(-config.grid.ndim, 0))
    mirror = np.roll(np.flip(bar, axis=spatial), 1, axis=spatial)
    bar = np.maximum(bar, mirror)
    est = KernelEstimate(config.grid, ("sum", None), diff[None, None],
                         stderr=bar[None, None], ensemble_kind="green")
    return fit_decay_exponent(est, r_min=window[0], r_max=window[1])
