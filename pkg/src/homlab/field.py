"""Random coefficient ensembles on the torus, in perturbative normal form.

Every coefficient field handled by the package is written as
``a = Id + delta * b`` with ``|b| <= 1`` pointwise (operator norm) and a
small contrast ``delta``.  Three field models are provided:

* ``iid``: one draw per site from a finite law;
* ``block``: one draw per block of a given side, with the block origin
  randomized uniformly so the law is shift-invariant on the torus;
* ``gaussian``: a bounded odd function of a stationary Gaussian field
  whose covariance decays like a power of the distance.

Ensembles come in two flavours.  Exact ensembles enumerate every
configuration of a finite law with its product weight, so expectations
are sums, not estimates; they are the ground truth the Monte Carlo paths
are checked against.  Monte Carlo ensembles hold independent draws with
uniform weights and support antithetic pairing when the law is symmetric.

Member data is stored stacked, member axis first, so the expectation and
its complement act by weighted contraction over axis 0 on anything whose
leading axis runs over members.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import CapacityError, ConfigError
from .grid import LatticeGrid
from .util import substream

_MODELS = ("iid", "block", "gaussian")
_WEIGHT_TOL = 1e-14


def _nested_tuple(x):
    if isinstance(x, (list, tuple)):
        return tuple(_nested_tuple(v) for v in x)
    return float(x)


@dataclass(frozen=True)
class EnsembleSpec:
    """Declarative description of a coefficient law.

    ``values``/``weights`` define the finite site law of the discrete
    models (scalars, or symmetric positive definite matrices as nested
    rows).  The Gaussian model ignores them and is set by ``delta`` (the
    contrast), ``gamma`` (covariance decay exponent) and the grid it is
    later sampled on.  ``block`` is the block side of the block model.
    """

    model: str
    values: tuple = None
    weights: tuple = None
    delta: float = None
    block: int = 1
    gamma: float = None
    seed: int = 0

    def __post_init__(self):
        if self.model not in _MODELS:
            raise ConfigError(f"unknown field model {self.model!r}")
        if self.values is not None:
            object.__setattr__(self, "values", _nested_tuple(self.values))
        if self.weights is not None:
            w = tuple(float(v) for v in self.weights)
            object.__setattr__(self, "weights", w)
        object.__setattr__(self, "block", int(self.block))
        if self.model == "gaussian":
            if self.gamma is None or self.gamma <= 0:
                raise ConfigError("gaussian model needs a decay exponent gamma > 0")
            if self.delta is None or not 0.0 <= self.delta < 1.0:
                raise ConfigError("gaussian model needs contrast 0 <= delta < 1")
        else:
            vals, wts = self.law_arrays()
            if len(vals) != len(wts) or len(vals) == 0:
                raise ConfigError("discrete law needs matching values and weights")
            if np.any(wts < 0) or abs(wts.sum() - 1.0) > 1e-12:
                raise ConfigError("law weights must be nonnegative and sum to 1")
            for v in vals:
                _check_spd(v)
            if self.block < 1:
                raise ConfigError(f"block size must be positive, got {self.block}")

    def law_arrays(self):
        """Law support as an array stack (n,) or (n, d, d), plus weights."""
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim not in (1, 3) or (vals.ndim == 3 and vals.shape[1] != vals.shape[2]):
            raise ConfigError(
                f"law values must be scalars or square matrices, got shape {vals.shape}")
        return vals, np.asarray(self.weights, dtype=float)

    @property
    def scalar(self):
        if self.model == "gaussian":
            return True
        return np.asarray(self.values).ndim == 1

    def kernel_exponent(self, d):
        """Decay exponent of the Gaussian convolution square root."""
        return max(self.gamma, (d + self.gamma) / 2.0)

    def to_dict(self):
        out = {"model": self.model, "block": self.block, "seed": self.seed}
        if self.values is not None:
            out["values"] = self.values
            out["weights"] = self.weights
        if self.delta is not None:
            out["delta"] = self.delta
        if self.gamma is not None:
            out["gamma"] = self.gamma
        return out

    @classmethod
    def from_dict(cls, data):
        allowed = {"model", "values", "weights", "delta", "block", "gamma", "seed"}
        extra = set(data) - allowed
        if extra:
            raise ConfigError(f"unknown ensemble keys {sorted(extra)}")
        if "model" not in data:
            raise ConfigError("ensemble spec needs a model")
        return cls(**data)


def _check_spd(v):
    v = np.asarray(v)
    if v.ndim == 0:
        if v <= 0:
            raise ConfigError(f"law value {float(v)} is not positive")
        return
    if not np.allclose(v, v.T, atol=1e-12):
        raise ConfigError("matrix law values must be symmetric")
    if np.linalg.eigvalsh(v).min() <= 0:
        raise ConfigError("matrix law values must be positive definite")


def _law_normal_form(vals, wts):
    """Shared contrast and unit fluctuations of a finite law.

    Conjugates every value by the inverse square root of the law mean,
    then splits off the largest deviation from the identity, so the same
    (delta, b) decomposition applies to every sample of the law.
    """
    mean = np.einsum("n,n...->...", wts, vals)
    if vals.ndim == 1:
        if mean <= 0:
            raise ConfigError("law mean must be positive")
        atil = vals / mean
        dev = atil - 1.0
        delta = float(np.abs(dev).max())
        bvals = dev / delta if delta > 0 else np.zeros_like(dev)
        return mean, delta, bvals
    evals, evecs = np.linalg.eigh(mean)
    if evals.min() <= 0:
        raise ConfigError("law mean must be positive definite")
    root_inv = (evecs * (1.0 / np.sqrt(evals))) @ evecs.T
    atil = np.einsum("ij,njk,kl->nil", root_inv, vals, root_inv)
    dev = atil - np.eye(vals.shape[1])
    delta = float(max(np.linalg.norm(m, 2) for m in dev))
    bvals = dev / delta if delta > 0 else np.zeros_like(dev)
    return mean, delta, bvals


def _mirror_permutation(bvals, wts):
    """Index map sending each law point to its negation, or None."""
    n = len(bvals)
    perm = np.full(n, -1)
    for i in range(n):
        for j in range(n):
            if np.allclose(bvals[i], -bvals[j], atol=1e-12) and abs(wts[i] - wts[j]) < 1e-12:
                perm[i] = j
                break
        if perm[i] < 0:
            return None
    return perm


@dataclass(frozen=True)
class CoefficientField:
    """One realization ``a = Id + delta * b`` on a grid.

    Scalar laws keep ``a`` and ``b`` as scalar fields and expose the
    matrix form on demand.  ``ellipticity`` is the constant C with
    ``e . a e >= |e|^2 / C`` and ``|a e| <= C |e|``; for the normal form
    it is ``1 / (1 - delta)``.
    """

    grid: LatticeGrid
    a: np.ndarray
    b: np.ndarray
    delta: float
    scalar: bool
    ellipticity: float

    def matrix(self):
        """The coefficient as a full (d, d, *shape) array."""
        if not self.scalar:
            return self.a
        d = self.grid.ndim
        return np.eye(d).reshape((d, d) + (1,) * d) * self.a

    def check(self):
        """Validate the ellipticity bounds and |b| <= 1; raises on failure."""
        tol = 1e-12
        if np.max(np.abs(self.b if self.scalar else _op_norms(self.b))) > 1.0 + tol:
            raise ConfigError("fluctuation exceeds unit size")
        if self.scalar:
            low, high = float(self.a.min()), float(np.abs(self.a).max())
        else:
            mats = np.moveaxis(self.a.reshape(self.grid.ndim, self.grid.ndim, -1), -1, 0)
            sym_eigs = np.linalg.eigvalsh((mats + np.swapaxes(mats, 1, 2)) / 2)
            low = float(sym_eigs.min())
            high = float(np.linalg.norm(mats, 2, axis=(1, 2)).max())
        if low * self.ellipticity < 1.0 - tol or high > self.ellipticity + tol:
            raise ConfigError("field violates its ellipticity constant")


def _op_norms(b):
    d = b.shape[0]
    mats = np.moveaxis(b.reshape(d, d, -1), -1, 0)
    return np.linalg.norm(mats, 2, axis=(1, 2))


def _field_from_b(grid, b, delta, scalar):
    if scalar:
        a = 1.0 + delta * b
    else:
        d = grid.ndim
        a = np.eye(d).reshape((d, d) + (1,) * d) + delta * b
    ell = 1.0 / (1.0 - delta) if delta < 1.0 else np.inf
    return CoefficientField(grid, a, b, delta, scalar, ell)


def _draw_indices(rng, wts, shape):
    return rng.choice(len(wts), size=shape, p=wts)


def _sample_b(spec, grid, rng):
    """Unit-fluctuation field of one draw; returns (b, delta)."""
    if spec.model == "gaussian":
        noise = rng.standard_normal(grid.shape)
        return _gaussian_b(spec, grid, noise), spec.delta
    vals, wts = spec.law_arrays()
    _, delta, bvals = _law_normal_form(vals, wts)
    idx = _draw_law_indices(spec, grid, rng, wts)
    return _b_from_indices(spec, bvals, idx), delta


def gaussian_kernel(spec, grid):
    """Convolution square root c0 with unit total power, shape (*shape,)."""
    beta = spec.kernel_exponent(grid.ndim)
    c0 = (1.0 + grid.radius ** 2) ** (-beta / 2.0)
    return c0 / np.sqrt(np.sum(c0 ** 2))


def gaussian_base_covariance(spec, grid):
    """Exact covariance of the underlying unit Gaussian field, shape (*shape,)."""
    k0hat = np.fft.fftn(gaussian_kernel(spec, grid))
    cov = np.fft.ifftn(np.abs(k0hat) ** 2).real
    cov.setflags(write=False)
    return cov

def _gaussian_b(spec, grid, noise):
    k0hat = np.fft.fftn(gaussian_kernel(spec, grid))
    g = np.fft.ifftn(k0hat * np.fft.fftn(noise)).real
    return np.tanh(g)  # odd, |b| < 1, first and second derivative within 1


def sample_iid(spec, grid, seed=None):
    """One independent-site draw of the law as a CoefficientField."""
    if spec.model != "iid":
        raise ConfigError(f"expected an iid spec, got model {spec.model!r}")
    rng = substream(spec.seed if seed is None else seed, 0)
    b, delta = _sample_b(spec, grid, rng)
    return _field_from_b(grid, b, delta, spec.scalar)


def sample_block_mixing(spec, grid, seed=None):
    """One draw constant on blocks, block origin uniformly randomized."""
    if spec.model != "block":
        raise ConfigError(f"expected a block spec, got model {spec.model!r}")
    rng = substream(spec.seed if seed is None else seed, 0)
    b, delta = _sample_b(spec, grid, rng)
    return _field_from_b(grid, b, delta, spec.scalar)


def sample_gaussian_powerlaw(spec, grid, seed=None):
    """One draw of the bounded transform of the power-law Gaussian field."""
    if spec.model != "gaussian":
        raise ConfigError(f"expected a gaussian spec, got model {spec.model!r}")
    rng = substream(spec.seed if seed is None else seed, 0)
    b, delta = _sample_b(spec, grid, rng)
    return _field_from_b(grid, b, delta, True)


@dataclass(frozen=True)
class Ensemble:
    """A weighted family of fluctuation fields sharing one contrast.

    ``b`` is stacked with the member axis first: (n, *shape) for scalar
    laws, (n, d, d, *shape) for matrix laws.  ``expect`` and ``perp`` act
    on any array whose leading axis runs over members.  ``kind`` is
    "exact" (weights enumerate the law), "mc" (independent draws) or
    "translate" (all torus shifts of one pattern).
    """

    grid: LatticeGrid
    delta: float
    b: np.ndarray
    weights: np.ndarray
    scalar: bool
    kind: str
    spec: EnsembleSpec = None
    antithetic: bool = False

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or len(w) != self.b.shape[0]:
            raise ConfigError("weights must match the member axis")
        if np.any(w < 0) or abs(w.sum() - 1.0) > _WEIGHT_TOL * max(1, len(w)):
            raise ConfigError("weights must be nonnegative and sum to 1")

    @property
    def n(self):
        return self.b.shape[0]

    def expect(self, data=None):
        """Weighted mean over the member axis (defaults to the fields)."""
        data = self.b if data is None else np.asarray(data)
        return np.einsum("n,n...->...", self.weights, data)

    def perp(self, data=None):
        """Centered version of member-stacked data, same shape."""
        data = self.b if data is None else np.asarray(data)
        return data - self.expect(data)[None]

    def coefficients(self):
        """Stacked a = Id + delta*b in the law's own layout."""
        if self.scalar:
            return 1.0 + self.delta * self.b
        d = self.grid.ndim
        return np.eye(d).reshape((d, d) + (1,) * d) + self.delta * self.b

    def coefficient_matrices(self):
        """Stacked coefficients, always (n, d, d, *shape)."""
        a = self.coefficients()
        if not self.scalar:
            return a
        d = self.grid.ndim
        return np.eye(d).reshape((d, d) + (1,) * d) * a[:, None, None]

    def member(self, i):
        return _field_from_b(self.grid, self.b[i], self.delta, self.scalar)

    def with_members(self, b, weights=None, kind=None):
        return replace(self, b=b,
                       weights=self.weights if weights is None else weights,
                       kind=self.kind if kind is None else kind)


def enumerate_exact(spec, grid):
    """Every configuration of a finite law with its product weight.

    Guarded: the state space must stay within 2^24 weighted configurations
    and the stacked member data within 2^23 site values.
    """
    if spec.model == "gaussian":
        raise ConfigError("the gaussian model has no finite configuration space")
    vals, wts = spec.law_arrays()
    _, delta, bvals = _law_normal_form(vals, wts)
    nval = len(vals)
    if spec.model == "iid":
        ncell, nshift = grid.nsites, 1
    else:
        if any(s % spec.block for s in grid.shape):
            raise ConfigError(
                f"block size {spec.block} does not divide sides {grid.shape}")
        ncell = grid.nsites // spec.block ** grid.ndim
        nshift = spec.block ** grid.ndim
    bits = ncell * np.log2(nval)
    if bits > 24:
        raise CapacityError(
            f"exact enumeration needs {bits:.1f} bits of state, guard is 24")
    nconf = nval ** ncell * nshift
    if nconf * grid.nsites > 1 << 23:
        raise CapacityError(
            f"exact ensemble would hold {nconf * grid.nsites} site values, "
            "guard is 2^23")
    digits = np.stack(np.unravel_index(np.arange(nval ** ncell), (nval,) * ncell))
    weights = np.prod(wts[digits], axis=0)
    if spec.model == "iid":
        idx = digits.T.reshape((-1,) + grid.shape)
    else:
        bshape = tuple(s // spec.block for s in grid.shape)
        idx = digits.T.reshape((-1,) + bshape)
        for ax in range(grid.ndim):
            idx = np.repeat(idx, spec.block, axis=ax + 1)
        shifted = []
        for flat in range(nshift):
            shift = np.unravel_index(flat, (spec.block,) * grid.ndim)
            shifted.append(np.roll(idx, shift, axis=tuple(range(1, grid.ndim + 1))))
        idx = np.concatenate(shifted)
        weights = np.tile(weights, nshift) / nshift
    b = bvals[idx]
    if not spec.scalar:
        b = np.moveaxis(b, (-2, -1), (1, 2))
    weights = weights / weights.sum()  # sharpen product rounding
    return Ensemble(grid, delta, b, weights, spec.scalar, "exact", spec)


def monte_carlo(spec, grid, n, seed=None, antithetic="auto"):
    """Independent draws with uniform weights, antithetic when possible.

    With antithetic pairing on, members come in adjacent pairs (2k, 2k+1)
    where the second is the negation image of the first; laws without a
    weight-preserving negation fall back to plain sampling (or raise if
    pairing was demanded).
    """
    if n < 1:
        raise ConfigError("sample count must be positive")
    seed = spec.seed if seed is None else seed
    pair = False
    perm = None
    if antithetic in (True, "auto"):
        if spec.model == "gaussian":
            pair = True
        else:
            vals, wts = spec.law_arrays()
            _, _, bvals = _law_normal_form(vals, wts)
            perm = _mirror_permutation(bvals, wts)
            pair = perm is not None
        if antithetic is True and not pair:
            raise ConfigError("law admits no antithetic pairing")
        if pair and n % 2:
            raise ConfigError("antithetic sampling needs an even sample count")
    if spec.model == "gaussian":
        delta = spec.delta
    else:
        vals, wts = spec.law_arrays()
        _, delta, bvals = _law_normal_form(vals, wts)
    members = []
    for k in range(n // 2 if pair else n):
        rng = substream(seed, 1, k)
        if spec.model == "gaussian":
            noise = rng.standard_normal(grid.shape)
            members.append(_gaussian_b(spec, grid, noise))
            if pair:
                members.append(_gaussian_b(spec, grid, -noise))
        elif pair:
            idx = _draw_law_indices(spec, grid, rng, wts)
            members.append(_b_from_indices(spec, bvals, idx))
            members.append(_b_from_indices(spec, bvals, perm[idx]))
        else:
            b, _ = _sample_b(spec, grid, rng)
            members.append(b)
    b = np.stack(members)
    weights = np.full(n, 1.0 / n)
    return Ensemble(grid, delta, b, weights, spec.scalar, "mc", spec,
                    antithetic=pair)


def _draw_law_indices(spec, grid, rng, wts):
    """Per-site law index field of one draw of a discrete model."""
    if spec.model == "iid":
        return _draw_indices(rng, wts, grid.shape)
    if any(s % spec.block for s in grid.shape):
        raise ConfigError(
            f"block size {spec.block} does not divide sides {grid.shape}")
    bshape = tuple(s // spec.block for s in grid.shape)
    idx = _draw_indices(rng, wts, bshape)
    for ax in range(grid.ndim):
        idx = np.repeat(idx, spec.block, axis=ax)
    shift = rng.integers(0, spec.block, size=grid.ndim)
    return np.roll(idx, shift, axis=tuple(range(grid.ndim)))


def _b_from_indices(spec, bvals, idx):
    b = bvals[idx]
    if not spec.scalar:
        b = np.moveaxis(b, (-2, -1), (0, 1))
    return b


def translate_ensemble(pattern, grid, delta, scalar=None):
    """All torus shifts of one fixed fluctuation pattern, equal weights.

    The result is exactly shift-invariant and has the expectation of the
    pattern's spatial average, which makes it a deterministic stand-in for
    a stationary law in convergence studies.
    """
    pattern = np.asarray(pattern, dtype=float)
    d = grid.ndim
    if scalar is None:
        scalar = pattern.ndim == d
    spatial = tuple(range(-d, 0))
    members = []
    for flat in range(grid.nsites):
        shift = np.unravel_index(flat, grid.shape)
        members.append(np.roll(pattern, shift, axis=spatial))
    b = np.stack(members)
    w = np.full(grid.nsites, 1.0 / grid.nsites)
    return Ensemble(grid, float(delta), b, w, scalar, "translate")


def reflect_augment(ensemble):
    """Double an ensemble with the spatial reflection of every member.

    Reflection through the origin is a symmetry of all three laws, so the
    augmented ensemble has the same law; odd functionals of the field
    average to zero pairwise, exactly.
    """
    d = ensemble.grid.ndim
    spatial = tuple(range(-d, 0))
    flipped = np.roll(np.flip(ensemble.b, axis=spatial), 1, axis=spatial)
    b = np.concatenate([ensemble.b, flipped])
    w = np.concatenate([ensemble.weights, ensemble.weights]) / 2.0
    return replace(ensemble, b=b, weights=w)


def normalize(ensemble):
    """Reduce an ensemble of raw coefficients to normal form.

    Conjugates by the inverse square root of the mean coefficient and
    splits off the largest deviation from the identity.  On exact
    ensembles the mean is exact and E[b] vanishes identically; on Monte
    Carlo ensembles both are sample estimates.  Returns (delta, ensemble).
    """
    a = ensemble.coefficients()
    d = ensemble.grid.ndim
    spatial = tuple(range(-d, 0))
    if ensemble.scalar:
        mean = float(ensemble.expect(a.mean(axis=spatial)))
        if mean <= 0:
            raise ConfigError("mean coefficient must be positive")
        atil = a / mean
        dev = atil - 1.0
        delta = float(np.abs(dev).max())
        b = dev / delta if delta > 0 else np.zeros_like(dev)
    else:
        mean = ensemble.expect(a.mean(axis=spatial))
        evals, evecs = np.linalg.eigh((mean + mean.T) / 2)
        if evals.min() <= 0:
            raise ConfigError("mean coefficient must be positive definite")
        root_inv = (evecs * (1.0 / np.sqrt(evals))) @ evecs.T
        sp = "uvw"[:d]
        atil = np.einsum(f"ij,njk{sp},kl->nil{sp}", root_inv, a, root_inv)
        dev = atil - np.eye(d).reshape((d, d) + (1,) * d)
        mats = np.moveaxis(dev.reshape(len(a), d, d, -1), (1, 2), (-2, -1))
        delta = float(np.linalg.norm(mats, 2, axis=(-2, -1)).max())
        b = dev / delta if delta > 0 else np.zeros_like(dev)
    out = replace(ensemble, delta=delta, b=b)
    return delta, out


@dataclass(frozen=True)
class CovarianceTable:
    """Site-averaged covariance of the fluctuation field by offset.

    ``values`` is a full offset-indexed field ((*shape,) for scalar laws,
    (d, d, *shape) entrywise otherwise); ``stderr`` matches it on Monte
    Carlo input and is None on exact input.
    """

    grid: LatticeGrid
    values: np.ndarray
    stderr: np.ndarray = None
    max_radius: float = np.inf

    def table(self):
        """Dict offset tuple -> value for offsets within the radius."""
        offs = self.grid.offsets.reshape(self.grid.ndim, -1).T
        rad = self.grid.radius.reshape(-1)
        d = self.grid.ndim
        flatvals = self.values.reshape(self.values.shape[:-d] + (-1,))
        out = {}
        for k in np.flatnonzero(rad <= self.max_radius):
            out[tuple(int(v) for v in offs[k])] = np.array(flatvals[..., k])
        return out


def empirical_covariance(ensemble, max_radius=np.inf):
    """Covariance of b between a site and its offsets, averaged over sites.

    Shift invariance of the law is used to average the product over the
    base point, which the fast transform does in one pass per member.
    Exact ensembles give the exact covariance; Monte Carlo ensembles also
    carry the standard error of the member average.
    """
    grid = ensemble.grid
    d = grid.ndim
    spatial = tuple(range(-d, 0))
    b = ensemble.perp()
    bhat = np.fft.fftn(b, axes=spatial)
    per_member = np.fft.ifftn(np.abs(bhat) ** 2, axes=spatial).real / grid.nsites
    values = ensemble.expect(per_member)
    stderr = None
    if ensemble.kind == "mc":
        n = ensemble.n
        spread = per_member - values[None]
        stderr = np.sqrt(np.einsum("n,n...->...", ensemble.weights, spread ** 2)
                         / max(n - 1, 1))
    return CovarianceTable(grid, values, stderr, max_radius)


def fluctuation_covariance(spec, grid, terms=40):
    """Exact covariance field of b under the law, shape (*shape,).

    Discrete models: the law variance times the exact probability that
    two sites share a draw (1 at the origin for iid; the product of
    per-axis overlap fractions for shift-randomized blocks, valid while
    the block is at most half the torus).  Gaussian model: the bounded
    transform is expanded in Hermite polynomials and the series in the
    base covariance is summed to ``terms`` (only odd orders contribute
    for an odd transform).
    """
    if spec.model == "gaussian":
        rho = gaussian_base_covariance(spec, grid)
        nodes, wts = np.polynomial.hermite_e.hermegauss(120)
        probs = wts / wts.sum()
        vals = np.tanh(nodes)
        cov = np.zeros(grid.shape)
        fact = 1.0
        for k in range(1, terms + 1):
            fact *= k
            herm = np.polynomial.hermite_e.hermeval(nodes, [0.0] * k + [1.0])
            fk = np.sum(probs * vals * herm) / fact
            if fk != 0.0:
                cov += fact * fk ** 2 * rho ** k
        return cov
    vals, wts = spec.law_arrays()
    _, _, bvals = _law_normal_form(vals, wts)
    if not spec.scalar:
        raise ConfigError("exact covariance tables cover scalar laws only")
    var = float(np.sum(wts * bvals ** 2) - np.sum(wts * bvals) ** 2)
    if spec.model == "iid":
        cov = np.zeros(grid.shape)
        cov[(0,) * grid.ndim] = var
        return cov
    if any(2 * spec.block > s for s in grid.shape):
        raise ConfigError("block overlap formula needs block <= half the torus")
    overlap = np.ones(grid.shape)
    for ax in range(grid.ndim):
        frac = np.maximum(0.0, 1.0 - np.abs(grid.offsets[ax]) / spec.block)
        overlap = overlap * frac
    return var * overlap


def export_field(field, path):
    """Write a field as flat binary: row-major sites, row-major d*d entries,
    little-endian float64."""
    mat = np.moveaxis(field.matrix(), (0, 1), (-2, -1))
    np.ascontiguousarray(mat, dtype="<f8").tofile(path)


def read_field_binary(path, grid):
    """Read back a field written by `export_field`, as (d, d, *shape)."""
    d = grid.ndim
    raw = np.fromfile(path, dtype="<f8")
    expected = grid.nsites * d * d
    if raw.size != expected:
        raise ConfigError(
            f"binary field holds {raw.size} values, grid needs {expected}")
    return np.moveaxis(raw.reshape(grid.shape + (d, d)), (-2, -1), (0, 1))
