"""Quenched solves, effective-equation proxies, and cross-route verification.

The macroscopic scale is carried by the torus itself: a scale ratio 1/m is
realized by drawing the coefficients on a torus with m times as many sites
while the source keeps its integer mode numbers, so its profile stretches
and its discrete gradients shrink accordingly.  Effective-equation solves
are exact per Fourier mode; the only iterative pieces are the quenched
coefficient solves.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .lattice import (coeff_apply, divergence, gradient, poisson_site_matrix,
                      solve_poisson)
from .series import _wls_line, symbol_exact
from .solvers import conjugate_gradient, flat_inner


@dataclass(frozen=True)
class SourceSpec:
    """Band-limited divergence-form source f_j(x) = sum_k Re(c_j e^{i 2pi k.x/L}).

    Modes are (integer wavevector, complex amplitude per component) pairs.
    Mode numbers are held fixed as integers, which makes the same spec a
    slowly varying profile on any refinement of the base torus.
    """

    modes: tuple

    def __post_init__(self):
        if not self.modes:
            raise ConfigError("source needs at least one mode")
        seen = set()
        norm = []
        for k, c in self.modes:
            k = tuple(int(v) for v in k)
            if len(c) != len(k):
                raise ConfigError(f"mode {k} needs {len(k)} amplitude components")
            if not any(k):
                raise ConfigError("zero mode has no divergence; drop it")
            if k in seen:
                raise ConfigError(f"duplicate mode {k}")
            seen.add(k)
            norm.append((k, tuple(complex(v) for v in c)))
        object.__setattr__(self, "modes", tuple(norm))

    @property
    def dimension(self):
        return len(self.modes[0][0])

    def mode_data(self, grid):
        """Per-mode (eta, amplitude, plane wave) on a concrete torus."""
        d = grid.ndim
        if self.dimension != d:
            raise ConfigError("source dimension does not match the grid")
        out = []
        for k, c in self.modes:
            if any(2 * abs(kj) >= s for kj, s in zip(k, grid.shape)):
                raise ConfigError(f"mode {k} is not below the Nyquist band on {grid.shape}")
            eta = 2 * np.pi * np.array(k, dtype=float) / np.array(grid.shape, dtype=float)
            phase = np.zeros(grid.shape)
            for j in range(d):
                phase = phase + eta[j] * grid.sites[j]
            out.append((eta, np.array(c, dtype=complex), np.exp(1j * phase)))
        return out

    def realize(self, grid):
        d = grid.ndim
        f = np.zeros((d,) + grid.shape)
        for _, c, wave in self.mode_data(grid):
            f += (c.reshape((d,) + (1,) * d) * wave).real
        return f


def _as_source_field(source, grid):
    if isinstance(source, SourceSpec):
        return source.realize(grid)
    f = np.asarray(source, dtype=float)
    if f.shape != (grid.ndim,) + grid.shape:
        raise ConfigError(f"source field shape {f.shape} does not fit the grid")
    return f


def _solve_divergence_form(a, f, grid, *, tol, maxiter):
    """Batched mean-zero solves of -div(a grad u) = div f.

    ``a`` carries a leading member axis matching f's batch axis (or
    length 1 to share one realization across the batch).
    """
    batch = f.shape[0]
    rhs = divergence(f, grid)
    flat = (batch, grid.nsites)

    def apply_a(u):
        field = u.reshape((batch,) + grid.shape)
        return -divergence(coeff_apply(a, gradient(field, grid), grid), grid).reshape(flat)

    if grid.nsites <= 512:
        pmat = poisson_site_matrix(grid)

        def precond(r):
            return r @ pmat.T
    else:
        def precond(r):
            return solve_poisson(r.reshape((batch,) + grid.shape), grid,
                                 on_zero_mode="project").reshape(flat)

    def project(v):
        return v - v.mean(axis=1, keepdims=True)

    u, info = conjugate_gradient(apply_a, rhs.reshape(flat), inner=flat_inner,
                                 precond=precond, project=project,
                                 tol=tol, maxiter=maxiter)
    return u.reshape((batch,) + grid.shape), info


@dataclass(frozen=True)
class QuenchedSolution:
    grad: np.ndarray
    potential: np.ndarray
    residual: float
    iterations: int
    energy_gap: float


def solve_quenched(field, source, *, tol=1e-11, maxiter=4000):
    """One realization of -div(a grad u) = div f in the mean-zero gauge.

    Returns the gradient together with the potential and the relative
    energy-identity gap |<grad u, a grad u> + <f, grad u>| / energy.
    """
    grid = field.grid
    f = _as_source_field(source, grid)
    u, info = _solve_divergence_form(field.a[None], f[None], grid,
                                     tol=tol, maxiter=maxiter)
    u = u[0]
    g = gradient(u, grid)
    energy = float(np.sum(g * coeff_apply(field.a, g, grid)))
    pairing = float(np.sum(f * g))
    gap = abs(energy + pairing) / max(abs(energy), 1e-300)
    return QuenchedSolution(grad=g, potential=u,
                            residual=float(np.max(info["residual"])),
                            iterations=info["iterations"], energy_gap=gap)


@dataclass(frozen=True)
class AveragedSolution:
    mean_grad: np.ndarray
    stderr: float
    member_grads: np.ndarray
    residual: float
    iterations: int


def ensemble_average_solution(ensemble, source, *, tol=1e-11, maxiter=4000):
    """E[grad u] over the ensemble, solving every member in one batch.

    ``stderr`` is the RMS Monte Carlo error of the gradient mean (zero on
    exact and translate ensembles, where the average is a weighted sum).
    """
    grid = ensemble.grid
    f = _as_source_field(source, grid)
    fb = np.broadcast_to(f, (ensemble.n,) + f.shape)
    u, info = _solve_divergence_form(ensemble.coefficients(), fb, grid,
                                     tol=tol, maxiter=maxiter)
    grads = gradient(u, grid)
    mean = ensemble.expect(grads)
    if ensemble.kind == "mc":
        flucts = grads - mean
        if ensemble.antithetic:
            flucts = 0.5 * (flucts[0::2] + flucts[1::2])
        m = flucts.shape[0]
        var = np.mean(flucts**2) * m / max(m - 1, 1)
        stderr = math.sqrt(var / m)
    else:
        stderr = 0.0
    return AveragedSolution(mean_grad=mean, stderr=stderr, member_grads=grads,
                            residual=float(np.max(info["residual"])),
                            iterations=info["iterations"])


@dataclass(frozen=True)
class ProxySolution:
    """Spectral solution of the truncated effective hierarchy.

    Holds the per-order mode potentials; field assembly is exact, so the
    only error in the proxy is the tensors' own uncertainty.
    """

    grid: object
    ell: int
    mode_coeffs: tuple   # ((eta, uhats tuple, wave), ...)

    def grad(self):
        return self.derivative(1)

    def derivative(self, n):
        """n-fold forward gradient of the proxy, shape (d,)*n + lattice shape."""
        d = self.grid.ndim
        out = np.zeros((d,) * n + self.grid.shape)
        for eta, uhats, wave in self.mode_coeffs:
            dv = np.exp(1j * eta) - 1.0
            tensor = np.ones((), dtype=complex)
            for _ in range(n):
                tensor = np.multiply.outer(tensor, dv)
            out += (sum(uhats) * tensor.reshape((d,) * n + (1,) * d) * wave).real
        return out


def homogenized_proxy(tensors, source, grid, ell):
    """Truncated effective expansion, solved exactly mode by mode.

    Order n satisfies q1 uhat_n = -sum_{k=2..n} q_k uhat_{n+1-k}, where
    q_k contracts the order-k tensor against the forward-difference
    symbol; the extra lattice derivatives carry the scale factors
    implicitly, so no explicit scale-ratio powers appear.
    """
    if not isinstance(source, SourceSpec):
        raise ConfigError("the effective proxy needs a band-limited source")
    if ell < 1:
        raise ConfigError("expansion order must be >= 1")
    for n in range(1, ell + 1):
        tensors.tensor(n)
    coeffs = []
    for eta, c, wave in source.mode_data(grid):
        dv = np.exp(1j * eta) - 1.0
        q = [tensors.multiplier(n, dv) for n in range(1, ell + 1)]
        if q[0] == 0:
            raise ConfigError("leading multiplier vanished on a nonzero mode")
        dhf = complex(np.conj(dv) @ c)
        uhats = [-dhf / q[0]]
        for n in range(2, ell + 1):
            acc = sum(q[k - 1] * uhats[n - k] for k in range(2, n + 1))
            uhats.append(-acc / q[0])
        coeffs.append((eta, tuple(uhats), wave))
    return ProxySolution(grid=grid, ell=ell, mode_coeffs=tuple(coeffs))


@dataclass(frozen=True)
class RateFit:
    order: float
    interval: tuple
    scales: tuple
    errors: tuple
    stderrs: tuple
    exact: bool = False
    noise_floor: bool = False


def error_rate(factory, tensors, source, scales, ell, *, tol=1e-11, maxiter=4000):
    """Fitted convergence order of E[grad u] against the order-ell proxy.

    ``factory(m)`` returns the ensemble on the m-fold refined torus; the
    scale ratio is 1/m and the m values must be geometric.  Errors are
    relative RMS over sites and components.  Errors at solver precision
    on every scale short-circuit to an exact fit; Monte Carlo noise above
    half the signal on most scales flags a noise floor instead.
    """
    scales = tuple(int(m) for m in scales)
    if len(scales) < 4 or len(set(scales)) != len(scales):
        raise ConfigError("need at least four distinct scale factors")
    ratios = [scales[i + 1] / scales[i] for i in range(len(scales) - 1)]
    if max(ratios) - min(ratios) > 1e-9:
        raise ConfigError("scale factors must be geometric")
    errors, stderrs = [], []
    for m in scales:
        ens = factory(m)
        avg = ensemble_average_solution(ens, source, tol=tol, maxiter=maxiter)
        proxy = homogenized_proxy(tensors, source, ens.grid, ell).grad()
        ref = math.sqrt(np.mean(proxy**2))
        errors.append(math.sqrt(np.mean((avg.mean_grad - proxy) ** 2)) / ref)
        stderrs.append(avg.stderr / ref)
    errors_arr = np.array(errors)
    if np.all(errors_arr <= 1e-12):
        return RateFit(order=math.inf, interval=(math.inf, math.inf), scales=scales,
                       errors=tuple(errors), stderrs=tuple(stderrs), exact=True)
    if np.count_nonzero(np.array(stderrs) > 0.5 * errors_arr) > len(scales) // 2:
        return RateFit(order=math.nan, interval=(math.nan, math.nan), scales=scales,
                       errors=tuple(errors), stderrs=tuple(stderrs), noise_floor=True)
    eps = np.array([1.0 / m for m in scales])
    slope, _, var = _wls_line(np.log(eps), np.log(errors_arr), np.ones_like(eps))
    half = 2.0 * math.sqrt(max(var, 0.0))
    return RateFit(order=float(slope), interval=(float(slope - half), float(slope + half)),
                   scales=scales, errors=tuple(errors), stderrs=tuple(stderrs))


def _needed_directions(d, ell):
    """Integer directions whose hierarchies polarize psi^n for n <= ell."""
    out = set()
    for n in range(1, ell + 1):
        for alpha in itertools.combinations_with_replacement(range(d), n):
            for bits in range(1, 1 << n):
                counts = [0] * d
                for i in range(n):
                    if bits >> i & 1:
                        counts[alpha[i]] += 1
                out.add(tuple(counts))
    return sorted(out)


def corrector_stacks(ensemble, mu, ell, **kwargs):
    """Corrector stacks on every direction the two-scale sum polarizes."""
    from .corrector import solve_massive_corrector

    out = {}
    for key in _needed_directions(ensemble.grid.ndim, ell):
        out[key] = solve_massive_corrector(ensemble, mu,
                                           np.array(key, dtype=float), ell, **kwargs)
    return out


def _psi_tensor(stacks, n, d):
    """Symmetrized psi^n with its n direction slots, from contracted stacks.

    The hierarchy is n-homogeneous in the direction, so the multilinear
    form is recovered by signed sums over subset directions.
    """
    probe = next(iter(stacks.values()))
    base = probe.psi(1).shape          # (members, d, *shape)
    out = np.zeros((base[0],) + (d,) * n + base[1:])
    fact = math.factorial(n)
    for alpha in itertools.combinations_with_replacement(range(d), n):
        val = 0.0
        for bits in range(1, 1 << n):
            counts = [0] * d
            for i in range(n):
                if bits >> i & 1:
                    counts[alpha[i]] += 1
            key = tuple(counts)
            if key not in stacks:
                raise ConfigError(f"missing corrector stack for direction {key}")
            sign = -1.0 if (n - bin(bits).count("1")) % 2 else 1.0
            val = val + sign * stacks[key].psi(n)
        val = val / fact
        for perm in set(itertools.permutations(alpha)):
            out[(slice(None),) + perm] = val
    return out


@dataclass(frozen=True)
class TwoScaleReport:
    absolute: float
    relative: float
    reference: float
    ell: int
    mu: float


def two_scale_residual(ensemble, stacks, tensors, source, ell, *, tol=1e-11,
                       maxiter=4000):
    """RMS gap between quenched gradients and the two-scale reconstruction.

    The reconstruction contracts psi^n against the n-fold derivatives of
    the order-ell proxy; the squared residual is averaged over sites,
    components, and the ensemble.  ``stacks`` maps integer direction
    tuples to corrector stacks (see ``corrector_stacks``).
    """
    grid = ensemble.grid
    d = grid.ndim
    avg = ensemble_average_solution(ensemble, source, tol=tol, maxiter=maxiter)
    proxy = homogenized_proxy(tensors, source, grid, ell)
    recon = np.zeros_like(avg.member_grads)
    for n in range(1, ell + 1):
        psi = _psi_tensor(stacks, n, d)
        deriv = proxy.derivative(n)
        slots, sp = "abc"[:n], "uvw"[:d]
        recon += np.einsum(f"m{slots}i{sp},{slots}{sp}->mi{sp}", psi, deriv)
    rest = tuple(range(1, avg.member_grads.ndim))
    wmean = float(ensemble.expect(np.sum((avg.member_grads - recon) ** 2, axis=rest)))
    absolute = math.sqrt(wmean / (d * grid.nsites))
    refsq = float(ensemble.expect(np.sum(avg.member_grads**2, axis=rest)))
    ref = math.sqrt(refsq / (d * grid.nsites))
    mu = next(iter(stacks.values())).mu
    return TwoScaleReport(absolute=absolute, relative=absolute / max(ref, 1e-300),
                          reference=ref, ell=ell, mu=mu)


@dataclass(frozen=True)
class SchurReport:
    equation_residual: float
    fluctuation_residual: float
    modes: tuple
    symbol_imag: float


def verify_schur(ensemble, source, *, tol=1e-12, maxiter=4000):
    """Check both halves of the exact effective representation.

    (i) The ensemble-averaged gradient solves the effective equation whose
    multiplier is the exact symbol, bin by bin over the whole frequency
    grid: on the source band (and its mirror) the symbol is solved
    exactly; off the band the multiplier is charged at its ellipticity
    envelope (1 + delta)|D|^2, an upper bound, so any leakage of the
    averaged gradient out of the band still counts against the residual.
    (ii) Per member, the gradient fluctuation equals the symbol solver's
    corrector response driven by the averaged mode amplitudes, summed
    over the band.  Both residuals are relative and vanish up to solver
    precision on exact ensembles.
    """
    grid = ensemble.grid
    d = grid.ndim
    if not isinstance(source, SourceSpec):
        raise ConfigError("verification needs a band-limited source")
    f = source.realize(grid)
    avg = ensemble_average_solution(ensemble, source, tol=tol, maxiter=maxiter)

    spatial = tuple(range(-d, 0))
    fhat = np.fft.fftn(f, axes=spatial)
    ghat = np.fft.fftn(avg.mean_grad, axes=spatial)
    dsym = grid.forward_symbol
    d2 = np.sum(np.abs(dsym) ** 2, axis=0)
    uhat = np.sum(np.conj(dsym) * ghat, axis=0) / np.where(d2 > 0, d2, 1.0)
    dhf = np.sum(np.conj(dsym) * fhat, axis=0)
    eq = (1.0 + ensemble.delta) * d2 * np.abs(uhat)

    pred_fluct = np.zeros_like(avg.member_grads)
    imag = 0.0
    for (k, _), (eta, c, wave) in zip(source.modes, source.mode_data(grid)):
        sym = symbol_exact(ensemble, eta, tol=tol)
        imag = max(imag, sym.imag_residual)
        dv = np.exp(1j * eta) - 1.0
        q = complex(np.conj(dv) @ sym.matrix.astype(complex) @ dv)
        kbin = tuple(int(ki % s) for ki, s in zip(k, grid.shape))
        mbin = tuple(int(-ki % s) for ki, s in zip(k, grid.shape))
        eq[kbin] = abs(q * uhat[kbin] + dhf[kbin])
        eq[mbin] = abs(np.conj(q) * uhat[mbin] + dhf[mbin])
        vhat = -complex(np.conj(dv) @ c) / q
        combo = np.einsum("j,jni...->ni...", vhat * dv, sym.psi)
        pred_fluct += (combo * wave).real
    eq_res = float(np.linalg.norm(eq.ravel()) / np.linalg.norm(dhf.ravel()))

    gap = avg.member_grads - avg.mean_grad[None] - pred_fluct
    rest = tuple(range(1, gap.ndim))
    num = math.sqrt(float(ensemble.expect(np.sum(gap**2, axis=rest))))
    den = math.sqrt(float(ensemble.expect(np.sum(avg.member_grads**2, axis=rest))))
    fl_res = num / max(den, 1e-300)
    return SchurReport(equation_residual=eq_res, fluctuation_residual=fl_res,
                       modes=tuple(k for k, _ in source.modes), symbol_imag=imag)
