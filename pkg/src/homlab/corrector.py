"""Corrector hierarchy with a mass term, effective tensors, and weak correctors.

The hierarchy is solved per ensemble member with the massive operator
``mu - div(a grad)``; expectations only enter through the mean-free
projection on the right-hand side and through the final flux averages.
Effective tensors come out of two independent routes (massive solves
extrapolated in the mass, finite differences of the exact symbol) so the
tests can compare them.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .field import Ensemble
from .grid import LatticeGrid
from .lattice import coeff_apply, divergence, gradient, solve_poisson
from .series import symbol_exact
from .solvers import conjugate_gradient, flat_inner

DEFAULT_MASSES = (1e-1, 3e-2, 1e-2, 3e-3, 1e-3)


def _direction(e, d):
    v = np.asarray(e, dtype=float).reshape(-1)
    if v.shape != (d,):
        raise ConfigError(f"direction must have {d} components, got shape {v.shape}")
    if not np.any(v):
        raise ConfigError("direction must be nonzero")
    return v


def _broadcast_direction(v, grid):
    # (d,) -> (1, d, 1, ..., 1) so it multiplies member-stacked scalar fields
    return v.reshape((1, grid.ndim) + (1,) * grid.ndim)


@dataclass(frozen=True)
class CorrectorStack:
    """Member-stacked correctors phi^1..phi^n for one direction and one mass."""

    ensemble: Ensemble
    mu: float
    direction: np.ndarray
    phis: tuple          # each (members, *shape)
    psis: tuple          # each (members, d, *shape), psi^n = grad phi^n + phi^{n-1} e
    residuals: tuple
    iterations: tuple

    @property
    def order(self):
        return len(self.phis)

    def phi(self, n):
        return self.phis[n - 1]

    def psi(self, n):
        return self.psis[n - 1]


def solve_massive_corrector(ensemble, mu, e, n_max, *, tol=1e-11, maxiter=4000):
    """Solve the corrector hierarchy up to order n_max at mass mu > 0.

    Order n solves (mu - div a grad) phi^n = div(a phi^{n-1} e)
    + e . Pperp[a psi^{n-1}] with phi^0 = 1, phi^{-1} = 0, and recenters
    the ensemble mean of phi^n afterwards.  Members are independent
    systems sharing one batched solve.
    """
    if mu <= 0:
        raise ConfigError("mass must be positive")
    grid = ensemble.grid
    v = _direction(e, grid.ndim)
    evec = _broadcast_direction(v, grid)
    a = ensemble.coefficients()
    nmem = ensemble.n
    flat = (nmem, grid.nsites)

    def apply_a(u):
        field = u.reshape((nmem,) + grid.shape)
        flux = coeff_apply(a, gradient(field, grid), grid)
        return (mu * field - divergence(flux, grid)).reshape(flat)

    def precond(r):
        return solve_poisson(r.reshape((nmem,) + grid.shape), grid, mass=mu).reshape(flat)

    phi_prev2 = np.zeros((nmem,) + grid.shape)
    phi_prev = np.ones((nmem,) + grid.shape)
    phis, psis, residuals, iterations = [], [], [], []
    for _ in range(n_max):
        psi_prev = gradient(phi_prev, grid) + phi_prev2[:, None] * evec
        flux_prev = ensemble.perp(coeff_apply(a, psi_prev, grid))
        rhs = divergence(coeff_apply(a, phi_prev[:, None] * evec, grid), grid)
        rhs = rhs + np.einsum("j,njs->ns", v, flux_prev.reshape((nmem, grid.ndim, -1))).reshape(rhs.shape)
        sol, info = conjugate_gradient(
            apply_a, rhs.reshape(flat), inner=flat_inner, precond=precond,
            tol=tol, maxiter=maxiter,
        )
        phi = sol.reshape((nmem,) + grid.shape)
        phi = phi - ensemble.expect(phi)
        psi = gradient(phi, grid) + phi_prev[:, None] * evec
        phis.append(phi)
        psis.append(psi)
        residuals.append(float(np.max(info["residual"])))
        iterations.append(info["iterations"])
        phi_prev2, phi_prev = phi_prev, phi
    return CorrectorStack(
        ensemble=ensemble, mu=float(mu), direction=v,
        phis=tuple(phis), psis=tuple(psis),
        residuals=tuple(residuals), iterations=tuple(iterations),
    )


def homogenized_tensor(stack, n):
    """Direction-contracted effective tensor column E[a psi^n], a d-vector.

    The site average is included; for n = 1 this is the full effective
    matrix applied to the stack direction.
    """
    ensemble = stack.ensemble
    flux = coeff_apply(ensemble.coefficients(), stack.psi(n), ensemble.grid)
    mean = ensemble.expect(flux)
    return mean.reshape(ensemble.grid.ndim, -1).mean(axis=1)


def contracted_form(stack, n):
    """Scalar form e . abar^n(e,...,e) e for the stack's own direction."""
    return float(stack.direction @ homogenized_tensor(stack, n))


@dataclass(frozen=True)
class ExtrapolationResult:
    value: float
    error: float
    order: float
    flagged: bool
    extrapolants: tuple

    def __post_init__(self):
        if self.error < 0:
            raise ConfigError("extrapolation error must be nonnegative")


def extrapolate_mu(mus, values):
    """First-order Richardson in the mass on a near-geometric ladder.

    Consecutive value pairs are extrapolated linearly to mu = 0 using the
    actual masses, which is exact on affine-in-mu data for any spacing;
    the reported error is the last extrapolant increment.  The empirical
    convergence order is fitted from the raw increments as a diagnostic.
    A growing increment tail flags the result and falls back to the final
    value with a widened error bar instead of extrapolating noise.
    """
    mus = np.asarray(mus, dtype=float)
    values = np.asarray(values, dtype=float)
    if mus.ndim != 1 or mus.shape != values.shape or mus.size < 3:
        raise ConfigError("need at least three scalar values on matching masses")
    if np.any(mus <= 0) or np.any(np.diff(mus) >= 0):
        raise ConfigError("masses must be positive and strictly decreasing")
    ratios = mus[1:] / mus[:-1]
    if np.max(ratios) > 0.95 or np.max(ratios) > 2.5 * np.min(ratios):
        raise ConfigError("mass sequence must be roughly geometric")
    inc = np.diff(values)
    scale = np.max(np.abs(values))
    if scale == 0 or np.max(np.abs(inc)) <= 1e-14 * max(scale, 1.0):
        return ExtrapolationResult(float(values[-1]), 0.0, 0.0, False, tuple(values))
    tail = np.abs(inc)
    if np.any(tail[1:] > tail[:-1] * (1 + 1e-9)):
        return ExtrapolationResult(
            float(values[-1]), float(np.max(tail[-2:])), math.nan, True, tuple(values)
        )
    alive = tail > 1e-14 * max(scale, 1.0)
    if np.count_nonzero(alive) >= 2:
        mids = np.sqrt(mus[:-1] * mus[1:])[alive]
        order = float(np.polyfit(np.log(mids), np.log(tail[alive]), 1)[0])
    else:
        order = math.nan
    extr = (mus[:-1] * values[1:] - mus[1:] * values[:-1]) / (mus[:-1] - mus[1:])
    error = float(abs(extr[-1] - extr[-2]))
    return ExtrapolationResult(float(extr[-1]), error, order, False, tuple(extr))


def _polarization_vectors(d, m_max):
    """All nonzero nonnegative integer direction sums a polarization can visit."""
    out = set()
    for m in range(2, m_max + 1):
        for alpha in itertools.combinations_with_replacement(range(d), m):
            for bits in range(1, 1 << m):
                counts = [0] * d
                for i in range(m):
                    if bits >> i & 1:
                        counts[alpha[i]] += 1
                out.add(tuple(counts))
    out.discard((0,) * d)
    return sorted(out)


def _assemble_symmetric(forms, errs, n, d):
    """Polarize the scalar forms q_n(v) into the full symmetric tensor.

    T(v_1..v_m) = (1/m!) sum over nonempty subsets S of (-1)^{m-|S|}
    q(sum_{i in S} v_i), exact for an m-homogeneous form, m = n + 1.
    """
    m = n + 1
    tensor = np.zeros((d,) * m)
    worst = 0.0
    fact = math.factorial(m)
    for alpha in itertools.combinations_with_replacement(range(d), m):
        val = 0.0
        err = 0.0
        for bits in range(1, 1 << m):
            counts = [0] * d
            for i in range(m):
                if bits >> i & 1:
                    counts[alpha[i]] += 1
            key = tuple(counts)
            sign = -1.0 if (m - bin(bits).count("1")) % 2 else 1.0
            val += sign * forms[key]
            err += errs[key]
        val /= fact
        err /= fact
        worst = max(worst, err)
        for perm in set(itertools.permutations(alpha)):
            tensor[perm] = val
    return tensor, worst


@dataclass(frozen=True)
class TensorSet:
    """Fully symmetric effective tensors abar^n, n+1 slots each."""

    dimension: int
    orders: dict          # n -> ndarray of shape (d,) * (n + 1)
    errors: dict          # n -> worst-entry uncertainty estimate
    route: str            # "massive" | "symbol"
    mass_info: tuple = ()
    flagged: bool = False

    def tensor(self, n):
        if n not in self.orders:
            raise ConfigError(f"tensor order {n} not computed")
        return self.orders[n]

    def form(self, n, v):
        """Contract every slot with the same real vector."""
        t = self.tensor(n)
        for _ in range(n + 1):
            t = np.tensordot(t, np.asarray(v, dtype=float), axes=([0], [0]))
        return float(t)

    def multiplier(self, n, dvec):
        """Scalar mode multiplier conj(D) . abar^n(D,..,D) D for complex D."""
        t = self.tensor(n).astype(complex)
        dvec = np.asarray(dvec, dtype=complex)
        t = np.tensordot(np.conj(dvec), t, axes=([0], [0]))
        for _ in range(n):
            t = np.tensordot(t, dvec, axes=([0], [0]))
        return complex(t)


def symmetric_tensors(ensemble, n_max, *, mus=DEFAULT_MASSES, tol=1e-11, maxiter=4000):
    """Effective tensors through order n_max from massive corrector solves.

    Each polarization direction gets its own hierarchy per mass; scalar
    forms are extrapolated in the mass and assembled into symmetric
    tensors.  A single mass skips extrapolation and tags the set with it.
    """
    if n_max < 1:
        raise ConfigError("need n_max >= 1")
    grid = ensemble.grid
    d = grid.ndim
    single = np.isscalar(mus)
    mu_list = (float(mus),) if single else tuple(float(m) for m in mus)
    vectors = _polarization_vectors(d, n_max + 1)
    forms = {n: {} for n in range(1, n_max + 1)}
    errs = {n: {} for n in range(1, n_max + 1)}
    flagged = False
    for key in vectors:
        v = np.array(key, dtype=float)
        per_mass = np.empty((len(mu_list), n_max))
        for k, mu in enumerate(mu_list):
            stack = solve_massive_corrector(ensemble, mu, v, n_max, tol=tol, maxiter=maxiter)
            for n in range(1, n_max + 1):
                per_mass[k, n - 1] = contracted_form(stack, n)
        for n in range(1, n_max + 1):
            if single:
                forms[n][key] = float(per_mass[0, n - 1])
                errs[n][key] = 0.0
            else:
                res = extrapolate_mu(mu_list, per_mass[:, n - 1])
                forms[n][key] = res.value
                errs[n][key] = res.error
                flagged = flagged or res.flagged
    orders, errors = {}, {}
    for n in range(1, n_max + 1):
        orders[n], errors[n] = _assemble_symmetric(forms[n], errs[n], n, d)
    return TensorSet(
        dimension=d, orders=orders, errors=errors, route="massive",
        mass_info=mu_list, flagged=flagged,
    )


def _stencil_weights(npts, h, order):
    """Central finite-difference weights for one derivative order.

    Solves the moment system on the symmetric stencil j*h, |j| <= width;
    exact for polynomials of degree < npts.
    """
    width = npts // 2
    nodes = np.arange(-width, width + 1, dtype=float)
    vand = np.vander(nodes, npts, increasing=True).T
    rhs = np.zeros(npts)
    rhs[order] = math.factorial(order)
    return np.linalg.solve(vand, rhs) / h**order


def tensors_from_symbol(source, n_max, *, h=0.05, width=None, tol=1e-11):
    """Effective tensors from radial finite differences of the symbol at 0.

    ``source`` is an ensemble (solved per stencil point) or a callable
    xi -> matrix.  Two stencil widths bracket the truncation error; the
    imaginary residue of each coefficient is folded into the reported
    uncertainty, so parity-breaking content shows up as a wide error bar
    rather than a silent real part.
    """
    if n_max < 1:
        raise ConfigError("need n_max >= 1")
    if not isinstance(source, Ensemble):
        raise ConfigError("source must be an Ensemble; use tensors_from_callable otherwise")
    d = source.grid.ndim

    def symbol(xi):
        return symbol_exact(source, xi, tol=tol).matrix

    return _tensors_from_callable(symbol, d, n_max, h=h, width=width)


def tensors_from_callable(symbol, dimension, n_max, *, h=0.05, width=None):
    """Same as tensors_from_symbol for an explicit xi -> matrix callable."""
    return _tensors_from_callable(symbol, dimension, n_max, h=h, width=width)


def _tensors_from_callable(symbol, d, n_max, *, h, width):
    max_order = n_max - 1
    w_small = width if width is not None else max(1, (max_order + 2) // 2)
    w_big = w_small + 1
    npts_small, npts_big = 2 * w_small + 1, 2 * w_big + 1
    vectors = _polarization_vectors(d, n_max + 1)
    forms = {n: {} for n in range(1, n_max + 1)}
    errs = {n: {} for n in range(1, n_max + 1)}
    for key in vectors:
        v = np.array(key, dtype=float)
        samples = np.empty(2 * w_big + 1, dtype=complex)
        for j in range(-w_big, w_big + 1):
            mat = np.asarray(symbol(j * h * v), dtype=complex)
            samples[j + w_big] = v @ mat @ v
        for n in range(1, n_max + 1):
            order = n - 1
            vals = []
            for npts in (npts_small, npts_big):
                if npts < order + 1:
                    continue
                wts = _stencil_weights(npts, h, order)
                lo = w_big - npts // 2
                c = np.dot(wts, samples[lo: lo + npts]) / math.factorial(order)
                vals.append((-1j) ** order * c)
            best = vals[-1]
            trunc = abs(vals[-1] - vals[0]) if len(vals) > 1 else 0.0
            forms[n][key] = float(best.real)
            errs[n][key] = trunc + abs(best.imag)
    orders, errors = {}, {}
    for n in range(1, n_max + 1):
        orders[n], errors[n] = _assemble_symmetric(forms[n], errs[n], n, d)
    return TensorSet(
        dimension=d, orders=orders, errors=errors, route="symbol",
        mass_info=(h, w_small, w_big),
    )


@dataclass(frozen=True)
class WeakEstimate:
    value: float
    stderr: float
    order: int
    offset: tuple
    radius: int
    terms: int
    window: float
    members: int


def _window_polynomial(grid, x, e, n, window, flat):
    rw = window * min(grid.shape)
    sites = grid.sites
    off = grid.min_image(sites - np.asarray(x, dtype=float).reshape((grid.ndim,) + (1,) * grid.ndim))
    s = np.einsum("j,j...->...", e, off)
    rho = np.sqrt(np.sum(off * off, axis=0))
    cut = flat * rw
    taper = np.ones_like(rho)
    band = (rho > cut) & (rho < rw)
    taper[band] = np.cos(0.5 * np.pi * (rho[band] - cut) / (rw - cut)) ** 2
    taper[rho >= rw] = 0.0
    return s**n / math.factorial(n) * taper, rw


def _chain_terms(bfields, weights, grad_p, grid, delta, terms, means=None):
    """Neumann evaluation of the projected inverse applied to div(Pperp b grad p).

    Returns the per-member value fields and the per-stage mean fields that
    were subtracted, so a conditional batch can replay them verbatim.
    """
    record = means is None
    used = [] if record else None

    def stage_mean(k, field):
        if record:
            m = np.einsum("n,n...->...", weights, field)
            used.append(m)
            return m
        return means[k]

    g = bfields[:, None] * grad_p
    g = g - stage_mean(0, g)
    term = delta * solve_poisson(divergence(g, grid), grid, on_zero_mode="project")
    total = term.copy()
    for k in range(1, terms):
        g = bfields[:, None] * gradient(term, grid)
        g = g - stage_mean(k, g)
        term = delta * solve_poisson(divergence(g, grid), grid, on_zero_mode="project")
        total += term
    return total, (used if record else means)


def weak_corrector(ensemble, n, e, x, r0, *, window=0.25, flat=0.8,
                   terms=None, resamples=None, seed=0):
    """Conditional expectation of the weak n-th corrector at offset x.

    The corrector is probed against the windowed polynomial (e.(z-x))^n/n!
    and the expectation is conditioned on the coefficients inside the sup
    ball of radius r0 at the origin (frozen to the first member's values).
    Exact ensembles condition by exact subgroup averaging; sampled
    ensembles freeze the ball and redraw the outside, replaying the
    unconditional projection means, with the first chain term as an
    exactly known control variate.
    """
    grid = ensemble.grid
    d = grid.ndim
    if not ensemble.scalar:
        raise ConfigError("weak correctors support scalar coefficients only")
    if n < 1:
        raise ConfigError("corrector order must be >= 1")
    ev = _direction(e, d)
    x = np.asarray(x, dtype=int).reshape(d)
    dist = float(np.max(np.abs(grid.min_image(x.astype(float)))))
    p, rw = _window_polynomial(grid, x, ev, n, window, flat)
    if dist + r0 > flat * rw:
        raise ConfigError(
            f"conditioning ball (|x|={dist:g} + r0={r0:g}) leaves the flat window region {flat * rw:g}"
        )
    grad_p = gradient(p, grid)
    delta = ensemble.delta
    if terms is None:
        terms = min(40, max(4, math.ceil(math.log(1e-10) / math.log(max(delta, 1e-3)))))
    ball = grid.torus_dist_inf(grid.sites, np.zeros((d,) + (1,) * d), axis=0) <= r0
    idx = tuple(int(c) % s for c, s in zip(x, grid.shape))

    if ensemble.kind != "mc":
        vals, _ = _chain_terms(ensemble.b, ensemble.weights, grad_p, grid, delta, terms)
        frozen = ensemble.b[0][ball]
        match = np.all(np.abs(ensemble.b[:, ball] - frozen) <= 1e-12, axis=1)
        wsel = ensemble.weights[match]
        est = float(np.dot(wsel, vals[match][(slice(None),) + idx]) / wsel.sum())
        return WeakEstimate(est, 0.0, n, tuple(int(c) for c in x), int(r0),
                            terms, rw, int(match.sum()))

    if ensemble.spec is None:
        raise ConfigError("sampled conditioning needs the generating spec on the ensemble")
    from .field import monte_carlo

    _, means = _chain_terms(ensemble.b, ensemble.weights, grad_p, grid, delta, terms)
    frozen = ensemble.b[0].copy()
    nre = resamples if resamples is not None else ensemble.n
    fresh = monte_carlo(ensemble.spec, grid, nre, seed=seed,
                        antithetic=ensemble.antithetic)
    bcond = fresh.b.copy()
    bcond[:, ball] = frozen[ball]
    vals, _ = _chain_terms(bcond, fresh.weights, grad_p, grid, delta, terms, means=means)

    # first chain term, exactly conditioned: outside contributions average out
    bmean = float(np.dot(ensemble.weights,
                         ensemble.b.reshape(ensemble.n, -1).mean(axis=1)))
    src = np.zeros_like(frozen)
    src[ball] = frozen[ball] - bmean
    cv_exact = delta * solve_poisson(divergence(src * grad_p, grid), grid,
                                     on_zero_mode="project")[idx]
    g1 = bcond[:, None] * grad_p - means[0]
    first = delta * solve_poisson(divergence(g1, grid), grid, on_zero_mode="project")
    rest = vals[(slice(None),) + idx] - first[(slice(None),) + idx]
    if fresh.antithetic:
        rest = 0.5 * (rest[0::2] + rest[1::2])
    est = float(cv_exact + rest.mean())
    stderr = float(rest.std(ddof=1) / math.sqrt(rest.size)) if rest.size > 1 else math.inf
    return WeakEstimate(est, stderr, n, tuple(int(c) for c in x), int(r0),
                        terms, rw, int(nre))


def weak_corrector_profile(ensemble, n, e, ratios, r0, **kwargs):
    """Growth table: weak corrector estimates along the direction axis.

    Offsets are placed at x = round(ratio * r0) times the dominant axis of
    the direction; rows are (|x|/r0, estimate).
    """
    ev = _direction(e, ensemble.grid.ndim)
    axis = int(np.argmax(np.abs(ev)))
    rows = []
    for ratio in ratios:
        x = np.zeros(ensemble.grid.ndim, dtype=int)
        x[axis] = int(round(ratio * r0))
        est = weak_corrector(ensemble, n, ev, x, r0, **kwargs)
        rows.append((x[axis] / r0, est))
    return rows
