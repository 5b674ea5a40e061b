"""Iterative solvers with caller-supplied inner products."""

import numpy as np

from .errors import ConvergenceError


def conjugate_gradient(apply_a, rhs, *, inner, precond=None, project=None,
                       tol=1e-11, maxiter=2000, x0=None):
    """Batched preconditioned conjugate gradient.

    ``rhs`` has shape (batch, n); the rows are independent systems sharing
    the operator.  ``apply_a`` maps (batch, n) to (batch, n) and must be
    Hermitian nonnegative in ``inner``, which maps two such arrays to a
    real (batch,) vector of pairings.  ``project``, if given, is applied
    to residual-like quantities to hold the iterates inside the range of
    a singular but consistent operator.  Convergence is per row, on the
    true residual relative to |rhs| (rows with zero rhs are left at zero).

    Returns (x, info) with info carrying per-row residuals and the
    iteration count; raises ConvergenceError when the budget runs out.
    """
    b = np.asarray(rhs)
    if project is not None:
        b = project(b)
    if x0 is None:
        x = np.zeros_like(b)
        r = b.copy()
    else:
        x = np.array(x0, copy=True)
        r = b - apply_a(x)
        if project is not None:
            r = project(r)
    bnorm = np.sqrt(np.maximum(inner(b, b), 0.0))
    scale = np.where(bnorm > 0.0, bnorm, 1.0)

    z = precond(r) if precond is not None else r
    if project is not None:
        z = project(z)
    p = z.copy()
    rz = inner(r, z)

    res = np.sqrt(np.maximum(inner(r, r), 0.0)) / scale
    for it in range(maxiter):
        active = res > tol
        if not active.any():
            return x, {"iterations": it, "residual": res, "converged": True}
        ap = apply_a(p)
        pap = inner(p, ap)
        safe = np.where(active & (pap > 0.0), pap, 1.0)
        alpha = np.where(active & (pap > 0.0), rz / safe, 0.0)
        x = x + alpha[:, None] * p
        r = r - alpha[:, None] * ap
        z = precond(r) if precond is not None else r
        if project is not None:
            z = project(z)
        rz_new = inner(r, z)
        beta = np.where(active & (rz > 0.0), rz_new / np.where(rz > 0.0, rz, 1.0), 0.0)
        p = z + beta[:, None] * p
        rz = rz_new
        res = np.sqrt(np.maximum(inner(r, r), 0.0)) / scale

    raise ConvergenceError(
        f"conjugate gradient: residual {res.max():.3e} after {maxiter} iterations",
        residual=res, iterations=maxiter)


def flat_inner(x, y):
    """Plain unweighted pairing sum(conj(x)*y).real per row."""
    return np.einsum("bi,bi->b", np.conj(x), y).real


def power_iteration(matrix, *, tol=1e-6, maxiter=1000, seed=7):
    """Largest singular value of a dense matrix by iterating M^H M.

    Returns (value, iterations).  Raises ConvergenceError with the partial
    estimate attached when the budget is exhausted.
    """
    m = np.asarray(matrix)
    if m.size == 0 or not np.any(m):
        return 0.0, 0
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(m.shape[1])
    if np.iscomplexobj(m):
        v = v + 1j * rng.standard_normal(m.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for it in range(1, maxiter + 1):
        w = m @ v
        u = np.conj(m.T) @ w
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0, it
        # |M^H M v| approximates sigma^2 for unit v
        new = float(np.sqrt(nu))
        v = u / nu
        if abs(new - sigma) <= tol * max(new, 1e-300):
            return new, it
        sigma = new
    err = ConvergenceError(
        f"power iteration: no convergence in {maxiter} steps", iterations=maxiter)
    err.partial = sigma
    raise err
