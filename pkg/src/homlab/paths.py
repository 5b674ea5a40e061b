"""Path combinatorics behind the expansion terms.

The order-n term is a sum over chains of n+1 sites.  Coarsening the
chain to a sublattice of spacing R splits it into paths that can be cut
into two distant halves (reducible) and paths that cannot; under a law
whose dependence range stays below R the reducible class contributes
nothing, and this module makes that checkable: classification, the
quotient graph whose degree structure certifies the surviving paths, and
term sums restricted to either class on exactly enumerable laws.
"""

import itertools
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ConfigError
from .grid import LatticeGrid
from .lattice import apply_grad_projection
from .series import _b_apply, _require_centered
from .util import compensated_sum, pmap

__all__ = ["PathRecord", "Classification", "QuotientGraph", "classify",
           "quotient_graph", "enumerate_paths", "random_irreducible_paths",
           "restricted_term_sum"]


@dataclass(frozen=True)
class PathRecord:
    """A coarse-grained chain: n+1 points on the R-sublattice of a torus.

    Points are stored reduced modulo the torus; every coordinate must be
    a multiple of the coarse scale, which in turn must divide every side.
    """

    grid: LatticeGrid
    coarse: int
    points: np.ndarray

    def __post_init__(self):
        r = int(self.coarse)
        if r < 1 or any(s % r for s in self.grid.shape):
            raise ConfigError(f"coarse scale {r} must divide sides {self.grid.shape}")
        pts = np.asarray(self.points, dtype=int)
        if pts.ndim != 2 or pts.shape[1] != self.grid.ndim or pts.shape[0] < 2:
            raise ConfigError("need at least two points of dimension "
                              f"{self.grid.ndim}, got shape {pts.shape}")
        pts = np.mod(pts, np.array(self.grid.shape))
        if np.any(pts % r):
            raise ConfigError("points must lie on the coarse sublattice")
        pts.setflags(write=False)
        object.__setattr__(self, "coarse", r)
        object.__setattr__(self, "points", pts)

    @property
    def n(self):
        return self.points.shape[0] - 1

    def reversed(self):
        return PathRecord(self.grid, self.coarse, self.points[::-1])

    def translated(self, shift):
        return PathRecord(self.grid, self.coarse,
                          self.points + np.asarray(shift, dtype=int))


@dataclass(frozen=True)
class Classification:
    """Reducible with its smallest cut index, or irreducible (cut None)."""

    reducible: bool
    cut: int = None


def _pair_dists(record):
    pts = record.points
    return record.grid.torus_dist_inf(pts[:, None, :], pts[None, :, :])


def classify(record, coarse=None):
    """Split test at every cut index; smallest separating cut wins.

    A cut at j separates when every early point (index <= j) is farther
    than the coarse scale from every late point, in the torus max norm.
    The defining condition is symmetric under path reversal and invariant
    under translation.  For single-step paths the test degenerates to a
    plain distance threshold between the two endpoints.
    """
    r = record.coarse if coarse is None else int(coarse)
    dist = _pair_dists(record)
    for j in range(record.n):
        if dist[: j + 1, j + 1:].min() > r:
            return Classification(True, j)
    return Classification(False)


@dataclass(frozen=True)
class QuotientGraph:
    """Point classes chained by near-contact, with the step multigraph.

    ``members`` lists point indices per vertex; ``edges`` maps vertex
    pairs (u <= v) to step multiplicities, loops included.  The walk
    structure forces odd degree at the endpoint classes (when they
    differ) and even degree elsewhere; ``separation`` records whether the
    endpoints sit farther apart than 2*R*n, the hypothesis under which
    three edge-disjoint connecting trails are guaranteed.  ``trails``
    carries three such trails as vertex sequences whenever the flow
    allows; otherwise ``report`` says what was found instead.
    """

    members: tuple
    degrees: tuple
    edges: dict
    source: int
    sink: int
    separation: bool
    flow: int = None
    trails: tuple = None
    report: str = None


def _edmonds_karp(nv, caps, s, t):
    """Integral max flow on a small dense capacity matrix."""
    caps = caps.copy()
    flow = np.zeros_like(caps)
    total = 0
    while True:
        prev = np.full(nv, -1)
        prev[s] = s
        queue = [s]
        while queue and prev[t] < 0:
            u = queue.pop(0)
            for v in range(nv):
                if prev[v] < 0 and caps[u, v] > 0:
                    prev[v] = u
                    queue.append(v)
        if prev[t] < 0:
            return total, flow
        v = t
        while v != s:
            u = prev[v]
            caps[u, v] -= 1
            caps[v, u] += 1
            flow[u, v] += 1
            v = u
        total += 1


def _extract_trails(flow, s, t, count):
    # walk the positive net flow; conservation keeps every walk moving
    # until it reaches the sink
    net = np.maximum(flow - flow.T, 0)
    trails = []
    for _ in range(count):
        trail = [s]
        while trail[-1] != t:
            u = trail[-1]
            v = int(np.argmax(net[u] > 0))
            net[u, v] -= 1
            trail.append(v)
        trails.append(tuple(trail))
    return tuple(trails)


def quotient_graph(record, coarse=None, strict=False):
    """Union points within the coarse scale, keep the steps as edges.

    Rejects reducible paths (the quotient is only meaningful on the
    irreducible class) and, with ``strict``, paths whose endpoints are
    not separated by more than 2*R*n.  By default the separation
    hypothesis is only recorded, so near-endpoint examples still get
    their graph; the three-trail certificate is attempted whenever the
    endpoint classes differ.
    """
    r = record.coarse if coarse is None else int(coarse)
    if classify(record, r).reducible:
        raise ConfigError("path is reducible; the quotient graph is defined "
                          "on irreducible paths only")
    dist = _pair_dists(record)
    npts = record.n + 1
    parent = list(range(npts))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(npts):
        for j in range(i + 1, npts):
            if dist[i, j] <= r:
                parent[find(i)] = find(j)
    roots = {}
    labels = [roots.setdefault(find(i), len(roots)) for i in range(npts)]
    nv = len(roots)
    members = tuple(tuple(i for i in range(npts) if labels[i] == v)
                    for v in range(nv))

    separation = bool(dist[0, -1] > 2 * r * record.n)
    if strict and not separation:
        raise ConfigError(f"endpoint distance {dist[0, -1]} is not beyond "
                          f"2*R*n = {2 * r * record.n}")

    edges = Counter()
    degrees = [0] * nv
    for i in range(record.n):
        u, v = labels[i], labels[i + 1]
        edges[(min(u, v), max(u, v))] += 1
        degrees[u] += 1
        degrees[v] += 1
    source, sink = labels[0], labels[-1]

    flow = trails = report = None
    if source == sink:
        report = "endpoint classes coincide; no trails to certify"
    else:
        caps = np.zeros((nv, nv), dtype=int)
        for (u, v), mult in edges.items():
            if u != v:
                caps[u, v] += mult
                caps[v, u] += mult
        flow, assignment = _edmonds_karp(nv, caps, source, sink)
        if flow >= 3:
            trails = _extract_trails(assignment, source, sink, 3)
        else:
            report = (f"max flow between endpoint classes is {flow} < 3 "
                      f"(degrees {tuple(degrees)})")
    return QuotientGraph(members, tuple(degrees), dict(edges), source, sink,
                         separation, flow, trails, report)


class PathStream:
    """Deterministic interior-point enumeration with running class tallies.

    Iterates PathRecord objects in lexicographic interior order;
    ``reducible``/``irreducible`` count the records yielded so far, so
    after exhaustion they tally the whole corpus.
    """

    def __init__(self, grid, coarse, x0, xn, cube, slots):
        self.grid = grid
        self.coarse = coarse
        self.x0 = x0
        self.xn = xn
        self._cube = cube
        self._slots = slots
        self.count = len(cube) ** slots
        self.reducible = 0
        self.irreducible = 0

    def __iter__(self):
        d = self.grid.ndim
        for choice in itertools.product(self._cube, repeat=self._slots):
            interior = (np.array(choice, dtype=int).reshape(-1, d)
                        if self._slots else np.empty((0, d), dtype=int))
            record = PathRecord(self.grid, self.coarse,
                                np.concatenate([[self.x0], interior, [self.xn]]))
            if classify(record).reducible:
                self.reducible += 1
            else:
                self.irreducible += 1
            yield record


def enumerate_paths(n, box_radius, coarse, *, d=None, grid=None, x0=None,
                    xn=None, center=None, guard=1 << 21):
    """All paths with interior points in a cube box on the R-sublattice.

    Endpoints are parameters, not enumerated: they default to the box
    center and to a point (2n+1)*R away along the first axis, which for
    n = 1 leaves the single far pair, classified reducible by the
    single-cut convention.  The default torus is sized so the box stays
    under a quarter side and no wrap aliases distinct paths.  The record
    count is (2*box_radius/R + 1)^(d*(n-1)).
    """
    n = int(n)
    r = int(coarse)
    box = int(box_radius)
    if n < 1 or r < 1:
        raise ConfigError(f"need n >= 1 and coarse >= 1, got {n}, {r}")
    if box < 0 or box % r:
        raise ConfigError(f"box radius {box} must be a multiple of {r}")
    for probe in (grid, x0, xn, center):
        if probe is not None:
            d_found = probe.ndim if isinstance(probe, LatticeGrid) else len(probe)
            if d is not None and int(d) != d_found:
                raise ConfigError("inconsistent dimensions in the arguments")
            d = d_found
    if d is None:
        raise ConfigError("pass d, a grid, or one explicit point")
    d = int(d)
    slots = d * (n - 1)
    count = (2 * box // r + 1) ** slots
    if count > guard:
        raise CapacityError(f"enumeration would visit {count} paths, "
                            f"guard is {guard}")
    center = np.zeros(d, dtype=int) if center is None else np.asarray(center, int)
    if np.any(center % r):
        raise ConfigError("box center must lie on the coarse sublattice")
    x0 = center.copy() if x0 is None else np.asarray(x0, dtype=int)
    if xn is None:
        xn = center.copy()
        xn[0] += r * (2 * n + 1)
    else:
        xn = np.asarray(xn, dtype=int)
    if grid is None:
        reach = box + int(np.abs(np.concatenate([x0 - center, xn - center])).max())
        grid = LatticeGrid((4 * (reach + r),) * d)
    if any(s % r for s in grid.shape):
        raise ConfigError(f"coarse scale {r} must divide sides {grid.shape}")
    if 4 * box >= min(grid.shape):
        raise ConfigError("box must stay under a quarter of the torus; "
                          "wrap-around would alias distinct paths")
    steps = r * np.arange(-(box // r), box // r + 1)
    cube = [tuple(p) for p in
            itertools.product(*[center[j] + steps for j in range(d)])]
    return PathStream(grid, r, x0, xn, cube, slots)


def random_irreducible_paths(n, coarse, count, rng, *, d=1):
    """Separated irreducible corpus by cluster bouncing.

    Interior points land near one of three anchors (the two endpoints
    and a midpoint), offset within one coarse step so any two points at
    the same anchor touch; a chain that revisits anchors across every
    cut index is irreducible, and rejection against ``classify`` keeps
    exactly those.  Endpoints sit (2n+3)*R apart, beyond the 2*R*n
    separation hypothesis.
    """
    n, r = int(n), int(coarse)
    if n < 3:
        raise ConfigError("separated irreducible paths need n >= 3")
    span = r * (2 * n + 3)
    grid = LatticeGrid((4 * (span + 2 * r),) * d)
    x0 = np.zeros(d, dtype=int)
    xn = x0.copy()
    xn[0] += span
    mid = x0.copy()
    mid[0] += (n + 1) * r
    anchors = np.array([x0, xn, mid])
    out = []
    for _ in range(200 * count):
        if len(out) >= count:
            break
        which = rng.integers(0, 3, size=n - 1)
        offs = r * rng.integers(0, 2, size=(n - 1, d))
        pts = np.concatenate([[x0], anchors[which] + offs, [xn]])
        record = PathRecord(grid, r, pts)
        if not classify(record).reducible:
            out.append(record)
    if len(out) < count:
        raise CapacityError("rejection sampling stalled; these parameters "
                            "leave too few irreducible paths")
    return out


_SELECTORS = ("all", "reducible-only", "irreducible-only")


def _chain_step(ensemble, w):
    return apply_grad_projection(ensemble.perp(_b_apply(ensemble, w)), ensemble.grid)


def restricted_term_sum(ensemble, n, x, y, *, coarse=1, selector="all",
                        workers=1):
    """Order-n term between two sites, summed over one path class.

    Interior chain positions are partitioned into coarse cells; each
    cell tuple is one path, classified together with the endpoints, and
    its contribution is the chain value with every interior
    multiplication masked to its cell.  ``all`` skips the masking (one
    unrestricted chain).  The class sum is split across workers by the
    first interior cell and merged by compensated summation over the
    full list of path values, so the result does not depend on the
    worker count.  Exact laws only; the matrix is indexed (component,
    probe direction) like the term tables.
    """
    if selector not in _SELECTORS:
        raise ConfigError(f"selector must be one of {_SELECTORS}")
    if ensemble.kind not in ("exact", "translate"):
        raise ConfigError("restricted sums need an exactly enumerable law, "
                          f"not kind {ensemble.kind!r}")
    _require_centered(ensemble)
    n = int(n)
    if not 1 <= n <= 4:
        raise ConfigError(f"term order must be in [1, 4], got {n}")
    grid = ensemble.grid
    d = grid.ndim
    r = int(coarse)
    if any(s % r for s in grid.shape):
        raise ConfigError(f"coarse scale {r} must divide sides {grid.shape}")
    if min(grid.shape) < 4 * r * n:
        raise ConfigError(f"torus {grid.shape} is below 4*R*n = {4 * r * n}; "
                          "every path would wrap")
    x = np.mod(np.asarray(x, dtype=int), grid.shape)
    y = np.mod(np.asarray(y, dtype=int), grid.shape)
    if np.any(x % r) or np.any(y % r):
        raise ConfigError("endpoints must lie on the coarse sublattice")
    ncells = grid.nsites // r ** d
    if ncells ** (n - 1) > 1 << 16:
        raise CapacityError(f"{ncells ** (n - 1)} paths exceed the guard 2^16")

    x_idx = tuple(x)

    def leaf(w):
        # E[b w](x) without materializing the product field
        wx = w[(Ellipsis,) + x_idx]
        if ensemble.scalar:
            bx = ensemble.b[(slice(None),) + x_idx]
            return np.einsum("m,m,mi->i", ensemble.weights, bx, wx)
        bx = ensemble.b[(Ellipsis,) + x_idx]
        return np.einsum("m,mik,mk->i", ensemble.weights, bx, wx)

    cols = []
    for j in range(d):
        probe = np.zeros((d,) + grid.shape)
        probe[(j,) + tuple(y)] = 1.0
        w0 = _chain_step(ensemble, np.broadcast_to(probe, (ensemble.n,) + probe.shape))

        if selector == "all":
            w = w0
            for _ in range(n - 1):
                w = _chain_step(ensemble, w)
            cols.append(leaf(w))
            continue

        cgrid = grid.with_coarse(r)
        anchors = [np.array(p) for p in
                   itertools.product(*[range(0, s, r) for s in grid.shape])]
        cells = [(Ellipsis,) + cgrid.cube_slices(z) for z in anchors]
        want = selector == "reducible-only"

        def matches(w, depth, chosen, out):
            for z, sel in zip(anchors, cells):
                masked = np.zeros_like(w)
                masked[sel] = w[sel]
                here = chosen + [z]
                nxt = _chain_step(ensemble, masked)
                if depth < n - 1:
                    matches(nxt, depth + 1, here, out)
                else:
                    record = PathRecord(grid, r, np.array([y, *here, x]))
                    if classify(record).reducible == want:
                        out.append(leaf(nxt))
            return out

        def branch(i):
            z, sel = anchors[i], cells[i]
            masked = np.zeros_like(w0)
            masked[sel] = w0[sel]
            nxt = _chain_step(ensemble, masked)
            if n == 2:
                record = PathRecord(grid, r, np.array([y, z, x]))
                return [leaf(nxt)] if classify(record).reducible == want else []
            return matches(nxt, 2, [z], [])

        if n == 1:
            # no interior slot: the single two-point path carries the term
            record = PathRecord(grid, r, np.array([y, x]))
            leaves = [leaf(w0)] if classify(record).reducible == want else []
        else:
            parts = pmap(branch, list(range(len(anchors))), workers)
            leaves = [v for part in parts for v in part]
        if leaves:
            stacked = np.stack(leaves)
            cols.append(np.array([compensated_sum(stacked[:, i])
                                  for i in range(d)]))
        else:
            cols.append(np.zeros(d))
    return np.stack(cols, axis=1)
