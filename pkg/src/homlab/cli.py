"""Experiment harness: validated configs in, manifests and tables out.

One JSON config fully determines a run.  ``validate`` resolves defaults
and reports every violation with its key path; ``run`` writes a manifest
before computing, then the tables; ``list``/``describe`` document the
catalog.  Numeric payloads are reproducible bit for bit: all floats are
printed with 17 significant digits, every reduction that could be split
across workers goes through compensated summation, and randomness is
drawn from per-stage substreams of the config seed.
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .corrector import (DEFAULT_MASSES, symmetric_tensors, tensors_from_symbol,
                        weak_corrector_profile)
from .errors import CapacityError, ConfigError, HomlabError
from .field import (Ensemble, EnsembleSpec, enumerate_exact, monte_carlo,
                    translate_ensemble)
from .green import GreenConfig, annealed_green, green_decay_fit
from .grid import LatticeGrid
from .homogenize import SourceSpec, error_rate, verify_schur
from .paths import enumerate_paths, quotient_graph, random_irreducible_paths, \
    restricted_term_sum
from .series import (fit_decay_exponent, periodic_symbol_table,
                     term_kernel_table, transition_scan)
from .util import config_hash, fmt_float, pmap, substream

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CAPACITY = 0, 1, 2, 3

_PI = float(np.pi)


# -- catalog -------------------------------------------------------------------

def _positive(name):
    def check(v, errors, path):
        try:
            v = float(v)
        except (TypeError, ValueError):
            errors.append(f"{path}: {name} must be a number")
            return v
        if v <= 0:
            errors.append(f"{path}: {name} must be positive")
        return v
    return check


def _positive_int(name):
    def check(v, errors, path):
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            errors.append(f"{path}: {name} must be a positive integer")
            return v
        return v
    return check


def _int_list(name):
    def check(v, errors, path):
        if not isinstance(v, (list, tuple)) or not v or \
                any(not isinstance(x, int) or isinstance(x, bool) for x in v):
            errors.append(f"{path}: {name} must be a nonempty list of integers")
            return v
        return list(v)
    return check


def _float_list(name, positive=False):
    def check(v, errors, path):
        try:
            out = [float(x) for x in v]
        except (TypeError, ValueError):
            errors.append(f"{path}: {name} must be a list of numbers")
            return v
        if not out:
            errors.append(f"{path}: {name} must not be empty")
        if positive and any(x <= 0 for x in out):
            errors.append(f"{path}: correlation exponent must be positive")
        return out
    return check


def _choice(options):
    def check(v, errors, path):
        if v not in options:
            errors.append(f"{path}: must be one of {sorted(options)}")
        return v
    return check


def _any(v, errors, path):
    return v


# kind -> (summary, property under test, parameter schema, outputs)
CATALOG = {
    "decay-scan": (
        "Tabulate expansion-term kernels and fit their spatial decay.",
        "off-diagonal kernel entries fall off at the predicted power of the "
        "distance, order by order",
        {"orders": ([1, 2, 3], _int_list("orders")),
         "r_min": (4.0, _positive("r_min")),
         "r_max": (None, _any)},
        ["fits.csv: order, slope, interval, npoints, noise_floor",
         "shells-<order>.csv: radius, value, stderr"]),
    "transition-scan": (
        "Scan the covariance exponent and track the leading decay slope.",
        "the slope follows -(d+gamma) while correlations decay slowly and "
        "saturates near -3d once they decay fast",
        {"gammas": (None, _float_list("gammas", positive=True)),
         "d": (2, _positive_int("d")),
         "delta": (0.15, _positive("delta")),
         "size": (256, _positive_int("size")),
         "r_min": (4.0, _positive("r_min")),
         "r_max": (None, _any)},
        ["scan.csv: gamma, predicted, first-term and proxy slopes"]),
    "tensor-compute": (
        "Homogenized tensors by mass extrapolation and by symbol stencils.",
        "both routes produce the same symmetrized tensors within their "
        "reported errors",
        {"n_max": (2, _positive_int("n_max")),
         "route": ("both", _choice({"massive", "symbol", "both"})),
         "mus": (list(DEFAULT_MASSES), _float_list("mus", positive=True)),
         "h": (0.05, _positive("h"))},
        ["tensors.csv: route, order, entry, value, stderr",
         "manifest: route agreement gaps"]),
    "rate-check": (
        "Convergence order of the averaged solution toward its proxy.",
        "the error against the order-ell homogenized proxy contracts like "
        "the scale ratio to the power ell (or better)",
        {"ell": (1, _positive_int("ell")),
         "scales": ([8, 16, 32, 64], _int_list("scales")),
         "source": (None, _any)},
        ["errors.csv: scale, error, stderr", "manifest: fitted order"]),
    "green-check": (
        "Annealed against homogenized Green tables, with decay fits.",
        "each correction order makes the difference field decay one power "
        "faster",
        {"xi_max": (_PI / 2, _positive("xi_max")),
         "alpha": (None, _any),
         "ell": (1, _positive_int("ell")),
         "window": ([4.0, 32.0], _float_list("window", positive=True)),
         "h": (0.05, _positive("h"))},
        ["table-<name>.csv: radius, shell max", "<name>.npy binary grids",
         "fits.json: slope, interval, shells"]),
    "schur-verify": (
        "Exact effective-equation representation on an enumerable law.",
        "the averaged gradient solves the effective equation and the "
        "fluctuation identity closes at solver precision",
        {"source": (None, _any)},
        ["residuals.csv: equation and fluctuation residuals"]),
    "path-audit": (
        "Coarse-path census, quotient certificates, restricted term sums.",
        "reducible-class sums vanish once the coarse scale passes the "
        "dependence range, and the class sums partition the full term",
        {"n": (3, _positive_int("n")),
         "box_radius": (4, _positive_int("box_radius")),
         "coarse": (1, _positive_int("coarse")),
         "d": (1, _positive_int("d")),
         "corpus": (0, _any),
         "restricted": (None, _any)},
        ["tallies.csv: reducible/irreducible counts",
         "restricted.csv: selector sums", "certificates.json: trails"]),
    "weak-corrector-scan": (
        "Conditional corrector expectations across the distance axis.",
        "the first-order profile stays bounded while the third-order "
        "profile grows with the distance",
        {"orders": ([1, 3], _int_list("orders")),
         "ratios": ([1.0, 2.0, 4.0, 8.0], _float_list("ratios", positive=True)),
         "r0": (4, _positive_int("r0")),
         "terms": (3, _positive_int("terms")),
         "direction": (None, _any)},
        ["profile.csv: order, ratio, value, stderr"]),
}


# -- config resolution ---------------------------------------------------------

_TOP_KEYS = {"kind", "seed", "workers", "out", "grid", "ensemble", "params"}
_ENS_KEYS = {"model", "values", "weights", "delta", "block", "gamma", "seed",
             "pattern", "sampling", "samples", "antithetic"}
_GRIDLESS = {"transition-scan", "rate-check"}
_ENSEMBLELESS = {"transition-scan"}
# path-audit only touches the lattice when restricted sums are requested
_OPTIONAL = {"path-audit"}


def validate_config(text):
    """Resolve one config document; collect every violation with its path.

    Accepts the JSON text or an already parsed dict.  Returns the fully
    resolved config (all defaults filled in) and the error list; the
    config is only trustworthy when the list is empty.
    """
    errors = []
    if isinstance(text, (dict,)):
        doc = dict(text)
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            return None, [f"document: not valid JSON ({exc})"]
        if not isinstance(doc, dict):
            return None, ["document: top level must be an object"]

    for key in sorted(set(doc) - _TOP_KEYS):
        errors.append(f"{key}: unknown key")
    kind = doc.get("kind")
    if kind not in CATALOG:
        errors.append(f"kind: must be one of {sorted(CATALOG)}")
        return None, errors

    resolved = {"kind": kind,
                "seed": doc.get("seed", 0),
                "workers": doc.get("workers", 1),
                "out": doc.get("out", f"runs/{kind}")}
    if not isinstance(resolved["seed"], int) or resolved["seed"] < 0:
        errors.append("seed: must be a nonnegative integer")
    if not isinstance(resolved["workers"], int) or resolved["workers"] < 1:
        errors.append("workers: must be a positive integer")

    grid_cfg = doc.get("grid")
    if kind in _GRIDLESS:
        if grid_cfg is not None:
            errors.append("grid: not used by this experiment kind")
    elif grid_cfg is None and kind in _OPTIONAL:
        resolved["grid"] = None
    else:
        shape = (grid_cfg or {}).get("shape") if isinstance(grid_cfg, dict) else None
        if not shape or not isinstance(shape, list) or \
                any(not isinstance(s, int) or s < 2 for s in shape):
            errors.append("grid.shape: need a list of integer sides >= 2")
        else:
            resolved["grid"] = {"shape": shape}

    ens_cfg = doc.get("ensemble")
    if kind in _ENSEMBLELESS:
        if ens_cfg is not None:
            errors.append("ensemble: not used by this experiment kind")
    elif ens_cfg is None and kind in _OPTIONAL:
        resolved["ensemble"] = None
    else:
        resolved["ensemble"] = _validate_ensemble(ens_cfg, resolved.get("grid"),
                                                  errors)

    schema = CATALOG[kind][2]
    params = doc.get("params") or {}
    if not isinstance(params, dict):
        errors.append("params: must be an object")
        params = {}
    for key in sorted(set(params) - set(schema)):
        errors.append(f"params.{key}: unknown key")
    out_params = {}
    for key, (default, check) in schema.items():
        if key in params:
            out_params[key] = check(params[key], errors, f"params.{key}")
        else:
            out_params[key] = default
    resolved["params"] = out_params

    _validate_kind_specific(kind, resolved, errors)
    return (resolved, errors) if not errors else (None, errors)


def _validate_ensemble(cfg, grid_cfg, errors):
    if not isinstance(cfg, dict):
        errors.append("ensemble: must be an object")
        return None
    for key in sorted(set(cfg) - _ENS_KEYS):
        errors.append(f"ensemble.{key}: unknown key")
    model = cfg.get("model")
    if model not in ("iid", "block", "gaussian", "translate"):
        errors.append("ensemble.model: must be iid, block, gaussian or translate")
        return None
    out = {"model": model}
    if model == "translate":
        pattern = cfg.get("pattern")
        if pattern is None:
            errors.append("ensemble.pattern: required for the translate model")
        out["pattern"] = pattern
        out["delta"] = cfg.get("delta", 0.1)
        if not isinstance(out["delta"], (int, float)) or not 0 <= out["delta"] < 1:
            errors.append("ensemble.delta: contrast must satisfy 0 <= delta < 1")
        return out
    sampling = cfg.get("sampling", "mc" if model == "gaussian" else "exact")
    if sampling not in ("exact", "mc"):
        errors.append("ensemble.sampling: must be exact or mc")
    elif sampling == "exact" and model == "gaussian":
        errors.append("ensemble.sampling: the gaussian model has no exact "
                      "enumeration")
    if model == "gaussian":
        gamma = cfg.get("gamma")
        if gamma is None or not isinstance(gamma, (int, float)) or gamma <= 0:
            errors.append("ensemble.gamma: correlation exponent must be positive")
            return None
    try:
        spec = EnsembleSpec(model=model, values=_maybe_tuple(cfg.get("values")),
                            weights=_maybe_tuple(cfg.get("weights")),
                            delta=cfg.get("delta"), block=cfg.get("block", 1),
                            gamma=cfg.get("gamma"), seed=cfg.get("seed", 0))
    except (ConfigError, TypeError, ValueError) as exc:
        errors.append(f"ensemble: {exc}")
        return None
    out.update(spec.to_dict())
    out["sampling"] = sampling
    if sampling == "mc":
        out["samples"] = cfg.get("samples", 64)
        if not isinstance(out["samples"], int) or out["samples"] < 2:
            errors.append("ensemble.samples: need at least 2 draws")
        out["antithetic"] = bool(cfg.get("antithetic", True))
    elif grid_cfg:
        # mirror the enumeration capacity guard at validation time, so a
        # hopeless request fails before any work starts
        vals = spec.values
        if vals is not None and model in ("iid", "block"):
            shape = grid_cfg["shape"]
            nsites = int(np.prod(shape))
            ncell = nsites if model == "iid" else \
                nsites // spec.block ** len(shape)
            bits = ncell * np.log2(len(vals))
            if bits > 24:
                errors.append(
                    f"ensemble: exact enumeration needs 2^{bits:.0f} states, "
                    "capacity guard is 2^24")
    return out


def _maybe_tuple(v):
    return tuple(v) if isinstance(v, list) else v


def _parse_source(raw, d, errors, path="params.source"):
    if raw is None:
        errors.append(f"{path}: required")
        return None
    if not isinstance(raw, list) or not raw:
        errors.append(f"{path}: must be a list of modes")
        return None
    modes = []
    for i, mode in enumerate(raw):
        if not isinstance(mode, dict) or "k" not in mode or "c" not in mode:
            errors.append(f"{path}[{i}]: mode needs k and c")
            return None
        k = mode["k"]
        c = [complex(*v) if isinstance(v, list) else complex(v)
             for v in mode["c"]]
        if d is not None and len(k) != d:
            errors.append(f"{path}[{i}].k: needs {d} components")
            return None
        modes.append((tuple(k), tuple(c)))
    try:
        spec = SourceSpec(tuple(modes))
    except ConfigError as exc:
        errors.append(f"{path}: {exc}")
        return None
    # resolved configs stay plain JSON; runners rebuild the SourceSpec
    return [{"k": list(k), "c": [[v.real, v.imag] for v in c]}
            for k, c in spec.modes]


def _source_from_config(raw):
    return SourceSpec(tuple((tuple(m["k"]),
                             tuple(complex(re, im) for re, im in m["c"]))
                            for m in raw))


def _validate_kind_specific(kind, resolved, errors):
    params = resolved.get("params", {})
    grid = resolved.get("grid")
    d = len(grid["shape"]) if grid else None
    if kind == "transition-scan" and params.get("gammas") is None:
        errors.append("params.gammas: required")
    if kind in ("schur-verify", "rate-check"):
        ens = resolved.get("ensemble") or {}
        src_d = d
        if kind == "rate-check":
            if ens.get("model") != "translate":
                errors.append("ensemble.model: rate-check refines a periodic "
                              "pattern; use the translate model")
                return
            src_d = np.asarray(ens.get("pattern")).ndim if ens.get("pattern") \
                is not None else None
            scales = params.get("scales")
            if isinstance(scales, list):
                ratios = [b / a for a, b in zip(scales, scales[1:])]
                if len(scales) < 4 or len(set(scales)) != len(scales) or \
                        (ratios and max(ratios) - min(ratios) > 1e-9):
                    errors.append("params.scales: need at least four distinct "
                                  "scale factors in geometric progression")
        params["source"] = _parse_source(params.get("source"), src_d, errors)
    if kind == "green-check":
        if params.get("alpha") is None:
            params["alpha"] = [0] * d if d else None
        if d is not None and params["alpha"] is not None:
            if len(params["alpha"]) != d:
                errors.append(f"params.alpha: needs {d} components")
            elif sum(params["alpha"]) == 0 and d < 3:
                errors.append("params.alpha: the undifferentiated field needs "
                              "d >= 3")
        if params.get("xi_max") and params["xi_max"] > _PI:
            errors.append("params.xi_max: cutoff beyond the frequency cell")
        win = params.get("window")
        if isinstance(win, list) and (len(win) != 2 or win[0] >= win[1]):
            errors.append("params.window: need [r_min, r_max] with r_min < r_max")
        ens = resolved.get("ensemble") or {}
        if ens.get("model") != "translate":
            errors.append("ensemble.model: green-check tables a periodic "
                          "pattern law; use the translate model")
    if kind == "path-audit":
        rest = params.get("restricted")
        if rest is not None:
            if not isinstance(rest, dict):
                errors.append("params.restricted: must be an object")
            else:
                for key in sorted(set(rest) - {"orders", "coarse", "x", "y",
                                               "selectors"}):
                    errors.append(f"params.restricted.{key}: unknown key")
            if resolved.get("grid") is None:
                errors.append("grid.shape: required for restricted term sums")
            if resolved.get("ensemble") is None:
                errors.append("ensemble: required for restricted term sums")


# -- run machinery -------------------------------------------------------------

class RunContext:
    """Output directory, manifest bookkeeping, seeded substreams."""

    def __init__(self, config, outdir):
        self.config = config
        self.outdir = Path(outdir)
        # workers and out are execution details, not experiment identity
        self.hash = config_hash({k: v for k, v in config.items()
                                 if k not in ("workers", "out")})
        self.warnings = []
        self.results = {}
        self.times = {}
        self._t0 = time.monotonic()

    def warn(self, message):
        self.warnings.append(message)
        print(f"warning: {message}", file=sys.stderr)

    def record(self, name, payload, source):
        """Append one result with the code path that produced it."""
        self.results[name] = {"source": source, "data": payload}
        self.times[name] = round(time.monotonic() - self._t0, 3)
        self.flush("running")

    def rng(self, *key):
        return substream(self.config["seed"], *key)

    def flush(self, status, error=None):
        doc = {"status": status, "config_hash": self.hash,
               "code_version": __version__, "config": self.config,
               "results": self.results, "warnings": self.warnings,
               "wall_clock": self.times}
        if error is not None:
            doc["error"] = error
        path = self.outdir / "manifest.json"
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(doc, indent=2, default=_json_default) + "\n")
        tmp.replace(path)

    def write_csv(self, name, header, rows):
        lines = ["config_hash," + ",".join(header)]
        for row in rows:
            cells = [self.hash]
            for cell in row:
                if isinstance(cell, (float, np.floating)):
                    cells.append(fmt_float(cell))
                else:
                    cells.append(str(cell))
            lines.append(",".join(cells))
        (self.outdir / name).write_text("\n".join(lines) + "\n")


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _build_ensemble(ctx, stage=0):
    cfg = ctx.config["ensemble"]
    grid = LatticeGrid(tuple(ctx.config["grid"]["shape"]))
    if cfg["model"] == "translate":
        return translate_ensemble(np.asarray(cfg["pattern"], dtype=float),
                                  grid, cfg["delta"])
    spec = EnsembleSpec.from_dict({k: v for k, v in cfg.items()
                                   if k in ("model", "values", "weights",
                                            "delta", "block", "gamma", "seed")})
    if cfg["sampling"] == "exact":
        return enumerate_exact(spec, grid)
    seed = int(ctx.rng(7, stage).integers(1 << 31))
    return monte_carlo(spec, grid, cfg["samples"], seed=seed,
                       antithetic=cfg["antithetic"])


def _fit_row(label, fit):
    return (label, fit.slope, fit.interval, fit.npoints, int(fit.noise_floor))


def _run_decay_scan(ctx):
    ens = _build_ensemble(ctx)
    params = ctx.config["params"]

    def one(order):
        table = term_kernel_table(ens, order)
        if not np.any(table.values):
            return order, None
        return order, fit_decay_exponent(table, r_min=params["r_min"],
                                         r_max=params["r_max"])

    rows = []
    for order, fit in pmap(one, params["orders"], ctx.config["workers"]):
        if fit is None:
            ctx.warn(f"noise floor: exact zero at order {order}")
            rows.append((order, float("nan"), float("nan"), 0, 1))
            continue
        rows.append(_fit_row(order, fit))
        ctx.write_csv(f"shells-{order}.csv", ["radius", "value"],
                      list(zip(fit.radii, fit.values)))
        ctx.record(f"order-{order}",
                   {"slope": fit.slope, "interval": fit.interval,
                    "noise_floor": fit.noise_floor},
                   "series.fit_decay_exponent")
    ctx.write_csv("fits.csv",
                  ["order", "slope", "interval", "npoints", "noise_floor"],
                  rows)


def _run_transition_scan(ctx):
    params = ctx.config["params"]
    scan = transition_scan(params["gammas"], d=params["d"],
                           delta=params["delta"], size=params["size"],
                           r_min=params["r_min"], r_max=params["r_max"])
    rows = []
    for row in scan.rows:
        rows.append((row.gamma, row.predicted, row.first_term.slope,
                     row.first_term.interval, row.proxy.slope,
                     row.proxy.interval, int(row.proxy.noise_floor)))
    ctx.write_csv("scan.csv",
                  ["gamma", "predicted", "first_slope", "first_interval",
                   "proxy_slope", "proxy_interval", "noise_floor"], rows)
    ctx.record("scan", {"saturation_gamma": scan.saturation_gamma},
               "series.transition_scan")


def _tensor_rows(route, tensors, n_max):
    rows = []
    for n in range(1, n_max + 1):
        sym = tensors.tensor(n)
        err = float(tensors.errors.get(n, 0.0))
        for index in np.ndindex(sym.shape):
            label = "".join(str(i) for i in index)
            rows.append((route, n, label, sym[index], err))
    return rows


def _run_tensor_compute(ctx):
    params = ctx.config["params"]
    ens = _build_ensemble(ctx)
    rows = []
    routes = {}
    if params["route"] in ("massive", "both"):
        ts = symmetric_tensors(ens, params["n_max"], mus=tuple(params["mus"]))
        routes["massive"] = ts
        rows.extend(_tensor_rows("massive", ts, params["n_max"]))
    if params["route"] in ("symbol", "both"):
        ts = tensors_from_symbol(ens, params["n_max"], h=params["h"])
        routes["symbol"] = ts
        rows.extend(_tensor_rows("symbol", ts, params["n_max"]))
    ctx.write_csv("tensors.csv", ["route", "order", "entry", "value", "stderr"],
                  rows)
    if len(routes) == 2:
        gaps = {}
        for n in range(1, params["n_max"] + 1):
            gap = np.abs(routes["massive"].tensor(n) -
                         routes["symbol"].tensor(n)).max()
            gaps[str(n)] = float(gap)
        ctx.record("agreement", gaps,
                   "corrector.symmetric_tensors vs corrector.tensors_from_symbol")


def _run_rate_check(ctx):
    params = ctx.config["params"]
    ens_cfg = ctx.config["ensemble"]
    pattern = np.asarray(ens_cfg["pattern"], dtype=float)
    delta = ens_cfg["delta"]
    cell = LatticeGrid(pattern.shape)
    base = translate_ensemble(pattern, cell, delta)
    tensors = tensors_from_symbol(base, max(params["ell"], 1), h=0.05)

    def factory(m):
        tiled = np.tile(pattern, (m,) * pattern.ndim)
        return translate_ensemble(tiled, LatticeGrid(tuple(s * m for s in
                                                           pattern.shape)), delta)

    fit = error_rate(factory, tensors, _source_from_config(params["source"]),
                     tuple(params["scales"]), params["ell"])
    rows = list(zip(fit.scales, fit.errors, fit.stderrs))
    ctx.write_csv("errors.csv", ["scale", "error", "stderr"], rows)
    ctx.record("rate", {"order": fit.order, "interval": list(fit.interval),
                        "exact": fit.exact, "noise_floor": fit.noise_floor},
               "homogenize.error_rate")


def _shell_table(grid, field):
    radius = grid.radius
    rmax = int(np.floor(radius.max()))
    rows = []
    for r in range(1, rmax + 1):
        shell = (radius >= r - 0.5) & (radius < r + 0.5)
        if np.any(shell):
            rows.append((r, float(np.abs(field[shell]).max())))
    return rows


def _run_green_check(ctx):
    params = ctx.config["params"]
    ens_cfg = ctx.config["ensemble"]
    grid = LatticeGrid(tuple(ctx.config["grid"]["shape"]))
    pattern = np.asarray(ens_cfg["pattern"], dtype=float)
    base = translate_ensemble(pattern, LatticeGrid(pattern.shape),
                              ens_cfg["delta"])
    tensors = tensors_from_symbol(base, max(params["ell"], 1), h=params["h"])
    table = periodic_symbol_table(base, grid)
    cfg = GreenConfig(grid, params["xi_max"], tuple(params["alpha"]),
                      ell=params["ell"])
    gt = annealed_green(table, cfg, tensors)
    ctx.record("table", {"imag_residual": gt.imag_residual,
                         "ellipticity_margin": gt.ellipticity_margin},
               "green.annealed_green")
    fits = {}
    for name in ("green", "homog", "corrected"):
        field = getattr(gt, name)
        np.save(ctx.outdir / f"{name}.npy", field)
        ctx.write_csv(f"table-{name}.csv", ["radius", "shell_max"],
                      _shell_table(grid, field))
    window = tuple(params["window"])
    for ell in {1, params["ell"]}:
        fit = green_decay_fit(gt, tuple(params["alpha"]), ell, window)
        if fit.noise_floor:
            ctx.warn(f"noise floor: difference at ell={ell} is below its "
                     "error bars")
        fits[str(ell)] = {"slope": fit.slope, "interval": fit.interval,
                          "npoints": fit.npoints,
                          "noise_floor": fit.noise_floor}
    (ctx.outdir / "fits.json").write_text(
        json.dumps({"config_hash": ctx.hash, "fits": fits}, indent=2,
                   default=_json_default) + "\n")
    ctx.record("fits", fits, "green.green_decay_fit")


def _run_schur_verify(ctx):
    ens = _build_ensemble(ctx)
    report = verify_schur(ens, _source_from_config(ctx.config["params"]["source"]))
    rows = [("equation", report.equation_residual),
            ("fluctuation", report.fluctuation_residual),
            ("symbol_imag", report.symbol_imag)]
    ctx.write_csv("residuals.csv", ["name", "value"], rows)
    ctx.record("residuals", {name: val for name, val in rows},
               "homogenize.verify_schur")


def _run_path_audit(ctx):
    params = ctx.config["params"]
    stream = enumerate_paths(params["n"], params["box_radius"],
                             params["coarse"], d=params["d"])
    for _ in stream:
        pass
    ctx.write_csv("tallies.csv",
                  ["n", "box_radius", "coarse", "count", "reducible",
                   "irreducible"],
                  [(params["n"], params["box_radius"], params["coarse"],
                    stream.count, stream.reducible, stream.irreducible)])
    ctx.record("tallies", {"count": stream.count,
                           "reducible": stream.reducible,
                           "irreducible": stream.irreducible},
               "paths.enumerate_paths")

    if params["corpus"]:
        corpus = random_irreducible_paths(max(params["n"], 3), params["coarse"],
                                          params["corpus"], ctx.rng(11),
                                          d=params["d"])
        certs = []
        flows = []
        for record in corpus:
            qg = quotient_graph(record)
            flows.append(qg.flow)
            certs.append({"points": record.points.tolist(),
                          "degrees": list(qg.degrees), "flow": qg.flow,
                          "trails": [list(t) for t in qg.trails]
                          if qg.trails else None, "report": qg.report})
        (ctx.outdir / "certificates.json").write_text(
            json.dumps({"config_hash": ctx.hash, "paths": certs}, indent=2)
            + "\n")
        ctx.record("corpus", {"count": len(corpus), "min_flow": int(min(flows))},
                   "paths.quotient_graph")

    rest = params["restricted"]
    if rest:
        ens = _build_ensemble(ctx)
        x = np.asarray(rest.get("x", [s // 2 for s in ens.grid.shape]))
        y = np.asarray(rest.get("y", [0] * ens.grid.ndim))
        rows = []
        checks = {}
        for n in rest.get("orders", [2, 3]):
            for r in rest.get("coarse", [params["coarse"]]):
                sums = {}
                for selector in rest.get("selectors",
                                         ["all", "reducible-only",
                                          "irreducible-only"]):
                    mat = restricted_term_sum(ens, n, x, y, coarse=r,
                                              selector=selector,
                                              workers=ctx.config["workers"])
                    sums[selector] = mat
                    for index in np.ndindex(mat.shape):
                        rows.append((n, r, selector,
                                     "".join(map(str, index)), mat[index]))
                if len(sums) == 3:
                    gap = np.abs(sums["all"] - sums["reducible-only"]
                                 - sums["irreducible-only"]).max()
                    checks[f"partition-n{n}-R{r}"] = float(gap)
        ctx.write_csv("restricted.csv",
                      ["order", "coarse", "selector", "entry", "value"], rows)
        if checks:
            ctx.record("partition", checks, "paths.restricted_term_sum")


def _run_weak_corrector_scan(ctx):
    params = ctx.config["params"]
    ens = _build_ensemble(ctx)
    direction = params["direction"]
    if direction is None:
        direction = [1.0] + [0.0] * (ens.grid.ndim - 1)
    def one(order):
        return weak_corrector_profile(ens, order, direction, params["ratios"],
                                      params["r0"], terms=params["terms"])

    rows = []
    summary = {}
    profiles = pmap(one, params["orders"], ctx.config["workers"])
    for order, profile in zip(params["orders"], profiles):
        values = []
        for ratio, est in profile:
            rows.append((order, ratio, est.value, est.stderr, est.members))
            values.append(est.value)
        values = np.abs(np.array(values))
        floor = max(values.max() * 1e-12, 1e-300)
        summary[str(order)] = {
            "max_over_min": float(values.max() / max(values.min(), floor)),
            "monotone_increasing": bool(np.all(np.diff(values) > 0))}
    ctx.write_csv("profile.csv",
                  ["order", "ratio", "value", "stderr", "members"], rows)
    ctx.record("profiles", summary, "corrector.weak_corrector_profile")


_RUNNERS = {
    "decay-scan": _run_decay_scan,
    "transition-scan": _run_transition_scan,
    "tensor-compute": _run_tensor_compute,
    "rate-check": _run_rate_check,
    "green-check": _run_green_check,
    "schur-verify": _run_schur_verify,
    "path-audit": _run_path_audit,
    "weak-corrector-scan": _run_weak_corrector_scan,
}


def run_experiment(config, out=None):
    """Dispatch one resolved config; manifest first, data files after."""
    outdir = Path(out if out is not None else config["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    ctx = RunContext(config, outdir)
    ctx.flush("running")
    try:
        _RUNNERS[config["kind"]](ctx)
    except BaseException as exc:
        ctx.flush("failed", error=f"{type(exc).__name__}: {exc}")
        raise
    ctx.flush("ok")
    return ctx


# -- entry points --------------------------------------------------------------

def list_experiments():
    """Catalog of kinds with their one-line summaries, stable order."""
    return {kind: CATALOG[kind][0] for kind in sorted(CATALOG)}


def describe(kind):
    if kind not in CATALOG:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    summary, tested, schema, outputs = CATALOG[kind]
    lines = [kind, "  " + summary, "", "  checks: " + tested, "", "  params:"]
    for key in sorted(schema):
        default = schema[key][0]
        lines.append(f"    {key} (default {json.dumps(default)})")
    lines.append("")
    lines.append("  outputs:")
    for entry in outputs:
        lines.append("    " + entry)
    return "\n".join(lines)


def _load_config(args):
    if not args.config:
        print("error: --config is required", file=sys.stderr)
        return None, EXIT_CONFIG
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return None, EXIT_CONFIG
    config, errors = validate_config(text)
    if errors:
        for err in errors:
            print(f"config error: {err}", file=sys.stderr)
        return None, EXIT_CONFIG
    if args.seed is not None:
        config["seed"] = args.seed
    if args.workers is not None:
        config["workers"] = args.workers
    return config, EXIT_OK


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="homlab",
        description="experiment harness for the homogenization laboratory")
    parser.add_argument("verb", choices=["validate", "run", "list", "describe"])
    parser.add_argument("kind", nargs="?", help="experiment kind (describe)")
    parser.add_argument("--config", help="path to a JSON experiment config")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--out", default=None, help="output directory")
    args = parser.parse_args(argv)

    if args.verb == "list":
        for kind, summary in list_experiments().items():
            print(f"{kind:22s} {summary}")
        return EXIT_OK

    if args.verb == "describe":
        if not args.kind:
            print("error: describe needs an experiment kind", file=sys.stderr)
            return EXIT_CONFIG
        try:
            print(describe(args.kind))
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        return EXIT_OK

    config, status = _load_config(args)
    if config is None:
        return status

    if args.verb == "validate":
        print(json.dumps(config, indent=2, default=_json_default))
        return EXIT_OK

    try:
        ctx = run_experiment(config, out=args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CapacityError as exc:
        print(f"capacity guard: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except HomlabError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - the harness maps all failures
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"ok: manifest and tables under {ctx.outdir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
