"""Numerical laboratory for perturbative stochastic homogenization.

Everything lives on periodic integer lattices: coefficient laws and
their finite ensembles (``field``), discrete operators and solvers
(``lattice``, ``solvers``), the perturbation expansion and its kernels
(``series``), corrector hierarchies and effective tensors
(``corrector``), effective-equation checks and convergence rates
(``homogenize``), annealed Green tables (``green``), path combinatorics
behind the expansion terms (``paths``), and the experiment harness
(``cli``).
"""

__version__ = "0.1.0"

from .corrector import (
    DEFAULT_MASSES,
    TensorSet,
    WeakEstimate,
    extrapolate_mu,
    solve_massive_corrector,
    symmetric_tensors,
    tensors_from_callable,
    tensors_from_symbol,
    weak_corrector,
    weak_corrector_profile,
)
from .errors import (
    CapacityError,
    ConfigError,
    ConvergenceError,
    HomlabError,
    ZeroModeError,
)
from .field import (
    Ensemble,
    EnsembleSpec,
    enumerate_exact,
    export_field,
    monte_carlo,
    read_field_binary,
    translate_ensemble,
)
from .green import GreenConfig, GreenTable, annealed_green, green_decay_fit
from .grid import LatticeGrid
from .homogenize import RateFit, SchurReport, SourceSpec, error_rate, verify_schur
from .paths import (
    PathRecord,
    classify,
    enumerate_paths,
    quotient_graph,
    restricted_term_sum,
)
from .series import (
    FitResult,
    KernelEstimate,
    bcal_kernel,
    fit_decay_exponent,
    periodic_symbol_table,
    symbol_exact,
    symbol_table,
    term_kernel,
    term_kernel_table,
    transition_scan,
)

__all__ = [
    "__version__",
    "CapacityError",
    "ConfigError",
    "ConvergenceError",
    "DEFAULT_MASSES",
    "Ensemble",
    "EnsembleSpec",
    "FitResult",
    "GreenConfig",
    "GreenTable",
    "HomlabError",
    "KernelEstimate",
    "LatticeGrid",
    "PathRecord",
    "RateFit",
    "SchurReport",
    "SourceSpec",
    "TensorSet",
    "WeakEstimate",
    "ZeroModeError",
    "annealed_green",
    "bcal_kernel",
    "classify",
    "enumerate_exact",
    "enumerate_paths",
    "error_rate",
    "export_field",
    "extrapolate_mu",
    "fit_decay_exponent",
    "green_decay_fit",
    "monte_carlo",
    "periodic_symbol_table",
    "quotient_graph",
    "read_field_binary",
    "restricted_term_sum",
    "solve_massive_corrector",
    "symbol_exact",
    "symbol_table",
    "symmetric_tensors",
    "tensors_from_callable",
    "tensors_from_symbol",
    "term_kernel",
    "term_kernel_table",
    "transition_scan",
    "translate_ensemble",
    "verify_schur",
    "weak_corrector",
    "weak_corrector_profile",
]
