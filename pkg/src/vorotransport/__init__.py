"""Semi-discrete transport partitions by additively weighted Voronoi diagrams.

Fit weights so each site's region captures its demand of a discretized
measure, then check the partition against an exact transportation LP.
"""

from .diagram import (
    Assignment,
    Excess,
    Site,
    assign,
    excess,
    make_sites,
    objective,
    raster_labels,
    transport_cost,
)
from .measure import AtomicMeasure, EmptyMeasureError, InvalidDensityError, from_grid, normalize, uniform_grid
from .metrics import (
    DegeneratePairError,
    DistanceFamily,
    GammaRange,
    concave_of_norm,
    concave_sqrt,
    convex_translate,
    diff,
    distance,
    euclidean,
    gamma_range,
    parse_metric,
    pnorm,
    probe_admissibility,
    sqeuclidean,
)
from .oracle import Certificate, TransportPlan, certify, solve_lp
from .solver import (
    SolverConfig,
    SolveResult,
    TargetOverflowError,
    check_uniqueness,
    descend_step,
    fit_weights,
    loss,
    rebalance_ties,
    solve_delta,
)

__version__ = "0.1.0"

__all__ = [
    "Assignment", "AtomicMeasure", "Certificate", "DegeneratePairError", "DistanceFamily",
    "EmptyMeasureError", "Excess", "GammaRange", "InvalidDensityError", "Site", "SolveResult",
    "SolverConfig", "TargetOverflowError", "TransportPlan", "assign", "certify", "check_uniqueness",
    "concave_of_norm", "concave_sqrt", "convex_translate", "descend_step", "diff", "distance",
    "euclidean", "excess", "fit_weights", "from_grid", "gamma_range", "loss", "make_sites",
    "normalize", "objective", "parse_metric", "pnorm", "probe_admissibility", "raster_labels",
    "rebalance_ties", "solve_delta", "solve_lp", "sqeuclidean", "transport_cost", "uniform_grid",
]
