"""Distributed fixed-point iteration over a communication graph, with
spectral certification of the step-size threshold and linear rate."""

from .errors import (
    AssumptionViolatedError,
    ConditionsNotMetError,
    DbpiError,
    DimensionMismatchError,
    DisconnectedGraphError,
    DivergedError,
    InvalidConfigError,
    InvalidEdgeError,
    NonSymmetricMatrixError,
    NoPositiveAlphaError,
    NotFixedPointError,
    SlopeMismatchError,
    WindowTooShortError,
)
from .graph import (
    CommGraph,
    GaugeMatrix,
    WeightMatrix,
    build_graph,
    gauge_from_custom,
    gauge_from_weights,
    kernel_projector,
    metropolis_weights,
)
from .iteration import (
    IterationParams,
    StopRule,
    Trajectory,
    consensus_error,
    lifted_step,
    limit_dual,
    reduced_step,
    run_algorithm1,
    run_lifted,
    run_parametric,
    run_reduced,
)
from .operators import (
    AgentMap,
    AgentSystem,
    CentralizedRun,
    FixedPointCertificate,
    affine_map,
    average_map,
    centralized_picard,
    certify_fixed_point,
    finite_difference_jacobian,
    gradient_of_quadratic,
    jacobian_of_average,
    jacobian_of_residual,
    newton_fixed_point,
    scalar_logistic,
    stacked_residual,
)
from .spectral import (
    AlphaStarResult,
    DerivativeCheckReport,
    EigencurveResult,
    RateReport,
    RootConditionReport,
    RootPair,
    SemisimpleReport,
    SpectralReport,
    base_jacobian,
    build_spectral_report,
    check_root_conditions,
    check_semisimple,
    derivative_check,
    embed_fixed_point,
    empirical_rate,
    find_alpha_star,
    gamma_roots,
    make_rho_evaluator,
    multiset_distance,
    reduced_jacobian,
    spectral_radius,
    trace_eigencurves,
)

__version__ = "0.1.0"
