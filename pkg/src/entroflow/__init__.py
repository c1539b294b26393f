"""entroflow: entropy-regularized transport and entropic JKO diffusion flows.

A small numerical library for Wasserstein-style gradient flows of free
energies (heat, porous media, congestion) on cell-centered tensor grids,
built on log-domain Sinkhorn scaling, plus exact 1-D transport oracles,
closed-form references, error tables, entropic barycenters and a CSV CLI.
"""

from .grid import (
    CostOracle,
    DiscreteMeasure,
    Grid,
    build_grid,
    dense_kernel,
    gibbs_apply,
)
from .transport import (
    GammaSweepReport,
    NonConvergenceError,
    NumericalBlowupError,
    ScalingState,
    TransportPlan,
    block_approximation,
    exact_w2_1d,
    gamma_sweep,
    relative_entropy_measure,
    relative_entropy_plan,
    self_transport,
    sinkhorn,
    transport_cost,
    w2_eps,
)
from .energy import (
    EnergyModel,
    PotentialField,
    first_variation,
    free_energy,
    lambert_w,
    pointwise_prox,
    pressure,
    prox_g,
)
from .flow import (
    FlowParams,
    FlowTrajectory,
    StepDiagnostics,
    el_residual,
    interpolate,
    jko_step,
    run_flow,
    schedule_check,
)
from .reference import (
    Barenblatt,
    ErrorReport,
    ErrorTable,
    GaussianHeat,
    barenblatt_solution,
    error_table,
    gaussian_solution,
    l1_slice_error,
    reference_for_model,
    slice_errors,
)
from .barycenter import (
    BarycenterDiagnostics,
    BarycenterProblem,
    barycenter_objective,
    barycenter_solve,
)

__version__ = "0.1.0"

__all__ = [
    "Grid",
    "DiscreteMeasure",
    "CostOracle",
    "build_grid",
    "gibbs_apply",
    "dense_kernel",
    "ScalingState",
    "TransportPlan",
    "GammaSweepReport",
    "NonConvergenceError",
    "NumericalBlowupError",
    "relative_entropy_measure",
    "relative_entropy_plan",
    "self_transport",
    "sinkhorn",
    "transport_cost",
    "w2_eps",
    "exact_w2_1d",
    "block_approximation",
    "gamma_sweep",
    "EnergyModel",
    "PotentialField",
    "pressure",
    "free_energy",
    "lambert_w",
    "pointwise_prox",
    "prox_g",
    "first_variation",
    "FlowParams",
    "FlowTrajectory",
    "StepDiagnostics",
    "schedule_check",
    "jko_step",
    "run_flow",
    "interpolate",
    "el_residual",
    "GaussianHeat",
    "Barenblatt",
    "gaussian_solution",
    "barenblatt_solution",
    "reference_for_model",
    "l1_slice_error",
    "slice_errors",
    "ErrorReport",
    "ErrorTable",
    "error_table",
    "BarycenterProblem",
    "BarycenterDiagnostics",
    "barycenter_solve",
    "barycenter_objective",
    "__version__",
]
