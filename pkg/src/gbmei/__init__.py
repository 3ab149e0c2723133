"""SDE exponential integrators built on the geometric-Brownian-motion
propagator, plus the baselines they are benchmarked against and a
Monte-Carlo strong-convergence harness."""

from .harness import (
    ErrorTable,
    ExclusionError,
    ExperimentConfig,
    MomentTrajectory,
    efficiency,
    fit_order,
    moment_trajectory,
    strong_error,
)
from .matexp import check_commutators, gbm_propagator, mat_exp, phi1, z_propagator
from .model import SdeProblem, builtin, h_tensor, make_problem
from .noise import GridSpec, NoiseBatch, aggregate_iterated, coarsen_increments, generate
from .schemes import (
    KINDS,
    PathResult,
    SchemeSpec,
    StepContext,
    backend_name,
    integrate_path,
    path_runner,
    scheme_spec,
    step,
)

__version__ = "0.1.0"

__all__ = [
    "ErrorTable",
    "ExclusionError",
    "ExperimentConfig",
    "GridSpec",
    "KINDS",
    "MomentTrajectory",
    "NoiseBatch",
    "PathResult",
    "SchemeSpec",
    "SdeProblem",
    "StepContext",
    "aggregate_iterated",
    "backend_name",
    "builtin",
    "check_commutators",
    "coarsen_increments",
    "efficiency",
    "fit_order",
    "gbm_propagator",
    "generate",
    "h_tensor",
    "integrate_path",
    "make_problem",
    "mat_exp",
    "moment_trajectory",
    "path_runner",
    "phi1",
    "scheme_spec",
    "step",
    "strong_error",
    "z_propagator",
    "__version__",
]
