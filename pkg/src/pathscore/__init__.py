"""Pathwise Monte-Carlo score estimation for random dynamical systems and SDEs.

The score of the state's law at time T (the gradient of its log density) is
expressed as a conditional expectation of a per-path covector: a kernel
(likelihood-ratio) sum for additive noise, a divergence (transfer-operator)
recursion for short horizons, and their scheduled divergence-kernel mixture,
which handles state-dependent noise over long horizons.  A deterministic
quadrature oracle validates every one-step identity in one dimension.
"""

from .discrete import (
    CovectorExplosionError,
    ScalarChain,
    SingularStepError,
    StepGeometry,
    UnsupportedEstimatorError,
    euler_chain_1d,
    linear_chain,
    nstep_divergence_score,
    nstep_divker_forward,
    nstep_divker_noh0,
    nstep_kernel_score,
    one_step_divergence_score_term,
    one_step_divker_score_term,
    one_step_kernel_score_term,
    step_geometry_exact,
    step_geometry_generic,
    transition_density,
)
from .estimate import (
    BinGrid,
    BinnedScores,
    ScoreEstimate,
    bin_and_average,
    bin_and_average_arrays,
    linear_response_deviation,
    linear_response_deviation_arrays,
)
from .model import (
    InitialDistribution,
    ModelError,
    NoiseKernel,
    SystemModel,
    cubic_sde_model,
    gaussian_initial,
    gaussian_kernel,
    linear_sde_model,
    lorenz96_model,
    point_mass_initial,
    validate_derivatives,
)
from .oracle import (
    GridDensity,
    OracleError,
    gaussian_grid_density,
    grid_score,
    make_grid,
    ou_analytic_score,
    propagate_density,
    quadrature_conditional_expectation,
)
from .paths import PathRecord, SimulationPlan, path_rng, simulate_discrete_path, simulate_sde_path
from .runner import run_estimator, stream_covectors
from .schedules import (
    Schedule,
    ScheduleError,
    beta_linear,
    constant_schedule,
    reciprocal_step_schedule,
    safe_alpha_estimate,
)
from .sde import (
    CovectorState,
    drive_covector,
    sde_divergence_step,
    sde_divker_noh0_step,
    sde_divker_step,
    sde_kernel_score,
    sde_step_terms,
)

__version__ = "0.1.0"
