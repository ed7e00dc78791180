"""Equilibrium strategies for time-inconsistent control with
distribution-dependent rewards, verified through the equilibrium master
equation."""

from .errors import (
    DomainError,
    EmeqError,
    EmptyMeasure,
    EquilibriumBreakdown,
    FloorBreach,
    FloorHit,
    FloorSingularity,
    NoEquilibriumOfThisForm,
    NonFiniteNode,
    NonFiniteRhs,
    OverflowGuard,
    QuadratureNonConvergence,
    SchemaError,
    StepUnderflow,
    ValidationError,
    WindowOverflow,
)
from .market import (
    ClosedLoop,
    CoefFn,
    DynamicsKind,
    DynamicsSpec,
    Family,
    MarketParams,
    ProblemSpec,
    TimeGrid,
    WealthIndependent,
    gamma_and_lambda_integrals,
    load_problem,
    make_problem,
)
from .measures import EmpiricalMeasure, wasserstein2_1d
from .preferences import (
    Distortion,
    ExpUtility,
    NonlinearExpectationReward,
    identity_distortion,
    mean_es_value,
    mean_variance_reward,
    nonlinear_exp_value,
    power_distortion,
    prelec_distortion,
    rdu_value,
    rdu_value_gaussian_terminal,
    tversky_kahneman_distortion,
)
from .gaussians import (
    F123,
    H_kernel,
    HermiteRule,
    gh_expectation,
    h_pair,
    p_mu,
    std_normal_cdf,
    std_normal_pdf,
    std_normal_ppf,
)
from .odes import OdeSolution, integrate_backward, solve_lambda1_mes, solve_lambda_rdut
from .equilibrium import (
    EquilibriumProfile,
    LiftedDerivatives,
    VerificationReport,
    lifted_derivs_mes,
    lifted_derivs_nonlexp,
    lifted_derivs_rdut,
    master_operator_at_delta,
    policy_iteration,
    solve_equilibrium,
    verify_spike,
)
from .simulate import (
    PathBatch,
    estimate_J,
    flow_diagnostics,
    simulate,
    spike_derivative_mc,
    spike_strategy,
)

__version__ = "0.1.0"
