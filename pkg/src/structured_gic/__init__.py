"""Model selection for structured sparsity with a generalized information criterion.

Group-sparse GLMs (group lasso) and low-rank trace regression (nuclear norm)
share one interface: a decomposable norm paired with model subspaces, a convex
loss, a proximal-gradient solver, and GIC selection over either an explicit
candidate list or the models read off a regularization path.
"""
from .errors import (
    ConfigError,
    DegenerateData,
    InvalidShape,
    NotConverged,
    PsiBudgetExceeded,
    SingularFitWarning,
    StructuredGicError,
)
from .experiments import (
    GroupGlmDesign,
    LowRankDesign,
    McConfig,
    McReport,
    SelectorConfig,
    check_assumptions,
    gen_group_glm,
    gen_lowrank,
    monte_carlo,
    path_contains_truth,
    standard_group_config,
    standard_lowrank_config,
)
from .losses import (
    Dataset,
    LossProblem,
    loss_grad,
    loss_value,
    matrix_regression,
    read_csv_dataset,
    read_matrix_json,
    rsc_probe,
    step_bound,
    tabular,
)
from .model_space import (
    ElementwiseL1,
    GroupL2,
    GroupPartition,
    GroupSupport,
    LowRank,
    Nuclear,
    compatibility_witness,
    decompose_check,
    phi,
    phi_dual,
    project,
    project_perp,
    prox,
    psi_sq,
    same_subspace,
)
from .path_gic import (
    GicResult,
    PathPoint,
    PathSelection,
    PenaltySchedule,
    a_n,
    all_group_supports,
    best_group_support,
    extract_model,
    gic,
    lambda_grid,
    schedule_for,
    select_exhaustive,
    select_on_path,
    xi_n,
)
from .solver import SolveOptions, SolveResult, kkt_residual, restricted_fit, solve_regularized

__version__ = "0.1.0"
