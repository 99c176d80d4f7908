"""Least-squares clustering of panel-data models with latent group structure.

Group-specific slopes (optionally with group-by-period fixed effects) are
estimated by alternating pooled OLS and unit reassignment from many random
starts; the number of groups is selected by penalized information criteria,
including variants designed to stay reliable when some groups are small.
"""

from .errors import (
    DegenerateStartError,
    EmptyGroupError,
    EstimationError,
    InvalidSpecError,
    PanelClusterError,
    PanelFormatError,
    SelectionError,
    SingularDesignError,
    SmallGroupWarning,
)
from .estimator import (
    FitConfig,
    FitResult,
    GroupParams,
    assign,
    fit,
    group_ols,
    kmeans_once,
    match_labels,
    residuals,
)
from .inference import (
    CoefTable,
    GfeBands,
    coef_table,
    gfe_bands,
    gfe_covariance,
    slope_covariance,
)
from .panel import (
    ColumnSchema,
    Grouping,
    GroupSizeSpec,
    PanelData,
    load_panel_csv,
    save_panel_csv,
    simulated_group_sizes,
    within_transform,
)
from .selection import (
    BIC,
    BN,
    MIC1,
    MIC2,
    ICTable,
    PenaltyKind,
    n_params,
    penalty_value,
    select_k,
    select_k_detailed,
    sigma_tilde2,
)
from .simulate import (
    DgpSpec,
    ScenarioResult,
    derive_seed,
    generate,
    rmse_group3,
    run_scenario,
)

__version__ = "0.1.0"

__all__ = [
    "BIC",
    "BN",
    "CoefTable",
    "ColumnSchema",
    "DegenerateStartError",
    "DgpSpec",
    "EmptyGroupError",
    "EstimationError",
    "FitConfig",
    "FitResult",
    "GfeBands",
    "GroupParams",
    "GroupSizeSpec",
    "Grouping",
    "ICTable",
    "InvalidSpecError",
    "MIC1",
    "MIC2",
    "PanelClusterError",
    "PanelData",
    "PanelFormatError",
    "PenaltyKind",
    "ScenarioResult",
    "SelectionError",
    "SingularDesignError",
    "SmallGroupWarning",
    "assign",
    "coef_table",
    "derive_seed",
    "fit",
    "generate",
    "gfe_bands",
    "gfe_covariance",
    "group_ols",
    "kmeans_once",
    "load_panel_csv",
    "match_labels",
    "n_params",
    "penalty_value",
    "residuals",
    "rmse_group3",
    "run_scenario",
    "save_panel_csv",
    "select_k",
    "select_k_detailed",
    "sigma_tilde2",
    "simulated_group_sizes",
    "slope_covariance",
    "within_transform",
]
