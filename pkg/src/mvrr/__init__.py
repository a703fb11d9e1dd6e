"""Multi-view reduced-rank regression with composite nuclear norm penalties."""

from .model import (
    BlockCoefficients,
    DataError,
    MultiViewDesign,
    NumericalError,
    PenaltyWeights,
    ResponseData,
    build_design,
    compute_weights,
    lambda_max,
    linear_predictor,
    masked_objective,
    naive_df,
    numerical_rank,
    objective,
)
from .solver import (
    FitResult,
    SolverOptions,
    SolverState,
    augment_ridge,
    augmented_lagrangian,
    dual_update,
    fit_gaussian,
    primal_A_update,
    primal_B_update,
    residuals,
    svt,
)
from .glm import (
    NaturalParams,
    complete_surrogate,
    fit_binary,
    fit_gaussian_missing,
    fit_model,
    majorizer_gap,
    neg_loglik_binary,
    working_response,
)
from .tuning import (
    CvReport,
    LambdaGrid,
    adaptive_refit,
    adaptive_weights,
    cross_validate,
    lambda_grid,
    solve_path,
    tune_validation,
)
from .simulate import (
    BenchmarkResult,
    SimulatedDataset,
    SimulationSpec,
    auc,
    avg_deviance,
    cross_entropy,
    generate,
    generate_validation,
    mspe,
    ols_baseline,
    run_benchmark,
    setting_spec,
    write_benchmark_csv,
    write_benchmark_summary,
)

__version__ = "0.1.0"

__all__ = [
    "BenchmarkResult",
    "BlockCoefficients",
    "CvReport",
    "DataError",
    "FitResult",
    "LambdaGrid",
    "MultiViewDesign",
    "NaturalParams",
    "NumericalError",
    "PenaltyWeights",
    "ResponseData",
    "SimulatedDataset",
    "SimulationSpec",
    "SolverOptions",
    "SolverState",
    "adaptive_refit",
    "adaptive_weights",
    "auc",
    "augment_ridge",
    "augmented_lagrangian",
    "avg_deviance",
    "build_design",
    "complete_surrogate",
    "compute_weights",
    "cross_entropy",
    "cross_validate",
    "dual_update",
    "fit_binary",
    "fit_gaussian",
    "fit_gaussian_missing",
    "fit_model",
    "generate",
    "generate_validation",
    "lambda_grid",
    "lambda_max",
    "linear_predictor",
    "majorizer_gap",
    "masked_objective",
    "mspe",
    "naive_df",
    "neg_loglik_binary",
    "numerical_rank",
    "objective",
    "ols_baseline",
    "primal_A_update",
    "primal_B_update",
    "residuals",
    "run_benchmark",
    "setting_spec",
    "solve_path",
    "svt",
    "tune_validation",
    "working_response",
    "write_benchmark_csv",
    "write_benchmark_summary",
]
