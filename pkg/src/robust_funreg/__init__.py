"""Robust functional linear regression between sparsely observed curves.

Pipeline: reduced-rank t (or Normal) FPCA of each sample gives component
scores; a trimmed t-likelihood M-estimator regresses response scores on
predictor scores; Wald, bootstrap and permutation tests assess the fit.
"""

from .data import Curve, DataError, LongitudinalSample, read_long_csv, write_long_csv
from .fpca import (
    FitError,
    FitOptions,
    ReducedRankModel,
    ScoreSet,
    fit_reduced_rank,
    predict_scores,
    score_curves,
    select_rank,
)
from .inference import (
    TestResult,
    analytic_test,
    bootstrap_covariance,
    permutation_test,
    sandwich,
    wald_ls,
    wald_test,
)
from .regression import (
    GmtConfig,
    GmtFit,
    LinearRho,
    TRho,
    WeightScheme,
    fit_estimator,
    gmt_fit,
    least_squares,
    predict_response,
    slope_surface,
)
from .splines import SplineBasis, build_basis, evaluate_basis, gram_matrix

__all__ = [
    "Curve", "DataError", "LongitudinalSample", "read_long_csv", "write_long_csv",
    "FitError", "FitOptions", "ReducedRankModel", "ScoreSet", "fit_reduced_rank",
    "predict_scores", "score_curves", "select_rank",
    "TestResult", "analytic_test", "bootstrap_covariance", "permutation_test",
    "sandwich", "wald_ls", "wald_test",
    "GmtConfig", "GmtFit", "LinearRho", "TRho", "WeightScheme", "fit_estimator",
    "gmt_fit", "least_squares", "predict_response", "slope_surface",
    "SplineBasis", "build_basis", "evaluate_basis", "gram_matrix",
]

__version__ = "0.1.0"
