"""Difference-in-differences and synthetic-control estimation on county panels."""

from .changepoint import KnotReport, detect_knots, last_segment_trend
from .did import DidDesign, DidFit, build_design, cluster_robust_vcov, double_difference, fit_ols
from .ingest import CovariateTable, read_case_csv, read_covariate_csv
from .nbglm import NbFit, fit_nb, select_covariates, v_from_coefficients
from .panel import PanelDataset, RateSeries, TreatmentSpec, group_mean_series, period_mask, to_rates
from .selection import DonorScreen, Thresholds, detect_all_knots, screen_donors
from .synth import CovariateWeights, ScSolution, ScWeights, sc_effect, solve_inner, solve_outer

__all__ = [
    "CovariateTable", "CovariateWeights", "DidDesign", "DidFit", "DonorScreen", "KnotReport",
    "NbFit", "PanelDataset", "RateSeries", "ScSolution", "ScWeights", "Thresholds",
    "TreatmentSpec", "build_design", "cluster_robust_vcov", "detect_all_knots", "detect_knots",
    "double_difference", "fit_nb", "fit_ols", "group_mean_series", "last_segment_trend",
    "period_mask", "read_case_csv", "read_covariate_csv", "sc_effect", "screen_donors",
    "select_covariates", "solve_inner", "solve_outer", "to_rates", "v_from_coefficients",
]
__version__ = "0.1.0"
