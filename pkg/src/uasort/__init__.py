"""Uncertainty-adjusted sorting of machine-learning return predictions."""
from .backtest import RunConfig, run_backtest
from .calibration import build_bounds, cross_fit_residuals, empirical_halfwidth, normal_halfwidth
from .evaluation import annualize, factor_alpha, newey_west_tstat, performance_report, sharpe
from .experiments import fe_regression, placebo_suite, ranking_improvements, shuffle_halfwidths
from .panel import PanelDataset, SyntheticConfig, generate_synthetic, load_panel, quantile_transform
from .portfolio import assign_deciles, build_long_short, realize, scale_path
from .predictors import fit_enet, fit_pcr, fit_pls, grid_search, rolling_schedule

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "run_backtest",
    "build_bounds", "cross_fit_residuals", "empirical_halfwidth", "normal_halfwidth",
    "annualize", "factor_alpha", "newey_west_tstat", "performance_report", "sharpe",
    "fe_regression", "placebo_suite", "ranking_improvements", "shuffle_halfwidths",
    "PanelDataset", "SyntheticConfig", "generate_synthetic", "load_panel", "quantile_transform",
    "assign_deciles", "build_long_short", "realize", "scale_path",
    "fit_enet", "fit_pcr", "fit_pls", "grid_search", "rolling_schedule",
]
