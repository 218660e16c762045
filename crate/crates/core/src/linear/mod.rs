//! Linear baselines: fixed-effect OLS with clustered errors, and the lasso.

mod lasso;
mod ols;
mod table;

pub use lasso::{
    default_grid, lambda_max, lasso_fit, lasso_fit_traced, lasso_lambda_cv, lasso_path, log_grid,
    soft_threshold, LassoFit, DEFAULT_FOLDS, DEFAULT_GRID_LEN, DEFAULT_GRID_RATIO, DEFAULT_MAX_ITER,
    DEFAULT_TOL,
};
pub use ols::{clustered_covariance, ols_fit, ols_fit_named, ClusterSpec, CovarianceKind, OlsFit};
pub use table::{stars, two_sided_p, RegressionTable, TableColumn};
