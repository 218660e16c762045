//! Double machine learning for partially linear panel models.
//!
//! The crate estimates the coefficient on a treatment in
//! `outcome = theta * treatment + g(controls, fixed effects) + u` by
//! cross-fitting nuisance learners (a deep-wide network, the lasso, or OLS)
//! and solving the orthogonalized score on held-out halves. Fixed-effect OLS
//! baselines and a Monte Carlo harness for estimator bias are included.

pub mod deep_wide;
pub mod dml;
pub mod error;
pub mod linear;
pub mod monte_carlo;
pub mod panel;
pub mod seed;

pub use deep_wide::{DeepWideParams, DeepWideSpec, TrainConfig, TrainTrace};
pub use dml::{DmlConfig, DmlResult, LambdaRule, NuisanceKind};
pub use error::{Error, Result};
pub use linear::{LassoFit, OlsFit};
pub use monte_carlo::{BiasReport, DgpConfig, DgpDraw, EstimatorKind};
pub use panel::{
    ControlGroup, CountyClass, CrossFitSplit, FixedEffectDesign, PanelDataset, Schema, StandardizationStats,
    TrainValSplit,
};
