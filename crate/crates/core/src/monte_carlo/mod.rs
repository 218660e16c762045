//! Monte Carlo comparison of estimator bias on synthetic panels with a known
//! treatment effect.

mod dgp;
mod kde;

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::Serialize;

use crate::deep_wide::{DeepWideSpec, TrainConfig};
use crate::dml::{dml_estimate_with, DmlSample, LambdaRule, NuisanceKind};
use crate::error::{Error, Result};
use crate::linear::ols_fit;
use crate::panel::{encode_fixed_effects, mean_sd};
use crate::seed;

pub use dgp::{draw_dgp, export_dgp_csv, DgpConfig, DgpDraw, DgpTruth, ExportPaths, Link, OuterMap};
pub use kde::{kde, silverman_bandwidth, Kde};

/// Largest tolerated share of failed replications per estimator.
pub const MAX_REPLICATION_FAILURE_SHARE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// OLS of the outcome on treatment, fixed-effect dummies and a random
    /// subset of the controls.
    OlsSubset,
    DmlLasso,
    DmlDw,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [EstimatorKind::OlsSubset, EstimatorKind::DmlLasso, EstimatorKind::DmlDw];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::OlsSubset => "ols_subset",
            EstimatorKind::DmlLasso => "dml_lasso",
            EstimatorKind::DmlDw => "dml_dw",
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "ols_subset" | "ols" => Ok(EstimatorKind::OlsSubset),
            "dml_lasso" => Ok(EstimatorKind::DmlLasso),
            "dml_dw" => Ok(EstimatorKind::DmlDw),
            other => Err(Error::InvalidArgument(format!("unknown estimator {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub dgp: DgpConfig,
    /// Cross-fitting repetitions per DML estimate.
    pub dml_repetitions: usize,
    pub ols_subset_size: usize,
    pub deep_wide: DeepWideSpec,
    pub train: TrainConfig,
    pub lasso: LambdaRule,
    pub kde_grid_size: usize,
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        ExperimentConfig {
            dgp: DgpConfig::desk(),
            dml_repetitions: 11,
            ols_subset_size: 3,
            deep_wide: DeepWideSpec::default(),
            train: TrainConfig::default(),
            lasso: LambdaRule::default(),
            kde_grid_size: 512,
        }
    }

    pub fn paper() -> Self {
        ExperimentConfig {
            dgp: DgpConfig::paper(),
            dml_repetitions: 51,
            ..ExperimentConfig::desk()
        }
    }

    /// Copy with derived defaults filled in.
    pub fn resolved(&self) -> Self {
        ExperimentConfig {
            dgp: self.dgp.resolved(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        if self.dml_repetitions == 0 || self.dml_repetitions % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "DML repetitions must be odd and positive, got {}",
                self.dml_repetitions
            )));
        }
        if self.ols_subset_size > self.dgp.k {
            return Err(Error::InvalidArgument(format!(
                "OLS subset of {} controls exceeds k = {}",
                self.ols_subset_size, self.dgp.k
            )));
        }
        if self.kde_grid_size < 2 {
            return Err(Error::InvalidArgument("kde grid needs at least 2 points".into()));
        }
        Ok(())
    }

    /// Nuisance learner for a DML estimator; `None` for the OLS subset.
    pub fn nuisance(&self, estimator: EstimatorKind) -> Option<NuisanceKind> {
        match estimator {
            EstimatorKind::OlsSubset => None,
            EstimatorKind::DmlLasso => Some(NuisanceKind::Lasso {
                lambda: self.lasso.clone(),
            }),
            EstimatorKind::DmlDw => Some(NuisanceKind::DeepWide {
                spec: self.deep_wide.clone(),
                train: self.train.clone(),
            }),
        }
    }
}

/// OLS of the outcome on treatment, fixed effects and `subset_size` controls
/// picked at random; returns the treatment coefficient.
pub fn ols_subset_theta(draw: &DgpDraw, subset_size: usize, seed: u64) -> Result<f64> {
    let panel = &draw.panel;
    let mut rng = seed::rng_for(seed, seed::stream::OLS_SUBSET);
    let mut chosen = sample_indices(&mut rng, panel.n_controls(), subset_size).into_vec();
    chosen.sort_unstable();
    let fe = encode_fixed_effects(panel)?;
    let n = panel.n_rows();
    let p = 1 + fe.ncols() + chosen.len();
    let mut design = DMatrix::zeros(n, p);
    design.column_mut(0).copy_from_slice(panel.treatment());
    design.columns_mut(1, fe.ncols()).copy_from(&fe.matrix);
    for (c, &j) in chosen.iter().enumerate() {
        design.set_column(1 + fe.ncols() + c, &panel.controls().column(j));
    }
    let fit = ols_fit(&design, &DVector::from_column_slice(panel.outcome()))?;
    Ok(fit.coefficients[0])
}

/// Estimate of theta0 by one estimator on one draw.
pub fn estimate_on_draw(cfg: &ExperimentConfig, draw: &DgpDraw, estimator: EstimatorKind) -> Result<f64> {
    let rep_seed = seed::derive(cfg.dgp.seed, draw.replication as u64);
    match cfg.nuisance(estimator) {
        None => ols_subset_theta(draw, cfg.ols_subset_size, rep_seed),
        Some(kind) => {
            let sample = DmlSample::from_panel(&draw.panel)?;
            let dml_seed = seed::derive(rep_seed, seed::stream::DML);
            Ok(dml_estimate_with(&sample, &kind, cfg.dml_repetitions, dml_seed)?.theta_median)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasSummary {
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    /// sd / sqrt(replications)
    pub mc_se: f64,
}

impl BiasSummary {
    pub fn from_biases(biases: &[f64]) -> Self {
        let (mean, sd) = mean_sd(biases);
        let sd = if biases.len() > 1 { sd } else { 0.0 };
        let mut sorted = biases.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n == 0 {
            f64::NAN
        } else if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        BiasSummary {
            mean,
            sd,
            median,
            mc_se: sd / (n.max(1) as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailedReplication {
    pub replication: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorBias {
    pub estimator: EstimatorKind,
    /// theta_hat - theta0 for each successful replication, in replication order.
    pub biases: Vec<f64>,
    pub replications: Vec<usize>,
    pub failures: Vec<FailedReplication>,
    pub summary: BiasSummary,
    /// `None` when the biases have no spread.
    pub kde: Option<Kde>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasReport {
    pub config: ExperimentConfig,
    pub theta0: f64,
    pub estimators: Vec<EstimatorBias>,
}

impl BiasReport {
    pub fn get(&self, estimator: EstimatorKind) -> Option<&EstimatorBias> {
        self.estimators.iter().find(|e| e.estimator == estimator)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.to_json_string()?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Writes `<prefix>_<estimator>_kde.csv` with columns `grid,density` for
    /// every estimator that has a curve.
    pub fn write_kde_csvs(&self, dir: impl AsRef<Path>, prefix: &str) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        let mut written = Vec::new();
        for e in &self.estimators {
            let Some(curve) = &e.kde else { continue };
            let path = dir.join(format!("{prefix}_{}_kde.csv", e.estimator));
            let mut w = csv::Writer::from_path(&path).map_err(|err| match err.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(&path, io),
                other => Error::Schema(format!("{other:?}")),
            })?;
            w.write_record(["grid", "density"])?;
            for (x, d) in curve.grid.iter().zip(&curve.density) {
                w.write_record([x.to_string(), d.to_string()])?;
            }
            w.flush().map_err(|err| Error::io(&path, err))?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Runs every requested estimator on `cfg.dgp.replications` independent
/// draws. Replications run in parallel and results are assembled in
/// replication order.
pub fn run_experiment(cfg: &ExperimentConfig, estimators: &[EstimatorKind]) -> Result<BiasReport> {
    cfg.validate()?;
    if estimators.is_empty() {
        return Err(Error::InvalidArgument("at least one estimator is required".into()));
    }
    let mut kinds = estimators.to_vec();
    kinds.sort_unstable();
    kinds.dedup();

    let reps = cfg.dgp.replications;
    let theta0 = cfg.dgp.theta0;
    let per_rep: Vec<Vec<std::result::Result<f64, String>>> = (0..reps)
        .into_par_iter()
        .map(|r| match draw_dgp(&cfg.dgp, r) {
            Ok(draw) => kinds
                .par_iter()
                .map(|&e| estimate_on_draw(cfg, &draw, e).map(|t| t - theta0).map_err(|err| err.to_string()))
                .collect(),
            Err(err) => kinds.iter().map(|_| Err(err.to_string())).collect(),
        })
        .collect();

    let mut out = Vec::with_capacity(kinds.len());
    for (slot, &estimator) in kinds.iter().enumerate() {
        let mut biases = Vec::new();
        let mut replications = Vec::new();
        let mut failures = Vec::new();
        for (r, row) in per_rep.iter().enumerate() {
            match &row[slot] {
                Ok(b) if b.is_finite() => {
                    biases.push(*b);
                    replications.push(r);
                }
                Ok(b) => failures.push(FailedReplication {
                    replication: r,
                    error: format!("non-finite estimate {b}"),
                }),
                Err(e) => failures.push(FailedReplication {
                    replication: r,
                    error: e.clone(),
                }),
            }
        }
        if failures.len() as f64 > MAX_REPLICATION_FAILURE_SHARE * reps as f64 || biases.is_empty() {
            return Err(Error::TooManyFailures {
                failed: failures.len(),
                total: reps,
                first: format!(
                    "{estimator}: {}",
                    failures.first().map(|f| f.error.as_str()).unwrap_or_default()
                ),
            });
        }
        let kde = if biases.len() >= 2 {
            match kde(&biases, cfg.kde_grid_size) {
                Ok(k) => Some(k),
                Err(Error::ZeroVariance(_)) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        out.push(EstimatorBias {
            estimator,
            summary: BiasSummary::from_biases(&biases),
            biases,
            replications,
            failures,
            kde,
        });
    }
    Ok(BiasReport {
        config: cfg.resolved(),
        theta0,
        estimators: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            dgp: DgpConfig {
                k: 6,
                entities: 12,
                periods: 3,
                replications: 6,
                seed: 9,
                ..DgpConfig::desk()
            },
            dml_repetitions: 3,
            ..ExperimentConfig::desk()
        }
    }

    #[test]
    fn estimator_names_round_trip() {
        for e in EstimatorKind::ALL {
            assert_eq!(e.as_str().parse::<EstimatorKind>().unwrap(), e);
        }
        assert!("ridge".parse::<EstimatorKind>().is_err());
    }

    #[test]
    fn ols_subset_report_shape() {
        let report = run_experiment(&tiny(), &[EstimatorKind::OlsSubset]).unwrap();
        let e = report.get(EstimatorKind::OlsSubset).unwrap();
        assert_eq!(e.biases.len(), 6);
        assert!(e.failures.is_empty());
        let k = e.kde.as_ref().unwrap();
        assert!((0.99..=1.01).contains(&k.integral()));
    }

    #[test]
    fn experiment_is_deterministic() {
        let cfg = tiny();
        let a = run_experiment(&cfg, &[EstimatorKind::OlsSubset, EstimatorKind::DmlLasso]).unwrap();
        let b = run_experiment(&cfg, &[EstimatorKind::DmlLasso, EstimatorKind::OlsSubset]).unwrap();
        assert_eq!(a.to_json_string().unwrap(), b.to_json_string().unwrap());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(run_experiment(&tiny(), &[]).is_err());
        let even = ExperimentConfig {
            dml_repetitions: 4,
            ..tiny()
        };
        assert!(run_experiment(&even, &[EstimatorKind::DmlLasso]).is_err());
        let big_subset = ExperimentConfig {
            ols_subset_size: 7,
            ..tiny()
        };
        assert!(big_subset.validate().is_err());
    }

    #[test]
    fn summary_of_known_values() {
        let s = BiasSummary::from_biases(&[1.0, 2.0, 3.0, 10.0]);
        assert_eq!(s.mean, 4.0);
        assert_eq!(s.median, 2.5);
        assert!((s.mc_se - s.sd / 2.0).abs() < 1e-15);
    }
}
