//! Cross-fitted double machine learning for the partially linear model
//! `outcome = theta * treatment + g(x) + u`, `treatment = m(x) + v`.
//!
//! Nuisances are fitted on one half of the rows and evaluated on the other;
//! theta solves the score `sum v_hat * (outcome - g_hat - theta * treatment) = 0`
//! on the evaluation half. The two half-sample estimates are averaged, and
//! the whole procedure is repeated over independent splits with the median
//! reported.
//!
//! `g_hat` targets the structural `g` of the outcome equation. Learners only
//! see the controls and fixed effects, so they estimate `E[outcome | x]` and
//! `E[treatment | x]`; `g_hat` is recovered as
//! `E_hat[outcome | x] - theta_aux * E_hat[treatment | x]`, where `theta_aux`
//! is the partialling-out slope on the fitting half.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::deep_wide::{self, DeepWideParams, DeepWideSpec, NetInputs, TrainConfig};
use crate::error::{Error, Result};
use crate::linear::{self, ols_fit, LassoFit};
use crate::panel::{self, encode_fixed_effects, split_crossfit, standardize, Column, ControlGroup, PanelDataset};
use crate::seed;

/// Denominator guard: |sum v_hat * treatment| must exceed this times N.
pub const DEGENERATE_TOL: f64 = 1e-10;
/// Score-zero check: |sum psi| must stay below this times N.
pub const SCORE_TOL: f64 = 1e-8;
/// Largest tolerated share of failed repetitions.
pub const MAX_FAILURE_SHARE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum LambdaRule {
    Fixed { lambda: f64 },
    CrossValidated { folds: usize, grid_len: usize, grid_ratio: f64 },
}

impl Default for LambdaRule {
    fn default() -> Self {
        LambdaRule::CrossValidated {
            folds: linear::DEFAULT_FOLDS,
            grid_len: linear::DEFAULT_GRID_LEN,
            grid_ratio: linear::DEFAULT_GRID_RATIO,
        }
    }
}

/// Which learner fits the two nuisance functions.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NuisanceKind {
    DeepWide { spec: DeepWideSpec, train: TrainConfig },
    Lasso { lambda: LambdaRule },
    Ols,
}

impl NuisanceKind {
    pub fn deep_wide_default() -> Self {
        NuisanceKind::DeepWide {
            spec: DeepWideSpec::default(),
            train: TrainConfig::default(),
        }
    }

    pub fn lasso_cv() -> Self {
        NuisanceKind::Lasso {
            lambda: LambdaRule::default(),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            NuisanceKind::DeepWide { .. } => "dml-dw",
            NuisanceKind::Lasso { .. } => "dml-lasso",
            NuisanceKind::Ols => "dml-ols",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DmlConfig {
    pub repetitions: usize,
    pub nuisance: NuisanceKind,
    pub seed: u64,
}

impl DmlConfig {
    pub fn new(nuisance: NuisanceKind, repetitions: usize, seed: u64) -> Self {
        DmlConfig {
            repetitions,
            nuisance,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 || self.repetitions % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "repetitions must be odd and positive, got {}",
                self.repetitions
            )));
        }
        Ok(())
    }
}

/// Estimation inputs: outcome, treatment, controls and the fixed-effect
/// design, all row aligned.
#[derive(Debug, Clone)]
pub struct DmlSample {
    pub outcome: Vec<f64>,
    pub treatment: Vec<f64>,
    pub controls: DMatrix<f64>,
    pub fixed_effects: DMatrix<f64>,
}

impl DmlSample {
    pub fn new(outcome: Vec<f64>, treatment: Vec<f64>, controls: DMatrix<f64>, fixed_effects: DMatrix<f64>) -> Result<Self> {
        let n = outcome.len();
        if treatment.len() != n || controls.nrows() != n || fixed_effects.nrows() != n {
            return Err(Error::Dimension("outcome, treatment, controls and fixed effects differ in rows".into()));
        }
        if n < 2 {
            return Err(Error::TooSmall(format!("estimation needs at least 2 rows, got {n}")));
        }
        Ok(DmlSample {
            outcome,
            treatment,
            controls,
            fixed_effects,
        })
    }

    /// Uses the panel's outcome, treatment and controls with entity and
    /// period fixed effects.
    pub fn from_panel(d: &PanelDataset) -> Result<Self> {
        let fe = encode_fixed_effects(d)?;
        DmlSample::new(d.outcome().to_vec(), d.treatment().to_vec(), d.controls().clone(), fe.matrix)
    }

    pub fn n_rows(&self) -> usize {
        self.outcome.len()
    }
}

/// Nuisance values on the evaluation rows.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceEstimates {
    pub g_hat: Vec<f64>,
    pub m_hat: Vec<f64>,
    /// treatment - m_hat
    pub v_hat: Vec<f64>,
}

impl NuisanceEstimates {
    pub fn new(g_hat: Vec<f64>, m_hat: Vec<f64>, treatment: &[f64]) -> Result<Self> {
        if g_hat.len() != m_hat.len() || m_hat.len() != treatment.len() {
            return Err(Error::Dimension("nuisance vectors must share the sample length".into()));
        }
        let v_hat = treatment.iter().zip(&m_hat).map(|(t, m)| t - m).collect();
        Ok(NuisanceEstimates { g_hat, m_hat, v_hat })
    }
}

/// A fitted regression of one variable on controls and fixed effects.
#[derive(Debug, Clone)]
pub enum Learner {
    Ols {
        /// Columns of [fixed effects | controls] kept in the fit.
        columns: Vec<usize>,
        coefficients: DVector<f64>,
    },
    Lasso {
        columns: Vec<usize>,
        means: Vec<f64>,
        sds: Vec<f64>,
        fit: LassoFit,
    },
    DeepWide {
        spec: DeepWideSpec,
        params: DeepWideParams,
        selected_epoch: usize,
    },
}

fn combined_row_value(sample: &DmlSample, row: usize, col: usize) -> f64 {
    let f = sample.fixed_effects.ncols();
    if col < f {
        sample.fixed_effects[(row, col)]
    } else {
        sample.controls[(row, col - f)]
    }
}

fn combined_design(sample: &DmlSample, rows: &[usize], columns: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), columns.len(), |i, j| combined_row_value(sample, rows[i], columns[j]))
}

fn net_inputs(sample: &DmlSample, rows: &[usize]) -> Result<NetInputs> {
    NetInputs::new(&sample.controls.select_rows(rows), &sample.fixed_effects.select_rows(rows))
}

fn values_at(v: &[f64], rows: &[usize]) -> Vec<f64> {
    rows.iter().map(|&i| v[i]).collect()
}

impl Learner {
    pub fn predict(&self, sample: &DmlSample, rows: &[usize]) -> Result<Vec<f64>> {
        match self {
            Learner::Ols { columns, coefficients } => {
                let x = combined_design(sample, rows, columns);
                Ok((x * coefficients).iter().copied().collect())
            }
            Learner::Lasso { columns, means, sds, fit } => {
                let mut x = combined_design(sample, rows, columns);
                for (j, mut col) in x.column_iter_mut().enumerate() {
                    col.apply(|v| *v = (*v - means[j]) / sds[j]);
                }
                Ok(fit.predict(&x).iter().copied().collect())
            }
            Learner::DeepWide { spec, params, .. } => deep_wide::predict(params, spec, &net_inputs(sample, rows)?),
        }
    }

    fn fit(kind: &NuisanceKind, sample: &DmlSample, rows: &[usize], target: &[f64], seed: u64) -> Result<Learner> {
        let y = values_at(target, rows);
        match kind {
            NuisanceKind::Ols => fit_ols_learner(sample, rows, &y),
            NuisanceKind::Lasso { lambda } => fit_lasso_learner(sample, rows, &y, lambda, seed),
            NuisanceKind::DeepWide { spec, train } => {
                let inputs = net_inputs(sample, rows)?;
                let local: Vec<usize> = (0..rows.len()).collect();
                let split = panel::split_train_val(&local, seed)?;
                let cfg = TrainConfig { seed, ..train.clone() };
                let (params, trace) = deep_wide::train(spec, &cfg, &inputs, &y, &split)?;
                Ok(Learner::DeepWide {
                    spec: spec.clone(),
                    params,
                    selected_epoch: trace.selected_epoch,
                })
            }
        }
    }
}

/// Columns of [fixed effects | controls] that vary on `rows`, plus the first
/// constant nonzero column (the intercept) when present.
fn informative_columns(sample: &DmlSample, rows: &[usize], keep_intercept: bool) -> Vec<usize> {
    let p = sample.fixed_effects.ncols() + sample.controls.ncols();
    let mut have_intercept = !keep_intercept;
    (0..p)
        .filter(|&c| {
            let first = combined_row_value(sample, rows[0], c);
            let varies = rows.iter().any(|&r| combined_row_value(sample, r, c) != first);
            if varies {
                true
            } else if !have_intercept && first != 0.0 {
                have_intercept = true;
                true
            } else {
                false
            }
        })
        .collect()
}

fn fit_ols_learner(sample: &DmlSample, rows: &[usize], y: &[f64]) -> Result<Learner> {
    let mut columns = informative_columns(sample, rows, true);
    let yv = DVector::from_column_slice(y);
    // Dummies can become collinear on a subsample; drop them and refit.
    for _ in 0..8 {
        let x = combined_design(sample, rows, &columns);
        match ols_fit(&x, &yv) {
            Ok(fit) => {
                return Ok(Learner::Ols {
                    columns,
                    coefficients: fit.coefficients,
                })
            }
            Err(Error::RankDeficient { columns: dep }) if !dep.is_empty() => {
                columns = columns
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| !dep.contains(j))
                    .map(|(_, &c)| c)
                    .collect();
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::RankDeficient { columns: vec![] })
}

fn fit_lasso_learner(sample: &DmlSample, rows: &[usize], y: &[f64], rule: &LambdaRule, seed: u64) -> Result<Learner> {
    let columns = informative_columns(sample, rows, false);
    let mut x = combined_design(sample, rows, &columns);
    let mut means = Vec::with_capacity(columns.len());
    let mut sds = Vec::with_capacity(columns.len());
    for mut col in x.column_iter_mut() {
        let (m, s) = panel::mean_sd(col.as_slice());
        col.apply(|v| *v = (*v - m) / s);
        means.push(m);
        sds.push(s);
    }
    let yv = DVector::from_column_slice(y);
    let lambda = match rule {
        LambdaRule::Fixed { lambda } => *lambda,
        LambdaRule::CrossValidated { folds, grid_len, grid_ratio } => {
            let lmax = linear::lambda_max(&x, &yv)?;
            if lmax > 0.0 {
                let grid = linear::log_grid(lmax, *grid_ratio, *grid_len);
                linear::lasso_lambda_cv(&x, &yv, *folds, &grid, seed)?
            } else {
                0.0
            }
        }
    };
    let fit = linear::lasso_fit(&x, &yv, lambda, linear::DEFAULT_TOL, linear::DEFAULT_MAX_ITER)?;
    Ok(Learner::Lasso { columns, means, sds, fit })
}

/// Outcome and treatment learners fitted on one half sample.
#[derive(Debug, Clone)]
pub struct NuisanceModels {
    pub outcome: Learner,
    pub treatment: Learner,
    /// Partialling-out slope on the fitting rows, used to map the outcome
    /// regression to the structural `g`.
    pub theta_aux: f64,
}

impl NuisanceModels {
    pub fn estimates(&self, sample: &DmlSample, rows: &[usize]) -> Result<NuisanceEstimates> {
        let l_hat = self.outcome.predict(sample, rows)?;
        let m_hat = self.treatment.predict(sample, rows)?;
        let g_hat = l_hat.iter().zip(&m_hat).map(|(l, m)| l - self.theta_aux * m).collect();
        NuisanceEstimates::new(g_hat, m_hat, &values_at(&sample.treatment, rows))
    }
}

/// Fits both nuisance learners using only `rows`.
pub fn fit_nuisances(sample: &DmlSample, rows: &[usize], kind: &NuisanceKind, seed: u64) -> Result<NuisanceModels> {
    if rows.is_empty() {
        return Err(Error::EmptyPanel("nuisance sample is empty".into()));
    }
    let outcome = Learner::fit(kind, sample, rows, &sample.outcome, seed::derive(seed, seed::stream::OUTCOME_NUISANCE))?;
    let treatment = Learner::fit(kind, sample, rows, &sample.treatment, seed::derive(seed, seed::stream::TREATMENT_NUISANCE))?;
    let l_hat = outcome.predict(sample, rows)?;
    let m_hat = treatment.predict(sample, rows)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (j, &i) in rows.iter().enumerate() {
        let v = sample.treatment[i] - m_hat[j];
        num += v * (sample.outcome[i] - l_hat[j]);
        den += v * v;
    }
    // An interpolating treatment fit leaves no residual variation; fall back
    // to the plain outcome regression.
    let theta_aux = if den > DEGENERATE_TOL * rows.len() as f64 { num / den } else { 0.0 };
    Ok(NuisanceModels {
        outcome,
        treatment,
        theta_aux,
    })
}

/// Theta on one evaluation half with its score contributions.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitTheta {
    pub theta: f64,
    /// sum v_hat * treatment
    pub jacobian_sum: f64,
    /// v_hat * (outcome - g_hat - theta * treatment) per row.
    pub score: Vec<f64>,
}

/// Solves the orthogonal score on the evaluation rows.
pub fn theta_on_split(outcome: &[f64], treatment: &[f64], est: &NuisanceEstimates) -> Result<SplitTheta> {
    let n = outcome.len();
    if treatment.len() != n || est.v_hat.len() != n || est.g_hat.len() != n {
        return Err(Error::Dimension("evaluation vectors differ in length".into()));
    }
    let mut den = 0.0;
    let mut num = 0.0;
    for i in 0..n {
        den += est.v_hat[i] * treatment[i];
        num += est.v_hat[i] * (outcome[i] - est.g_hat[i]);
    }
    let threshold = DEGENERATE_TOL * n as f64;
    if !(den.abs() > threshold) {
        return Err(Error::DegenerateTreatment {
            denominator: den.abs(),
            threshold,
        });
    }
    let theta = num / den;
    let score: Vec<f64> = (0..n)
        .map(|i| est.v_hat[i] * (outcome[i] - est.g_hat[i] - theta * treatment[i]))
        .collect();
    let residual = score.iter().sum::<f64>().abs();
    if !(residual < SCORE_TOL * n as f64) {
        return Err(Error::ScoreNotZero { residual, n });
    }
    Ok(SplitTheta {
        theta,
        jacobian_sum: den,
        score,
    })
}

/// Source of nuisance values for the evaluation half given the fitting half.
pub trait NuisanceSource: Sync {
    fn estimates(&self, sample: &DmlSample, fit_rows: &[usize], eval_rows: &[usize], seed: u64) -> Result<NuisanceEstimates>;
}

impl NuisanceSource for NuisanceKind {
    fn estimates(&self, sample: &DmlSample, fit_rows: &[usize], eval_rows: &[usize], seed: u64) -> Result<NuisanceEstimates> {
        fit_nuisances(sample, fit_rows, self, seed)?.estimates(sample, eval_rows)
    }
}

/// Known nuisance functions evaluated at every row, ignoring the fitting
/// half.
#[derive(Debug, Clone)]
pub struct OracleNuisances {
    pub g: Vec<f64>,
    pub m: Vec<f64>,
}

impl NuisanceSource for OracleNuisances {
    fn estimates(&self, sample: &DmlSample, _fit_rows: &[usize], eval_rows: &[usize], _seed: u64) -> Result<NuisanceEstimates> {
        NuisanceEstimates::new(
            values_at(&self.g, eval_rows),
            values_at(&self.m, eval_rows),
            &values_at(&sample.treatment, eval_rows),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossFitEstimate {
    pub theta: f64,
    pub se: f64,
    /// Theta on the main half (fitted on aux) and on the aux half.
    pub fold_thetas: [f64; 2],
}

/// Averages the two half-sample estimates for an explicit split. The
/// standard error pools the score over both halves:
/// sigma^2 = mean(psi^2) / mean(v_hat * treatment)^2 and se = sigma / sqrt(N).
pub fn theta_crossfit_with_split(
    sample: &DmlSample,
    source: &dyn NuisanceSource,
    split: &panel::CrossFitSplit,
    seed: u64,
) -> Result<CrossFitEstimate> {
    let halves = [(&split.aux, &split.main), (&split.main, &split.aux)];
    let mut fold = Vec::with_capacity(2);
    for (h, (fit_rows, eval_rows)) in halves.into_iter().enumerate() {
        let est = source.estimates(sample, fit_rows, eval_rows, seed::derive(seed, h as u64))?;
        let st = theta_on_split(&values_at(&sample.outcome, eval_rows), &values_at(&sample.treatment, eval_rows), &est)?;
        fold.push((est, st, eval_rows));
    }
    let theta = 0.5 * (fold[0].1.theta + fold[1].1.theta);
    let n = sample.n_rows() as f64;
    let mut jac = 0.0;
    let mut psi2 = 0.0;
    for (est, st, rows) in &fold {
        jac += st.jacobian_sum;
        for (j, &i) in rows.iter().enumerate() {
            let psi = est.v_hat[j] * (sample.outcome[i] - est.g_hat[j] - theta * sample.treatment[i]);
            psi2 += psi * psi;
        }
    }
    let j0 = jac / n;
    let sigma2 = (psi2 / n) / (j0 * j0);
    Ok(CrossFitEstimate {
        theta,
        se: (sigma2 / n).sqrt(),
        fold_thetas: [fold[0].1.theta, fold[1].1.theta],
    })
}

/// One cross-fitting round on a random split drawn from `seed`.
pub fn theta_crossfit(sample: &DmlSample, source: &dyn NuisanceSource, seed: u64) -> Result<CrossFitEstimate> {
    let split = split_crossfit(sample.n_rows(), seed)?;
    theta_crossfit_with_split(sample, source, &split, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Repetition {
    pub seed: u64,
    pub theta: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DmlResult {
    pub theta_median: f64,
    pub standard_error: f64,
    pub per_repetition_thetas: Vec<f64>,
    pub per_repetition_ses: Vec<f64>,
    pub seeds: Vec<u64>,
    pub n_obs: usize,
    pub failed_repetitions: usize,
}

impl DmlResult {
    /// `{theta_median, se, n, repetitions: [{seed, theta, se}], config}`.
    pub fn to_json(&self, config: &impl Serialize) -> serde_json::Value {
        let reps: Vec<Repetition> = self
            .seeds
            .iter()
            .zip(&self.per_repetition_thetas)
            .zip(&self.per_repetition_ses)
            .map(|((&seed, &theta), &se)| Repetition { seed, theta, se })
            .collect();
        serde_json::json!({
            "theta_median": self.theta_median,
            "se": self.standard_error,
            "n": self.n_obs,
            "failed_repetitions": self.failed_repetitions,
            "repetitions": reps,
            "config": config,
        })
    }
}

/// Median as an order statistic: the middle value for odd lengths, the
/// lower middle value otherwise.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

/// Aggregates repeated cross-fits: theta is the median, and the reported
/// error is the median of sqrt(se_r^2 + (theta_r - theta_median)^2).
pub fn aggregate_repetitions(reps: &[Repetition], n_obs: usize, failed: usize) -> DmlResult {
    let thetas: Vec<f64> = reps.iter().map(|r| r.theta).collect();
    let theta_median = median(&thetas);
    let adjusted: Vec<f64> = reps
        .iter()
        .map(|r| (r.se * r.se + (r.theta - theta_median).powi(2)).sqrt())
        .collect();
    DmlResult {
        theta_median,
        standard_error: median(&adjusted),
        per_repetition_thetas: thetas,
        per_repetition_ses: reps.iter().map(|r| r.se).collect(),
        seeds: reps.iter().map(|r| r.seed).collect(),
        n_obs,
        failed_repetitions: failed,
    }
}

/// Runs `repetitions` cross-fits with seeds `seed + 1 ..= seed + R` in
/// parallel and aggregates them by the median.
pub fn dml_estimate_with(sample: &DmlSample, source: &dyn NuisanceSource, repetitions: usize, seed: u64) -> Result<DmlResult> {
    if repetitions == 0 || repetitions % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "repetitions must be odd and positive, got {repetitions}"
        )));
    }
    let outcomes: Vec<(u64, Result<CrossFitEstimate>)> = (1..=repetitions as u64)
        .into_par_iter()
        .map(|r| {
            let s = seed.wrapping_add(r);
            (s, theta_crossfit(sample, source, s))
        })
        .collect();
    let mut reps = Vec::with_capacity(repetitions);
    let mut errors = Vec::new();
    for (s, out) in outcomes {
        match out {
            Ok(est) => reps.push(Repetition {
                seed: s,
                theta: est.theta,
                se: est.se,
            }),
            Err(e) => errors.push(e),
        }
    }
    if errors.len() as f64 > MAX_FAILURE_SHARE * repetitions as f64 || reps.is_empty() {
        return Err(Error::TooManyFailures {
            failed: errors.len(),
            total: repetitions,
            first: errors.first().map(ToString::to_string).unwrap_or_default(),
        });
    }
    Ok(aggregate_repetitions(&reps, sample.n_rows(), errors.len()))
}

pub fn dml_estimate(sample: &DmlSample, cfg: &DmlConfig) -> Result<DmlResult> {
    cfg.validate()?;
    dml_estimate_with(sample, &cfg.nuisance, cfg.repetitions, cfg.seed)
}

/// Outcome of [`estimate_effect`] with the preparation it applied.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectEstimate {
    pub result: DmlResult,
    pub outcome: String,
    pub treatment: String,
    pub control_groups: Vec<String>,
    pub n_controls: usize,
    /// Controls constant on the sample, left out before standardizing.
    pub dropped_constant_controls: Vec<String>,
}

/// Effect of `treatment_col` on `outcome_col` with controls restricted to
/// `include_groups` (all controls when `None`). Outcome, treatment and
/// controls are standardized before estimation.
pub fn estimate_effect(
    d: &PanelDataset,
    outcome_col: &str,
    treatment_col: &str,
    include_groups: Option<&BTreeSet<ControlGroup>>,
    cfg: &DmlConfig,
) -> Result<EffectEstimate> {
    cfg.validate()?;
    let prepared = prepare_effect_panel(d, outcome_col, treatment_col, include_groups)?;
    let sample = DmlSample::from_panel(&prepared.panel)?;
    let result = dml_estimate(&sample, cfg)?;
    Ok(EffectEstimate {
        result,
        outcome: outcome_col.to_owned(),
        treatment: treatment_col.to_owned(),
        control_groups: prepared.groups,
        n_controls: prepared.panel.n_controls(),
        dropped_constant_controls: prepared.dropped,
    })
}

/// Standardized panel with the requested roles and control groups.
#[derive(Debug, Clone)]
pub struct PreparedPanel {
    pub panel: PanelDataset,
    pub groups: Vec<String>,
    pub dropped: Vec<String>,
}

pub fn prepare_effect_panel(
    d: &PanelDataset,
    outcome_col: &str,
    treatment_col: &str,
    include_groups: Option<&BTreeSet<ControlGroup>>,
) -> Result<PreparedPanel> {
    let keep: Vec<String> = match include_groups {
        None => d.control_names().to_vec(),
        Some(groups) => {
            let present = d.groups_present();
            if let Some(g) = groups.iter().find(|g| !present.contains(g)) {
                return Err(Error::Schema(format!("control group {g} has no columns in this panel")));
            }
            d.control_names()
                .iter()
                .filter(|c| d.control_groups().get(*c).is_some_and(|g| groups.contains(g)))
                .cloned()
                .collect()
        }
    };
    let roled = d.with_roles(outcome_col, treatment_col, &keep)?;
    let mut dropped = Vec::new();
    let varying: Vec<String> = roled
        .control_names()
        .iter()
        .enumerate()
        .filter(|(j, name)| {
            let (_, sd) = panel::mean_sd(&roled.column_values(Column::Control(*j)));
            let keep = sd > 0.0;
            if !keep {
                dropped.push((*name).clone());
            }
            keep
        })
        .map(|(_, n)| n.clone())
        .collect();
    let roled = if dropped.is_empty() {
        roled
    } else {
        roled.with_roles(outcome_col, treatment_col, &varying)?
    };
    let (panel, _) = standardize(&roled, &Column::all(&roled))?;
    let groups = match include_groups {
        None => panel.groups_present().iter().map(|g| g.to_string()).collect(),
        Some(g) => g.iter().map(|g| g.to_string()).collect(),
    };
    Ok(PreparedPanel { panel, groups, dropped })
}
