//! Batch runner behind the `dmlpanel` binary.
//!
//! Three commands share one [`RunConfig`]: `estimate` fits fixed-effect OLS
//! and DML on a panel CSV, `simulate` runs the Monte Carlo bias experiment,
//! and `dgp-gen` exports one synthetic panel. Every JSON artifact embeds the
//! resolved configuration, seed included.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | every requested computation succeeded |
//! | 1 | internal failure (worker pool could not be built) |
//! | 2 | command-line usage error |
//! | 3 | a file could not be read or written |
//! | 4 | input data or schema problem |
//! | 5 | invalid configuration value |
//! | 6 | estimation failed |

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dmlpanel_core::dml::{estimate_effect, prepare_effect_panel, DmlConfig};
use dmlpanel_core::linear::{ols_fit, ClusterSpec, RegressionTable, TableColumn};
use dmlpanel_core::monte_carlo::{draw_dgp, export_dgp_csv, run_experiment, ExperimentConfig};
use dmlpanel_core::panel::{encode_fixed_effects, subset_by_class};
use dmlpanel_core::{ControlGroup, CountyClass, Error, EstimatorKind, PanelDataset, Result, Schema};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

pub const EXIT_OK: u8 = 0;
pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_INPUT: u8 = 4;
pub const EXIT_CONFIG: u8 = 5;
pub const EXIT_ESTIMATION: u8 = 6;

/// Process exit code for an error, per the table in the crate docs.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } => EXIT_IO,
        Error::Csv(_)
        | Error::Json(_)
        | Error::Schema(_)
        | Error::DuplicateRow { .. }
        | Error::NonNumeric { .. }
        | Error::MissingFields { .. }
        | Error::EmptyPanel(_) => EXIT_INPUT,
        Error::InvalidArgument(_) => EXIT_CONFIG,
        Error::ThreadPool(_) => EXIT_INTERNAL,
        _ => EXIT_ESTIMATION,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Estimate,
    Simulate,
    DgpGen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

impl Profile {
    pub fn experiment(self) -> ExperimentConfig {
        match self {
            Profile::Desk => ExperimentConfig::desk(),
            Profile::Paper => ExperimentConfig::paper(),
        }
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::InvalidArgument(format!("unknown profile {other:?} (desk|paper)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassFilter {
    #[default]
    All,
    Urban,
    Rural,
}

impl FromStr for ClassFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "all" => Ok(ClassFilter::All),
            "urban" => Ok(ClassFilter::Urban),
            "rural" => Ok(ClassFilter::Rural),
            other => Err(Error::InvalidArgument(format!("unknown class {other:?} (all|urban|rural)"))),
        }
    }
}

impl fmt::Display for ClassFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassFilter::All => "all",
            ClassFilter::Urban => "urban",
            ClassFilter::Rural => "rural",
        })
    }
}

/// `all` selects every control; `none` keeps only the fixed effects.
pub fn parse_groups(s: &str) -> Result<Option<BTreeSet<ControlGroup>>> {
    match s.trim() {
        "all" => Ok(None),
        "none" | "" => Ok(Some(BTreeSet::new())),
        list => list.split(',').map(str::parse).collect::<Result<_>>().map(Some),
    }
}

pub fn parse_estimators(s: &str) -> Result<Vec<EstimatorKind>> {
    s.split(',').map(str::parse).collect()
}

/// Everything a run needs. `out` and `threads` are not echoed into the
/// artifacts: they do not change results, and leaving them out keeps
/// reports byte-identical across output locations and worker counts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: Command,
    pub input: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub estimators: Vec<EstimatorKind>,
    /// `None` means every control group.
    pub groups: Option<BTreeSet<ControlGroup>>,
    pub class: ClassFilter,
    pub seed: u64,
    pub profile: Profile,
    /// DML sample-splitting repetitions; profile value when unset.
    pub reps: Option<usize>,
    /// Monte Carlo replications; profile value when unset.
    pub replications: Option<usize>,
    #[serde(skip)]
    pub out: PathBuf,
    #[serde(skip)]
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn new(command: Command, out: impl Into<PathBuf>) -> Self {
        RunConfig {
            command,
            input: None,
            schema: None,
            estimators: Vec::new(),
            groups: None,
            class: ClassFilter::All,
            seed: 0,
            profile: Profile::Desk,
            reps: None,
            replications: None,
            out: out.into(),
            threads: None,
        }
    }

    /// Copy with profile defaults filled in, as echoed in outputs.
    pub fn resolved(&self) -> Self {
        let exp = self.profile.experiment();
        let estimators = if self.estimators.is_empty() {
            match self.command {
                Command::Estimate => vec![EstimatorKind::DmlDw],
                _ => EstimatorKind::ALL.to_vec(),
            }
        } else {
            let mut e = self.estimators.clone();
            e.sort_unstable();
            e.dedup();
            e
        };
        RunConfig {
            estimators,
            reps: Some(self.reps.unwrap_or(exp.dml_repetitions)),
            replications: Some(self.replications.unwrap_or(exp.dgp.replications)),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.command == Command::Estimate && (self.input.is_none() || self.schema.is_none()) {
            return bad("estimate needs --input and --schema".into());
        }
        if let Some(r) = self.reps {
            if r == 0 || r % 2 == 0 {
                return bad(format!("--reps must be odd and positive, got {r}"));
            }
        }
        if self.replications == Some(0) {
            return bad("--replications must be positive".into());
        }
        if self.threads == Some(0) {
            return bad("--threads must be positive".into());
        }
        Ok(())
    }

    /// Experiment settings after applying the overrides to the profile.
    pub fn experiment(&self) -> ExperimentConfig {
        let mut exp = self.profile.experiment();
        exp.dgp.seed = self.seed;
        if let Some(r) = self.reps {
            exp.dml_repetitions = r;
        }
        if let Some(r) = self.replications {
            exp.dgp.replications = r;
        }
        exp.resolved()
    }
}

/// Files written by a run and a short human-readable summary.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

/// Runs the configured command, inside a pool of `threads` workers when set.
pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let work = || match cfg.command {
        Command::Estimate => cmd_estimate(cfg),
        Command::Simulate => cmd_simulate(cfg),
        Command::DgpGen => cmd_dgp_gen(cfg),
    };
    match cfg.threads {
        None => work(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::ThreadPool(e.to_string()))?
            .install(work),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// Treatment coefficient of OLS on [treatment | fixed effects | controls]
/// with entity-clustered errors.
fn ols_fe_column(label: &str, estimator: &str, d: &PanelDataset, groups: Vec<String>) -> Result<TableColumn> {
    let fe = encode_fixed_effects(d)?;
    let (n, k) = (d.n_rows(), d.n_controls());
    let mut x = DMatrix::zeros(n, 1 + fe.ncols() + k);
    x.column_mut(0).copy_from_slice(d.treatment());
    x.columns_mut(1, fe.ncols()).copy_from(&fe.matrix);
    x.columns_mut(1 + fe.ncols(), k).copy_from(d.controls());
    let fit = ols_fit(&x, &DVector::from_column_slice(d.outcome()))?
        .with_clustered_covariance(&x, &ClusterSpec::new(d.entity_index().to_vec()))?;
    Ok(TableColumn::new(label, estimator, fit.coefficients[0], fit.std_errors()[0], n, "CL", true, groups))
}

fn dml_label(e: EstimatorKind) -> &'static str {
    match e {
        EstimatorKind::OlsSubset => "OLS-subset",
        EstimatorKind::DmlLasso => "DML-LASSO",
        EstimatorKind::DmlDw => "DML-DW",
    }
}

/// Loads a panel, then reports OLS-FE, OLS-FE with standard controls (when
/// the panel has any) and one DML column per selected learner. Writes
/// `estimate.json` and `estimate.txt` into `out`.
pub fn cmd_estimate(cfg: &RunConfig) -> Result<RunOutput> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let (Some(input), Some(schema_path)) = (&cfg.input, &cfg.schema) else {
        return Err(Error::InvalidArgument("estimate needs --input and --schema".into()));
    };
    let schema = Schema::from_json_file(schema_path)?;
    let (panel, report) = PanelDataset::load_csv(input, &schema)?;
    let panel = match cfg.class {
        ClassFilter::All => panel,
        ClassFilter::Urban => subset_by_class(&panel, CountyClass::Urban)?,
        ClassFilter::Rural => subset_by_class(&panel, CountyClass::Rural)?,
    };
    let y = schema.outcome.as_str();
    let t = schema.treatment.as_str();

    let mut columns = Vec::new();
    let base = prepare_effect_panel(&panel, y, t, Some(&BTreeSet::new()))?;
    columns.push(ols_fe_column("OLS", "ols_fe", &base.panel, vec![])?);
    let standard = BTreeSet::from([ControlGroup::Standard]);
    if panel.groups_present().contains(&ControlGroup::Standard) {
        let with = prepare_effect_panel(&panel, y, t, Some(&standard))?;
        columns.push(ols_fe_column("OLS+controls", "ols_fe_controls", &with.panel, with.groups)?);
    }

    let exp = cfg.experiment();
    let mut dml = Vec::new();
    for &e in &cfg.estimators {
        let Some(nuisance) = exp.nuisance(e) else { continue };
        let dml_cfg = DmlConfig::new(nuisance, exp.dml_repetitions, cfg.seed);
        let est = estimate_effect(&panel, y, t, cfg.groups.as_ref(), &dml_cfg)?;
        columns.push(TableColumn::new(
            dml_label(e),
            e.as_str(),
            est.result.theta_median,
            est.result.standard_error,
            est.result.n_obs,
            "IF",
            true,
            est.control_groups.clone(),
        ));
        dml.push(serde_json::json!({
            "estimator": e,
            "control_groups": est.control_groups,
            "n_controls": est.n_controls,
            "dropped_constant_controls": est.dropped_constant_controls,
            "result": est.result.to_json(&dml_cfg),
        }));
    }

    let table = RegressionTable {
        dependent: y.to_owned(),
        regressor: t.to_owned(),
        columns,
    };
    let text = format!(
        "{}seed {}, class {}, DML repetitions {}\n",
        table.to_text(),
        cfg.seed,
        cfg.class,
        exp.dml_repetitions
    );
    let json = serde_json::json!({
        "config": cfg,
        "load": {
            "rows_read": report.rows_read,
            "rows_used": panel.n_rows(),
            "rejected": report.rejected,
        },
        "table": table,
        "dml": dml,
    });
    ensure_dir(&cfg.out)?;
    let json_path = cfg.out.join("estimate.json");
    let text_path = cfg.out.join("estimate.txt");
    write_json(&json_path, &json)?;
    write_text(&text_path, &text)?;
    Ok(RunOutput {
        files: vec![json_path, text_path],
        summary: text,
    })
}

/// Runs the bias experiment and writes `simulate.json` plus one
/// `simulate_<estimator>_kde.csv` per estimator into `out`.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<RunOutput> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let exp = cfg.experiment();
    let report = run_experiment(&exp, &cfg.estimators)?;
    ensure_dir(&cfg.out)?;
    let json_path = cfg.out.join("simulate.json");
    write_json(
        &json_path,
        &serde_json::json!({
            "config": cfg,
            "report": report,
        }),
    )?;
    let mut files = vec![json_path];
    files.extend(report.write_kde_csvs(&cfg.out, "simulate")?);

    let mut summary = format!(
        "theta0 {}, {} replications, seed {}\n",
        report.theta0, exp.dgp.replications, exp.dgp.seed
    );
    for e in &report.estimators {
        summary.push_str(&format!(
            "{:<11} mean bias {:+.4} (mc se {:.4}), median {:+.4}, sd {:.4}, failed {}\n",
            e.estimator,
            e.summary.mean,
            e.summary.mc_se,
            e.summary.median,
            e.summary.sd,
            e.failures.len()
        ));
    }
    Ok(RunOutput { files, summary })
}

/// Exports replication 0 of the profile's DGP as `dgp.csv` with its schema
/// and truth sidecars.
pub fn cmd_dgp_gen(cfg: &RunConfig) -> Result<RunOutput> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let exp = cfg.experiment();
    let draw = draw_dgp(&exp.dgp, 0)?;
    ensure_dir(&cfg.out)?;
    let paths = export_dgp_csv(&draw, cfg.out.join("dgp.csv"))?;
    let summary = format!(
        "{} rows, {} controls, theta0 {}, seed {}\n",
        draw.panel.n_rows(),
        draw.panel.n_controls(),
        exp.dgp.theta0,
        exp.dgp.seed
    );
    Ok(RunOutput {
        files: vec![paths.csv, paths.schema, paths.truth],
        summary,
    })
}
