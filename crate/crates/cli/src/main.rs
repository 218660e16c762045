use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dmlpanel_cli::{exit_code, parse_estimators, parse_groups, run, Command, RunConfig, EXIT_OK};
use dmlpanel_core::Result;

/// Panel DML estimation and Monte Carlo bias experiments.
#[derive(Parser)]
#[command(name = "dmlpanel", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fixed-effect OLS and DML estimates on a panel CSV.
    Estimate(Common),
    /// Monte Carlo bias experiment on synthetic panels.
    Simulate(Common),
    /// Export one synthetic panel with schema and truth sidecars.
    DgpGen(Common),
}

#[derive(Args)]
struct Common {
    /// Panel CSV.
    #[arg(long)]
    input: Option<PathBuf>,
    /// JSON schema naming the panel's columns and control groups.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Comma list of control groups, `all` or `none`.
    #[arg(long, default_value = "all")]
    groups: String,
    /// all, urban or rural.
    #[arg(long, default_value = "all")]
    class: String,
    /// Comma list: ols, dml-lasso, dml-dw.
    #[arg(long = "estimator", visible_alias = "estimators")]
    estimators: Option<String>,
    /// DML sample-splitting repetitions (odd).
    #[arg(long)]
    reps: Option<usize>,
    /// Monte Carlo replications.
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long, env = "DMLPANEL_SEED", default_value_t = 0)]
    seed: u64,
    /// desk or paper.
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads; all cores when unset.
    #[arg(long)]
    threads: Option<usize>,
}

fn build(command: Command, a: Common) -> Result<RunConfig> {
    Ok(RunConfig {
        input: a.input,
        schema: a.schema,
        estimators: match &a.estimators {
            Some(s) => parse_estimators(s)?,
            None => Vec::new(),
        },
        groups: parse_groups(&a.groups)?,
        class: a.class.parse()?,
        seed: a.seed,
        profile: a.profile.parse()?,
        reps: a.reps,
        replications: a.replications,
        threads: a.threads,
        ..RunConfig::new(command, a.out)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::Estimate(a) => (Command::Estimate, a),
        Cmd::Simulate(a) => (Command::Simulate, a),
        Cmd::DgpGen(a) => (Command::DgpGen, a),
    };
    match build(command, args).and_then(|cfg| run(&cfg)) {
        Ok(out) => {
            print!("{}", out.summary);
            for f in &out.files {
                println!("wrote {}", f.display());
            }
            ExitCode::from(EXIT_OK)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
