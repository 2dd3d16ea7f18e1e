use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dal_core::runner::{
    duality_check, generate_data, grad_check, run_experiment, sweep_rho, ExperimentSpec, Mode,
    RunReport, RunnerError,
};

/// DAL experiments on synthetic 2-D scenes, plus numerical self-checks.
///
/// Any config key can be given as a trailing `--key value` (or `--key=value`)
/// override; overrides beat the config file, which beats built-in defaults.
#[derive(Parser)]
#[command(name = "dal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// `--key value` overrides of config keys
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "OVERRIDES"
    )]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train DAL on every seed and evaluate it
    TrainDal(Common),
    /// Train the outlier-exposure baseline on every seed and evaluate it
    TrainOe(Common),
    /// Train DAL over a grid of radii and write curve.csv
    SweepRho(Common),
    /// Compare worst-case primal and dual values on ball problems
    DualityCheck {
        /// JSON array of ball problems
        #[arg(long)]
        instances: Option<PathBuf>,
        /// number of random instances when no file is given
        #[arg(long)]
        random: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every autodiff op and the DAL gradients
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a saved checkpoint on the scene of every seed
    EvalOnly {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write the synthetic scene of every seed as CSV
    GenData(Common),
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, RunnerError> {
    let usage = |msg: String| RunnerError::Config {
        key: "arguments".into(),
        msg,
    };
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(arg) = it.next() {
        let flag = arg
            .strip_prefix("--")
            .ok_or_else(|| usage(format!("expected --key, got {arg:?}")))?;
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| usage(format!("--{flag} needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}

fn build_spec(
    mode: Mode,
    common: &Common,
    extra: &[(&str, String)],
) -> Result<ExperimentSpec, RunnerError> {
    let mut spec = ExperimentSpec::new(mode);
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|source| RunnerError::Io {
            path: path.clone(),
            source,
        })?;
        spec.apply_text(&text)?;
        spec.mode = mode;
    }
    for (k, v) in extra {
        spec.set(k, v)?;
    }
    for (k, v) in parse_overrides(&common.overrides)? {
        if k == "mode" {
            return Err(RunnerError::Config {
                key: k,
                msg: "the subcommand selects the mode".into(),
            });
        }
        spec.set(&k, &v)?;
    }
    Ok(spec)
}

fn print_records(report: &RunReport) {
    println!("run directory: {}", report.run_dir.display());
    for r in &report.records {
        match &r.failure {
            Some(msg) => println!("seed {}: FAILED: {msg}", r.seed),
            None => {
                let acc = r.id_accuracy.unwrap_or(f64::NAN);
                for m in &r.metrics {
                    println!(
                        "seed {} [{}]: id_acc {:.4} | aux fpr95 {:.4} auroc {:.4} | real fpr95 {:.4} auroc {:.4} fnr95 {:.4}",
                        r.seed, m.score, acc, m.aux.fpr95, m.aux.auroc, m.real.fpr95, m.real.auroc, m.real.fnr95
                    );
                }
            }
        }
    }
}

fn finish_runs(report: &RunReport) -> Result<(), RunnerError> {
    print_records(report);
    match report.failed() {
        0 => Ok(()),
        failed => Err(RunnerError::RunsFailed {
            failed,
            total: report.records.len(),
        }),
    }
}

fn run(cli: Cli) -> Result<(), RunnerError> {
    match cli.command {
        Command::TrainDal(c) => {
            finish_runs(&run_experiment(&build_spec(Mode::TrainDal, &c, &[])?)?)
        }
        Command::TrainOe(c) => finish_runs(&run_experiment(&build_spec(Mode::TrainOe, &c, &[])?)?),
        Command::EvalOnly { checkpoint, common } => {
            let extra = [("checkpoint", checkpoint.display().to_string())];
            finish_runs(&run_experiment(&build_spec(
                Mode::EvalOnly,
                &common,
                &extra,
            )?)?)
        }
        Command::SweepRho(c) => {
            let report = sweep_rho(&build_spec(Mode::SweepRho, &c, &[])?)?;
            println!("run directory: {}", report.run_dir.display());
            print!("{}", report.to_csv());
            let failed = report
                .records
                .iter()
                .filter(|r| r.failure.is_some())
                .count();
            match failed {
                0 => Ok(()),
                failed => Err(RunnerError::RunsFailed {
                    failed,
                    total: report.records.len(),
                }),
            }
        }
        Command::DualityCheck {
            instances,
            random,
            common,
        } => {
            let mut extra = Vec::new();
            if let Some(p) = instances {
                extra.push(("instances", p.display().to_string()));
            }
            if let Some(n) = random {
                extra.push(("random_instances", n.to_string()));
            }
            let report = duality_check(&build_spec(Mode::DualityCheck, &common, &extra)?)?;
            if let Some(dir) = &report.run_dir {
                println!("run directory: {}", dir.display());
            }
            println!(
                "instances: {}  max |primal - dual|: {:e}",
                report.instances.len(),
                report.max_gap
            );
            if report.passed {
                Ok(())
            } else {
                Err(RunnerError::CheckFailed(format!(
                    "duality gap {:e}",
                    report.max_gap
                )))
            }
        }
        Command::GradCheck { seed } => {
            let summary = grad_check(seed)?;
            print!("{}", summary.render());
            println!("max relative error: {:e}", summary.max_rel_err);
            if summary.passed {
                Ok(())
            } else {
                Err(RunnerError::CheckFailed(format!(
                    "relative error {:e}",
                    summary.max_rel_err
                )))
            }
        }
        Command::GenData(c) => {
            for path in generate_data(&build_spec(Mode::TrainDal, &c, &[])?)? {
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
