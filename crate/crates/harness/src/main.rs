use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ctk_harness::{run_experiment, ExperimentConfig, HarnessError, Task};

#[derive(Parser)]
#[command(name = "ctk", about = "Connectivity tangent kernel experiments", version)]
struct Cli {
    #[command(subcommand)]
    task: Command,

    /// JSON config; the task's built-in default when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for report.json and CSV tables.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// `key=value` with a dot-separated key into the config.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Print the resolved config and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    InvarianceCheck,
    Bound,
    Sharpness,
    Correlate,
    Calibrate,
    WidthSweep,
    PosteriorCheck,
}

impl From<Command> for Task {
    fn from(c: Command) -> Self {
        match c {
            Command::InvarianceCheck => Task::InvarianceCheck,
            Command::Bound => Task::Bound,
            Command::Sharpness => Task::Sharpness,
            Command::Correlate => Task::Correlate,
            Command::Calibrate => Task::Calibrate,
            Command::WidthSweep => Task::WidthSweep,
            Command::PosteriorCheck => Task::PosteriorCheck,
        }
    }
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let task = Task::from(cli.task);
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default_for(task),
    };
    cfg.task = task;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output = Some(o.clone());
    }
    cfg = cfg.with_overrides(&cli.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if cli.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
        return ExitCode::SUCCESS;
    }
    let report = run_experiment(&cfg);
    let out = cfg
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(cfg.task.name()));
    if let Err(e) = report.write(&out) {
        eprintln!("error: writing {}: {e}", out.display());
        return ExitCode::from(2);
    }
    match &report.failure {
        None => {
            println!("{}", out.join("report.json").display());
            ExitCode::SUCCESS
        }
        Some(f) => {
            eprintln!("error: stage `{}`: {}", f.stage, f.message);
            ExitCode::from(if f.numerical { 3 } else { 2 })
        }
    }
}
