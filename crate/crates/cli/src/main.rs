//! `verify`: runs one verification task from a JSON config and writes a CSV
//! table plus a JSON summary.

mod config;
mod report;
mod tasks;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use config::{ExperimentConfig, Task, DEFAULTS_HELP};
use report::{input_hash, merge, Summary, SCHEMA};

#[derive(Debug)]
pub enum CliError {
    /// Bad config or arguments. Exit code 2.
    Config(String),
    /// Numerical failure inside a task. Exit code 3.
    Numeric(String),
    Io(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numeric(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<carnot_core::Error> for CliError {
    fn from(e: carnot_core::Error) -> Self {
        if e.is_input_error() {
            CliError::Config(e.to_string())
        } else {
            CliError::Numeric(e.to_string())
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "verify", version, about = "Verification suites for step-two Carnot groups")]
#[command(after_help = DEFAULTS_HELP)]
#[command(args_conflicts_with_subcommands = true, subcommand_negates_reqs = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    /// Task to run: algebra-check, exp-check, distance-check, kernel-check, mcp-scan,
    /// weighted-mcp-scan, n32-chain, core-lemma, qbe-scan or volume-check.
    #[arg(required = true)]
    task: Option<Task>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON experiment config.
    #[arg(long, required = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: the config `output` key, else the working directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker thread cap.
    #[arg(long, env = "VERIFY_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Combine JSON summaries into one report.
    Merge {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Output file (default: standard output).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn run_task(task: Task, args: RunArgs) -> Result<bool, CliError> {
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(CliError::Config("VERIFY_THREADS must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let path = args.config.expect("clap enforces --config");
    let cfg = ExperimentConfig::load(&path)?.resolve(task, args.seed)?;
    let out_dir = args.out.or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::Io(format!("{}: {e}", out_dir.display())))?;

    let outcome = tasks::run(task, &cfg)?;
    let stem = format!("{task}-seed{}", cfg.seed.unwrap_or(0));
    let csv_name = format!("{stem}.csv");
    write(&out_dir.join(&csv_name), &outcome.csv)?;

    let passed = outcome.assertions.iter().all(|a| a.passed);
    let summary = Summary {
        schema: SCHEMA.into(),
        task,
        group: cfg.group.as_ref().and_then(|g| g.build().ok()).map(|s| s.name()).unwrap_or_default(),
        input_hash: input_hash(&cfg),
        config: cfg,
        passed,
        assertions: outcome.assertions,
        stats: outcome.stats,
        csv: csv_name,
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs()),
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write(&out_dir.join(format!("{stem}.json")), &json)?;
    for a in &summary.assertions {
        let tag = if a.passed { "PASS" } else { "FAIL" };
        println!("{tag} {}: {} (limit {})", a.name, a.value, a.limit);
    }
    for key in ["violations", "argmin"] {
        if let Some(v) = summary.stats.get(key).filter(|_| !passed) {
            println!("{key}: {v}");
        }
    }
    if !passed {
        eprintln!("{task}: assertions failed; see {}", out_dir.join(format!("{stem}.json")).display());
    }
    Ok(passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Some(Command::Merge { inputs, out }) => merge(&inputs).and_then(|m| {
            let json = serde_json::to_string_pretty(&m).expect("merged report serializes");
            match out {
                Some(p) => write(&p, &json)?,
                None => println!("{json}"),
            }
            Ok(m.passed)
        }),
        None => run_task(cli.task.expect("clap enforces the task"), cli.run),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
