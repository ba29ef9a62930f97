use std::path::PathBuf;
use std::process::ExitCode;

use bwbpf_core::experiment::{
    curve_csv, parse_config, render_report, run_experiment_with, run_gradcheck, sweep_k,
    ExperimentConfig, MetricsRow,
};
use bwbpf_core::{Error, ErrorCategory};
use clap::{Args, Parser, Subcommand};

/// Block-wise training without end-to-end backpropagation.
#[derive(Parser)]
#[command(name = "bwbpf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics.csv, summary.json and config.echo.
    Train(ConfigArgs),
    /// Train once per K (and optionally end to end) and write curve.csv.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated block counts.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        ks: Vec<usize>,
        /// Also train the end-to-end baseline under the same budget.
        #[arg(long)]
        baseline: bool,
    },
    /// Check analytic gradients of every layer kind and a small 3-block
    /// model against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the results as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Summarize a run or sweep directory.
    Report { dir: PathBuf },
}

/// Each flag overrides the key of the same name in the config file.
#[derive(Args)]
struct ConfigArgs {
    /// TOML file with flat kebab-case keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long, short)]
    k: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    lambda1: Option<String>,
    #[arg(long)]
    lambda2: Option<String>,
    #[arg(long)]
    lr0: Option<String>,
    #[arg(long)]
    lr_final: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    decay_drops: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    precision: Option<String>,
    #[arg(long, short)]
    output_dir: Option<String>,
    #[arg(long)]
    augment: Option<String>,
    #[arg(long)]
    train_limit: Option<String>,
    #[arg(long)]
    test_limit: Option<String>,
    #[arg(long)]
    eval_batch_size: Option<String>,
    #[arg(long)]
    queue_capacity: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let text = match &self.config {
            Some(path) => Some(std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?),
            None => None,
        };
        let mut overrides = Vec::new();
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                Error::Validation(vec![format!("--set expects KEY=VALUE, got `{kv}`")])
            })?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        let named = [
            ("preset", &self.preset),
            ("dataset", &self.dataset),
            ("data-dir", &self.data_dir),
            ("k", &self.k),
            ("mode", &self.mode),
            ("lambda1", &self.lambda1),
            ("lambda2", &self.lambda2),
            ("lr0", &self.lr0),
            ("lr-final", &self.lr_final),
            ("momentum", &self.momentum),
            ("weight-decay", &self.weight_decay),
            ("batch-size", &self.batch_size),
            ("epochs", &self.epochs),
            ("schedule", &self.schedule),
            ("decay-drops", &self.decay_drops),
            ("seed", &self.seed),
            ("precision", &self.precision),
            ("output-dir", &self.output_dir),
            ("augment", &self.augment),
            ("train-limit", &self.train_limit),
            ("test-limit", &self.test_limit),
            ("eval-batch-size", &self.eval_batch_size),
            ("queue-capacity", &self.queue_capacity),
        ];
        for (key, value) in named {
            if let Some(v) = value {
                // Paths and names stay strings even if they look numeric.
                let v = if matches!(key, "data-dir" | "output-dir" | "preset" | "dataset") {
                    format!("{v:?}")
                } else {
                    v.clone()
                };
                overrides.push((key.to_string(), v));
            }
        }
        parse_config(text.as_deref(), &overrides)
    }
}

fn progress(row: &MetricsRow) {
    let locals: Vec<String> = row.loss_local.iter().map(|l| format!("{l:.4}")).collect();
    eprintln!(
        "[{}] epoch {} step {} lr {:.2e} loss {:.4} local [{}] train {:.2}% test {:.2}%",
        row.run_id,
        row.epoch,
        row.step,
        row.lr,
        row.loss_global,
        locals.join(" "),
        100.0 * row.train_error,
        100.0 * row.test_error
    );
}

/// Exit code per failure class: 2 invalid input, 3 data, 4 runtime, 1 for a
/// failed gradient check.
fn exit_code(e: &Error) -> ExitCode {
    ExitCode::from(match e.category() {
        ErrorCategory::Validation => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Runtime => 4,
    })
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let s = run_experiment_with(&cfg, progress)?;
            println!(
                "{}: final test error {:.2}% ({} / {}), outputs in {}",
                s.run_id,
                100.0 * s.final_test_error,
                s.test_correct,
                s.test_total,
                cfg.output_dir.display()
            );
        }
        Command::Sweep {
            config,
            ks,
            baseline,
        } => {
            let cfg = config.resolve()?;
            let result = sweep_k(&cfg, &ks, baseline)?;
            print!("{}", curve_csv(&result.curve));
        }
        Command::Gradcheck { seed, json } => {
            let suite = run_gradcheck(seed)?;
            println!(
                "{:<28} {:>8} {:>12}  result",
                "case", "coords", "max rel err"
            );
            for c in &suite.cases {
                println!(
                    "{:<28} {:>8} {:>12.3e}  {}{}",
                    c.name,
                    c.coordinates,
                    c.max_rel_error,
                    if c.passed { "pass" } else { "FAIL" },
                    c.failure
                        .as_deref()
                        .map(|f| format!(" ({f})"))
                        .unwrap_or_default()
                );
            }
            println!(
                "model parameters: {}, h = {:e}, tolerance {:e}",
                suite.model_params, suite.step, suite.tolerance
            );
            if let Some(path) = json {
                let text = serde_json::to_string_pretty(&suite)
                    .map_err(|e| Error::Format(e.to_string()))?;
                std::fs::write(&path, text + "\n").map_err(|e| Error::Io { path, source: e })?;
            }
            if !suite.passed() {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Report { dir } => print!("{}", render_report(&dir)?),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
