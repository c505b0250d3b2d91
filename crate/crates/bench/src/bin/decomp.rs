use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use decomp_bench::experiment::{run_experiment, ExperimentConfig};
use decomp_bench::report::emit_report;
use decomp_bench::{BenchError, Result};
use serde_json::{json, Value};

/// Contextual decomposition toolkit: attributions, hierarchies, transformed-space
/// scores, explanation-penalized training and wavelet distillation.
#[derive(Parser)]
#[command(name = "decomp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// CD score of one feature group.
    Attribute {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: ModelInput,
        /// Flat input coordinates, comma separated.
        #[arg(long, value_delimiter = ',')]
        group: Option<Vec<usize>>,
    },
    /// Agglomerative hierarchy of feature groups.
    Acd {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: ModelInput,
        #[arg(long)]
        k_percent: Option<f64>,
        #[arg(long)]
        max_levels: Option<usize>,
        /// auto, chain, sequence, image or grid.
        #[arg(long)]
        adjacency: Option<String>,
    },
    /// Scores of frequency bands or wavelet scales.
    Trim {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: ModelInput,
        /// dft or dwt.
        #[arg(long)]
        transform: Option<String>,
        #[arg(long)]
        wavelet: Option<String>,
        #[arg(long)]
        levels: Option<usize>,
        /// cd or ig.
        #[arg(long)]
        method: Option<String>,
    },
    /// Train with the explanation penalty.
    TrainCdep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Distill an adaptive wavelet from a trained model.
    DistillAwd {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        signals: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Synthetic benchmark harnesses.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        task: Task,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Frequency,
    Color,
    Negation,
    Awd,
}

#[derive(Args)]
struct Common {
    /// Experiment config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a parameter, `path.to.field=value` (value parsed as JSON when possible).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ModelInput {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long = "class")]
    class_index: Option<usize>,
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn build(kind: &str, common: &Common, flags: Vec<(&str, Option<Value>)>) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let c = ExperimentConfig::load(path)?;
            if c.kind != kind {
                return Err(BenchError::InvalidConfig(format!("config kind `{}` does not match subcommand `{kind}`", c.kind)));
            }
            c
        }
        None => ExperimentConfig::new(kind),
    };
    for (key, value) in flags {
        if let Some(v) = value {
            config.set_param(key, v)?;
        }
    }
    for raw in &common.overrides {
        let (key, value) =
            raw.split_once('=').ok_or_else(|| BenchError::InvalidConfig(format!("`--set {raw}` needs KEY=VALUE")))?;
        config.set_param(key.trim(), parse_value(value))?;
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.output_dir = Some(out.clone());
    }
    config.validate()?;
    Ok(config)
}

fn path(p: &Option<PathBuf>) -> Option<Value> {
    p.as_ref().map(|p| Value::String(p.display().to_string()))
}

fn opt<T: serde::Serialize>(v: &Option<T>) -> Option<Value> {
    v.as_ref().map(|v| serde_json::to_value(v).expect("plain value"))
}

fn model_input(io: &ModelInput) -> Vec<(&'static str, Option<Value>)> {
    vec![("model", path(&io.model)), ("input", path(&io.input)), ("class_index", opt(&io.class_index))]
}

fn config_for(command: &Command) -> Result<ExperimentConfig> {
    match command {
        Command::Attribute { common, io, group } => {
            let mut flags = model_input(io);
            flags.push(("group", opt(group)));
            build("attribute", common, flags)
        }
        Command::Acd { common, io, k_percent, max_levels, adjacency } => {
            let mut flags = model_input(io);
            flags.extend([("k_percent", opt(k_percent)), ("max_levels", opt(max_levels)), ("adjacency", opt(adjacency))]);
            build("acd", common, flags)
        }
        Command::Trim { common, io, transform, wavelet, levels, method } => {
            let mut flags = model_input(io);
            flags.extend([
                ("transform", opt(transform)),
                ("wavelet", opt(wavelet)),
                ("levels", opt(levels)),
                ("method", opt(method)),
            ]);
            build("trim", common, flags)
        }
        Command::TrainCdep { common, model, dataset, lambda, epochs } => build(
            "train-cdep",
            common,
            vec![
                ("model", path(model)),
                ("dataset", path(dataset)),
                ("train.lambda", opt(lambda)),
                ("train.epochs", opt(epochs)),
            ],
        ),
        Command::DistillAwd { common, model, signals, iterations } => build(
            "awd-distill",
            common,
            vec![("model", path(model)), ("signals", path(signals)), ("awd.iterations", opt(iterations))],
        ),
        Command::Simulate { common, task } => {
            let kind = match task {
                Task::Frequency => "frequency-sim",
                Task::Color => "color-bias",
                Task::Negation => "negation-sentiment",
                Task::Awd => "awd-distill",
            };
            build(kind, common, Vec::new())
        }
    }
}

fn run(cli: &Cli) -> Result<Value> {
    let config = config_for(&cli.command)?;
    let report = run_experiment(&config)?;
    let out = config.output_dir();
    let files = emit_report(&report, &out)?;
    Ok(json!({
        "status": "ok",
        "kind": report.kind,
        "seed": report.seed,
        "output_dir": out.display().to_string(),
        "files": files.iter().map(|f| f.display().to_string()).collect::<Vec<_>>(),
        "summary": report.summary,
    }))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let message = e.render().to_string();
            eprintln!("{}", json!({ "error": { "code": "usage", "message": message.trim() } }));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(status) => {
            println!("{}", serde_json::to_string_pretty(&status).expect("status serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": { "code": e.code(), "message": e.to_string() } }));
            ExitCode::FAILURE
        }
    }
}
