use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::Value;

use consensus_mapping::consensus::OptimizerKind;
use consensus_mapping::harness::{
    emit_outputs, preset, run_experiment, summary_rows, ConfigError, ExperimentConfig, RunOptions,
    Sweep, PRESET_NAMES,
};
use consensus_mapping::network_sim::LinkPolicy;
use consensus_mapping::par;

#[derive(Parser)]
#[command(version, about = "Decentralized multi-agent implicit mapping simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its outputs.
    Run(RunArgs),
    /// Print a preset's full JSON config.
    Preset { name: String },
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON experiment config. With --preset it is merged over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    /// Fixed per-message success rate; replaces any success-rate sweep.
    #[arg(long)]
    success_rate: Option<f64>,
    /// Agent count; replaces any agent-count sweep.
    #[arg(long)]
    agents: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    /// Run trials one after another on the calling thread.
    #[arg(long)]
    sequential: bool,
}

/// JSON merge patch: objects merge key by key, `null` deletes, anything
/// else replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                if v.is_null() {
                    b.remove(&k);
                } else {
                    merge(b.entry(k).or_insert(Value::Null), v);
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn config_error(path: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError {
        problems: vec![(path.into(), msg.into())],
    }
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, ConfigError> {
    let mut doc = match &args.preset {
        Some(name) => {
            let cfg = preset(name).ok_or_else(|| {
                config_error(
                    "--preset",
                    format!("unknown preset `{name}` (known: {})", PRESET_NAMES.join(", ")),
                )
            })?;
            serde_json::to_value(cfg).expect("preset serializes")
        }
        None => Value::Object(Default::default()),
    };
    match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| config_error("--config", format!("{}: {e}", path.display())))?;
            let patch: Value = serde_json::from_str(&text)
                .map_err(|e| config_error("--config", format!("{}: {e}", path.display())))?;
            merge(&mut doc, patch);
        }
        None if args.preset.is_none() => {
            return Err(config_error("--config", "either --config or --preset is required"))
        }
        None => {}
    }
    let mut cfg: ExperimentConfig =
        serde_json::from_value(doc).map_err(|e| config_error("$", e.to_string()))?;

    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(opt) = args.optimizer {
        cfg.consensus.optimizer = opt;
        cfg.compare = vec![opt];
    }
    if let Some(rate) = args.success_rate {
        if !(0.0..=1.0).contains(&rate) {
            return Err(config_error("--success-rate", "must lie in [0, 1]"));
        }
        cfg.network.policy = LinkPolicy::from_success_rate(rate);
        if matches!(cfg.sweep, Some(Sweep::SuccessRates(_))) {
            cfg.sweep = None;
        }
    }
    if let Some(n) = args.agents {
        cfg.n_agents = n;
        if matches!(cfg.sweep, Some(Sweep::AgentCounts(_))) {
            cfg.sweep = None;
        }
    }
    if let Some(t) = args.iters {
        cfg.iterations = t;
    }
    if let Some(t) = args.trials {
        cfg.trials = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: RunArgs) -> ExitCode {
    let cfg = match load_config(&args) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(2);
        }
    };
    let opts = RunOptions {
        parallel_trials: par::AVAILABLE && !args.sequential,
        parallel_agents: false,
    };
    let record = match run_experiment(&cfg, opts) {
        Ok(r) => r,
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = emit_outputs(&record, &args.out) {
        eprintln!("failed to write outputs to {}: {e}", args.out.display());
        return ExitCode::FAILURE;
    }
    println!("config {}", record.config_hash);
    for row in summary_rows(&record) {
        println!(
            "{:<28} completion {:6.2} ± {:5.2}  artifacts {:.4}  holes {:.4}",
            row.cell, row.completion.mean, row.completion.std, row.artifacts.mean, row.holes.mean
        );
    }
    println!("outputs in {}", args.out.display());
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => run(args),
        Command::Preset { name } => match preset(&name) {
            Some(cfg) => {
                println!("{}", cfg.to_json());
                ExitCode::SUCCESS
            }
            None => {
                eprintln!("unknown preset `{name}` (known: {})", PRESET_NAMES.join(", "));
                ExitCode::from(2)
            }
        },
    }
}
