use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedts::backbone::Tuning;
use fedts::config::ExperimentConfig;
use fedts::data::Split;
use fedts::federation::Ablation;
use fedts::{experiment, Error, Result};

#[derive(Parser)]
#[command(name = "fedts", version, about = "Personalized federated time-series forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// no-prompt | shared-head | no-agg
    #[arg(long)]
    ablation: Option<Ablation>,
    /// freeze | fpt | full
    #[arg(long)]
    tuning: Option<Tuning>,
    /// Number of backbone blocks.
    #[arg(long)]
    depth: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Federated training; writes round logs and best checkpoints.
    Train(Common),
    /// Evaluates the best checkpoints of `train`.
    Eval {
        #[command(flatten)]
        common: Common,
        /// train | val | test
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
    },
    /// Trains on a leading fraction of each training split.
    Fewshot {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.1)]
        fraction: f64,
    },
    /// Transfers trained sources to the configured targets.
    Zeroshot(Common),
    /// Exports attention scores and prompt selections.
    InspectPrompts {
        #[command(flatten)]
        common: Common,
        /// Prediction-length index.
        #[arg(long, default_value_t = 0)]
        horizon_index: usize,
        /// Test sample (window-major, then channel).
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
    /// Writes CSVs for every synthetic domain.
    SynthGen(Common),
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split `{other}`")),
    }
}

fn load(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(a) = c.ablation {
        cfg.ablation = a;
    }
    if let Some(t) = c.tuning {
        cfg.tuning = t;
    }
    if let Some(d) = c.depth {
        cfg.depth = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load(&c)?;
            for o in experiment::train(&cfg, &c.out)? {
                match (o.best_round, o.best_avg_val_loss) {
                    (Some(r), Some(v)) => println!("h{}: best round {r}, average validation loss {v:.6}", o.horizon_index),
                    _ => println!("h{}: no rounds run", o.horizon_index),
                }
            }
        }
        Command::Eval { common, split } => {
            let cfg = load(&common)?;
            let r = experiment::eval(&cfg, &common.out, split)?;
            if let Some(o) = r.overall {
                println!("{split}: mse {:.6} mae {:.6}", o.mse, o.mae);
            }
        }
        Command::Fewshot { common, fraction } => {
            let cfg = load(&common)?;
            let r = experiment::fewshot(&cfg, &common.out, fraction)?;
            if let Some(o) = r.overall {
                println!("few-shot {fraction}: mse {:.6} mae {:.6}", o.mse, o.mae);
            }
        }
        Command::Zeroshot(c) => {
            let cfg = load(&c)?;
            let r = experiment::zeroshot(&cfg, &c.out)?;
            for s in &r.selections {
                println!("{} (horizon {}): parameters of {}", s.target, s.horizon, s.chosen);
            }
        }
        Command::InspectPrompts { common, horizon_index, sample } => {
            let cfg = load(&common)?;
            let dir = experiment::inspect_prompts(&cfg, &common.out, horizon_index, sample)?;
            println!("{}", dir.display());
        }
        Command::SynthGen(c) => {
            let cfg = load(&c)?;
            for p in experiment::synth_gen(&cfg, &c.out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::FAILURE
        }
    }
}

fn report(e: &Error) {
    let msg = e.to_string().replace('\n', " ");
    eprintln!("error[{}]: {msg}", e.kind());
}
