use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;
use spotter_core::dataset::Split;
use spotter_core::perturb::PerturbSpec;
use spotter_core::pipeline::{self, PipelineError, RunConfig, EXIT_CONFIG, EXIT_OK};

#[derive(Parser)]
#[command(name = "spotter", version, about = "Neuron-coverage detector for synthesized images")]
struct Cli {
    /// JSON run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed (overrides the config file)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config file)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic real/fake corpus and its manifest
    Gen,
    /// Fit per-layer activation thresholds on the train split
    FitThresholds,
    /// Write coverage feature CSVs
    Extract {
        /// Only this split (train or test)
        #[arg(long)]
        split: Option<Split>,
    },
    /// Train the classifier on train-split features
    Train,
    /// Tag individual images as real or fake
    Predict {
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Score the test split and write the metrics report and curves
    Evaluate,
    /// Sweep perturbation attacks over the test split
    Robustness {
        /// Attack as kind:intensity[:seed]; repeatable, replaces the default grid
        #[arg(long = "attack")]
        attacks: Vec<PerturbSpec>,
    },
}

fn run(cli: Cli) -> Result<i32, PipelineError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.out {
        config.out_dir = out;
    }
    match cli.command {
        Command::Gen => {
            pipeline::cmd_gen(&config)?;
        }
        Command::FitThresholds => {
            pipeline::cmd_fit_thresholds(&config)?;
        }
        Command::Extract { split } => {
            pipeline::cmd_extract(&config, split)?;
        }
        Command::Train => {
            pipeline::cmd_train(&config)?;
        }
        Command::Predict { images } => {
            let outcome = pipeline::cmd_predict(&config, &images)?;
            for r in &outcome.records {
                println!("{}", serde_json::to_string(r).expect("prediction serializes"));
            }
            return Ok(outcome.exit_code());
        }
        Command::Evaluate => {
            let report = pipeline::cmd_evaluate(&config)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Robustness { attacks } => {
            if !attacks.is_empty() {
                config.grid = Some(attacks);
            }
            for row in pipeline::cmd_robustness(&config)? {
                let spec = row.spec.map(|s| s.to_string()).unwrap_or_else(|| "none".into());
                println!("{spec}\tauc {:.4}", row.auc);
            }
        }
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // usage errors are configuration errors; 2 is reserved for partial failures
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { EXIT_OK as u8 });
        }
    };
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            error!("{e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
