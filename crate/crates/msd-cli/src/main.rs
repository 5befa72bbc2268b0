//! Pipeline driver: each subcommand runs one stage against an output
//! directory, reusing unchanged artifacts via the stage manifest.
//!
//! Exit codes: 0 success, 1 validation error (bad config/arguments/missing
//! inputs), 2 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use msd::config::RunConfig;
use msd::ctr::Variant;
use msd::pipeline::{Pipeline, StageOutcome};

#[derive(Parser)]
#[command(name = "msd", version, about = "Semantic-distillation CTR pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file (TOML). Defaults to the selected profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Profile to start from when no config file is given.
    #[arg(long, default_value = "tiny")]
    profile: String,
    /// Seed override (takes precedence over the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts and reports.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn pipeline(&self) -> msd::Result<Pipeline> {
        let mut config = match &self.config {
            Some(path) => RunConfig::from_toml_file(path)?,
            None => RunConfig::profile(&self.profile)?,
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Pipeline::new(config, &self.out)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Gen(Common),
    /// Build the distillation dataset and train the student.
    Distill(Common),
    /// Train one CTR variant.
    Train {
        #[command(flatten)]
        common: Common,
        /// full | no_lora | no_item_fusion | no_user_level | id_only
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Evaluate a trained variant against a baseline on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long, default_value = "id_only")]
        baseline: String,
    },
    /// Build the hot store, generate a trace and replay it.
    ServeReplay(Common),
    /// Per-checkpoint F1 vs downstream AUC with Spearman rank correlation.
    Correlation(Common),
    /// AUC of every variant over several seeds.
    Ablate(Common),
    /// Run gen → distill → train(full) → train(id_only) → eval → serve.
    Run(Common),
}

fn outcome_word(o: &StageOutcome) -> &'static str {
    match o {
        StageOutcome::Ran => "ran",
        StageOutcome::Skipped => "skipped (up to date)",
    }
}

fn dispatch(cli: Cli) -> msd::Result<()> {
    match cli.command {
        Command::Gen(common) => {
            let mut p = common.pipeline()?;
            let o = p.gen()?;
            println!("stage=gen status={}", outcome_word(&o));
        }
        Command::Distill(common) => {
            let mut p = common.pipeline()?;
            let o = p.distill()?;
            println!("stage=distill status={}", outcome_word(&o));
            if o == StageOutcome::Ran {
                let (initial, final_) = p.distill_val_losses()?;
                println!("stage=distill initial_val_nll={initial:.4} final_val_nll={final_:.4}");
            }
        }
        Command::Train { common, variant } => {
            let v = Variant::from_name(&variant)?;
            let mut p = common.pipeline()?;
            let o = p.train_variant(v)?;
            println!("stage=train variant={} status={}", v.name(), outcome_word(&o));
        }
        Command::Eval {
            common,
            variant,
            baseline,
        } => {
            let v = Variant::from_name(&variant)?;
            let b = Variant::from_name(&baseline)?;
            let mut p = common.pipeline()?;
            let report = p.eval(v, b)?;
            print!("{}", report.to_text());
        }
        Command::ServeReplay(common) => {
            let mut p = common.pipeline()?;
            let (report, o) = p.serve_replay()?;
            println!("stage=serve status={}", outcome_word(&o));
            print!("{}", report.to_text());
        }
        Command::Correlation(common) => {
            let mut p = common.pipeline()?;
            let report = p.correlation()?;
            print!("{}", report.to_tsv());
        }
        Command::Ablate(common) => {
            let mut p = common.pipeline()?;
            let report = p.ablate()?;
            print!("{}", report.to_tsv());
        }
        Command::Run(common) => {
            let mut p = common.pipeline()?;
            let report = p.run_all()?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
