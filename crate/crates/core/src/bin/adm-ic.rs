use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

use adm_surprisal::cli::{self, RunConfig};

#[derive(Parser)]
#[command(name = "adm-ic", about = "Information content of latent sequences under autoregressive diffusion models")]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; defaults are used when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// overrides the seed in the configuration
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// model checkpoint; repeat to compare several models
    #[arg(long, global = true)]
    checkpoint: Vec<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// generate the synthetic corpus
    Gen,
    /// train a model, or resume from --checkpoint
    Train,
    /// IC curves and plots of the segmented test split
    Ic,
    /// data-level NLL on the test splits
    Nll,
    /// likelihood estimation error against probe count and tolerance
    Errors,
    /// correlation of IC with symbol surprisal and across timbres
    Correlate,
    /// novelty-based boundary detection
    Segment,
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let cfg = RunConfig::load(args.config.as_deref(), args.seed).context("loading the configuration")?;
    let out = &args.out;
    let models = || cli::load_models(&args.checkpoint);
    match args.command {
        Command::Gen => {
            let m = cli::cmd_gen(&cfg, out)?;
            for s in &m.splits {
                println!("{}: {} sequences, {} frames", s.split, s.sequences, s.frames);
            }
        }
        Command::Train => {
            if args.checkpoint.len() > 1 {
                anyhow::bail!("train resumes from at most one checkpoint");
            }
            let r = cli::cmd_train(&cfg, out, args.checkpoint.first().map(|p| p.as_path()))?;
            println!("trained to step {}, loss {:?}, saved {}", r.steps, r.final_loss, r.checkpoint.display());
        }
        Command::Ic => {
            let n = cli::cmd_ic(&cfg, &models()?, out)?;
            println!("wrote {n} curves");
        }
        Command::Nll => cli::cmd_nll(&cfg, &models()?, out)?,
        Command::Errors => cli::cmd_errors(&cfg, &models()?, out)?,
        Command::Correlate => cli::cmd_correlate(&cfg, &models()?, out)?,
        Command::Segment => cli::cmd_segment(&cfg, &models()?, out)?,
    }
    Ok(())
}
