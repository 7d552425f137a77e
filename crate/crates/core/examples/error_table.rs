//! Likelihood estimation error of a trained diffusion model: probe count at
//! a fixed tolerance (S) and solver tolerance with fixed probes (Q).
//!
//!     cargo run --release --example error_table -- rff 1500

use adm_surprisal::analysis::{error_experiment, ErrorExperimentConfig};
use adm_surprisal::cli::{init_model, Corpus, RunConfig};
use adm_surprisal::model::ModelKind;
use adm_surprisal::train::{train, TrainState};
use adm_surprisal::Rng;

fn main() -> adm_surprisal::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let kind = ModelKind::parse(args.get(1).map_or("rff", String::as_str))?;
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1500);

    let mut cfg = RunConfig::default();
    cfg.model.kind = kind;
    cfg.train.total_steps = steps;
    let corpus = Corpus::generate(&cfg.data, cfg.seed)?;
    let mut state = TrainState::new(init_model(&cfg, &corpus.train)?, cfg.seed);
    train(&mut state, &corpus.train, &cfg.train, |_| {})?;
    let flow = state.model.as_flow().expect("GIVT has no ODE likelihood; use edm or rff");

    let report = error_experiment(flow, &corpus.test_melody, &ErrorExperimentConfig::default(), &Rng::from_seed(0))?;
    println!("{:>3} {:>8} {:>10} {:>11}", "", "setting", "MAE/|NLL|", "ME/|NLL|");
    for r in &report.rows {
        println!("{:>3} {:>8} {:>10.5} {:>11.5}", r.estimator, r.setting, r.mae_normalized, r.me_normalized);
    }
    Ok(())
}
