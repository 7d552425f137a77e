//! Correlates onset-aligned model IC with the generator's true symbol IC
//! across the noise-level grid, and IC across timbres of the same melody.
//!
//!     cargo run --release --example correlation -- edm 1500

use adm_surprisal::analysis::{correlation_experiment, timbre_invariance_experiment, ModelAt};
use adm_surprisal::cli::{init_model, Corpus, RunConfig};
use adm_surprisal::model::ModelKind;
use adm_surprisal::train::{train, TrainState};
use adm_surprisal::Rng;

fn main() -> adm_surprisal::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let kind = ModelKind::parse(args.get(1).map_or("edm", String::as_str))?;
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1500);

    let mut cfg = RunConfig::default();
    cfg.model.kind = kind;
    cfg.train.total_steps = steps;
    let corpus = Corpus::generate(&cfg.data, cfg.seed)?;
    let mut state = TrainState::new(init_model(&cfg, &corpus.train)?, cfg.seed);
    train(&mut state, &corpus.train, &cfg.train, |_| {})?;

    let levels = cfg.experiment.levels(kind);
    let at = [ModelAt {
        model: &state.model,
        levels: &levels,
    }];
    let rng = Rng::from_seed(1);
    let corr = correlation_experiment(&at, &corpus.test_melody, &cfg.solver, 2000, &rng)?;
    let timbre = timbre_invariance_experiment(&at, &corpus.test_melody, &cfg.solver, &rng)?;
    println!("{:>8} {:>8} {:>8} {:>10}", "t", "rho", "p", "timbre");
    for (c, t) in corr.rows.iter().zip(&timbre.rows) {
        println!("{:>8} {:>8.3} {:>8.4} {:>10.3}", c.t, c.rho, c.p, t.mean_rho);
    }
    Ok(())
}
