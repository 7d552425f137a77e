//! Held-out bits/dim of EDM, RFF and the GIVT baseline trained on the same
//! corpus for the same number of steps.
//!
//!     cargo run --release --example nll_table -- 1500

use adm_surprisal::analysis::nll_experiment;
use adm_surprisal::cli::{init_model, Corpus, RunConfig};
use adm_surprisal::model::ModelKind;
use adm_surprisal::train::{train, TrainState};
use adm_surprisal::{AnyModel, Rng};

fn main() -> adm_surprisal::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let mut cfg = RunConfig::default();
    cfg.train.total_steps = steps;
    let corpus = Corpus::generate(&cfg.data, cfg.seed)?;

    let mut models = Vec::new();
    for kind in [ModelKind::Edm, ModelKind::Rff, ModelKind::Givt] {
        cfg.model.kind = kind;
        let mut state = TrainState::new(init_model(&cfg, &corpus.train)?, cfg.seed);
        train(&mut state, &corpus.train, &cfg.train, |_| {})?;
        println!("trained {} for {} steps", kind.name(), state.step);
        models.push(state.model);
    }
    let refs: Vec<&AnyModel> = models.iter().collect();
    for (name, split) in [("test_melody", &corpus.test_melody), ("test_segmented", &corpus.test_segmented)] {
        let report = nll_experiment(&refs, split, name, cfg.experiment.trim_fraction, &cfg.solver, &Rng::from_seed(0))?;
        for r in &report.rows {
            println!("{:<15} {:<5} {:>8.4} bits/dim ({} frames, {} trimmed)", r.dataset, r.model, r.nll_bits_per_dim, r.frames, r.trimmed);
        }
    }
    Ok(())
}
