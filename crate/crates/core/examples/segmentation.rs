//! Boundary detection from IC novelty on planted-boundary sequences,
//! against a random-peak baseline.
//!
//!     cargo run --release --example segmentation -- rff 1500

use adm_surprisal::analysis::{predicted_boundaries, segment_experiment, ModelAt};
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

    let seq = &corpus.test_segmented[0];
    let levels = cfg.experiment.seg_levels(kind);
    println!("annotated: {:?}", seq.annotations.as_ref().map(|a| &a.boundaries));
    for &t in &levels {
        let curve = state.model.ic_curve(seq, t, &cfg.solver, &Rng::from_seed(0))?;
        let found = predicted_boundaries(&curve, &cfg.experiment.novelty)?;
        println!("t = {t:<5} predicted: {found:?}");
    }

    let at = [ModelAt {
        model: &state.model,
        levels: &levels,
    }];
    let report = segment_experiment(&at, &corpus.test_segmented, &cfg.solver, &cfg.experiment.segment(), &Rng::from_seed(2))?;
    println!("\n{:>6} {:>6} {:>6} {:>6} {:>8}", "t", "P", "R", "F1", "random");
    for r in &report.rows {
        println!("{:>6} {:>6.3} {:>6.3} {:>6.3} {:>8.3}", r.t, r.precision, r.recall, r.f1, r.random_f1);
    }
    Ok(())
}
