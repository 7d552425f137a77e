//! Trains a model on the synthetic corpus and plots its IC curves on a
//! planted-boundary sequence at several noise levels.
//!
//!     cargo run --release --example train_and_ic -- rff 1500 /tmp/ic.svg

use adm_surprisal::analysis::plot::{line_plot_svg, write_svg};
use adm_surprisal::cli::{init_model, Corpus, RunConfig};
use adm_surprisal::model::ModelKind;
use adm_surprisal::train::{train, TrainState};
use adm_surprisal::Rng;

fn main() -> adm_surprisal::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let kind = ModelKind::parse(args.get(1).map_or("rff", String::as_str))?;
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let out = args.get(3).cloned().unwrap_or_else(|| "ic.svg".into());

    let mut cfg = RunConfig::default();
    cfg.model.kind = kind;
    cfg.train.total_steps = steps;
    let corpus = Corpus::generate(&cfg.data, cfg.seed)?;
    let mut state = TrainState::new(init_model(&cfg, &corpus.train)?, cfg.seed);
    train(&mut state, &corpus.train, &cfg.train, |r| {
        if r.step % 250 == 0 {
            println!("step {:>5}  loss {:.4}  lr {:.2e}", r.step, r.loss, r.lr);
        }
    })?;

    let seq = &corpus.test_segmented[0];
    let levels = cfg.experiment.seg_levels(kind);
    let mut series = Vec::new();
    for &t in &levels {
        let curve = state.model.ic_curve(seq, t, &cfg.solver, &Rng::from_seed(0))?;
        let mean = curve.values.iter().sum::<f64>() / curve.len() as f64;
        println!("t = {t:<6} mean IC {mean:.3} bits/dim over {} frames", curve.len());
        series.push((format!("t={t}"), curve.values));
    }
    let refs: Vec<(&str, &[f64])> = series.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
    let marks = seq.annotations.as_ref().map(|a| a.boundaries.clone()).unwrap_or_default();
    write_svg(out.as_ref(), &line_plot_svg(&format!("{} IC", kind.name()), seq.frame_rate, &refs, &marks))?;
    println!("wrote {out}");
    Ok(())
}
