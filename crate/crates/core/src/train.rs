//! Teacher-forced training over random frame windows of a dataset.

use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::AnyModel;
use crate::neural::{train_step, AdamState, TrainConfig};
use crate::numerics::Rng;
use crate::synthdata::LatentSequence;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: AnyModel,
    pub adam: AdamState,
    /// next step to run
    pub step: usize,
    pub seed: u64,
    pub history: Vec<LossRecord>,
    /// set when a step produced a non-finite loss or gradient
    pub diverged: Option<String>,
}

impl TrainState {
    pub fn new(model: AnyModel, seed: u64) -> Self {
        let n = model.store().len();
        Self {
            model,
            adam: AdamState::new(n),
            step: 0,
            seed,
            history: Vec::new(),
            diverged: None,
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut ck = self.model.checkpoint(Some(&self.adam), self.seed, self.step)?;
        ck.header.diverged = self.diverged.is_some();
        ck.save(path)
    }

    /// Restores model, optimizer and step counter from a checkpoint written
    /// by [`TrainState::save_checkpoint`].
    pub fn resume(path: &Path) -> Result<Self> {
        let (model, ck) = AnyModel::load(path)?;
        let adam = ck.optimizer.clone().ok_or_else(|| Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason: "no optimizer state to resume from".into(),
        })?;
        if ck.header.diverged {
            return Err(invalid("refusing to resume a diverged run"));
        }
        Ok(Self {
            model,
            adam,
            step: ck.header.step,
            seed: ck.header.seed,
            history: Vec::new(),
            diverged: None,
        })
    }
}

/// `batch` windows of `window` frames at uniform positions of uniformly
/// chosen sequences. Sequences shorter than `window` are used whole.
pub fn sample_windows<'a>(dataset: &'a [LatentSequence], batch: usize, window: usize, rng: &Rng) -> Vec<&'a [f64]> {
    let mut g = rng.generator();
    (0..batch)
        .map(|_| {
            let seq = &dataset[g.random_range(0..dataset.len())];
            let d = seq.dim;
            let len = seq.len().min(window);
            let start = g.random_range(0..=seq.len() - len);
            &seq.frames[start * d..(start + len) * d]
        })
        .collect()
}

fn batch_loss_and_grad(model: &AnyModel, windows: &[&[f64]], draws: usize, rng: &Rng) -> Result<(f64, Vec<f64>)> {
    let d = model.dim();
    let parts = windows
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let n = (w.len() / d).saturating_sub(1) as f64;
            model.loss_and_grad(&[*w], draws, &rng.split(i as u64)).map(|(l, g)| (n, l, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = parts.iter().map(|p| p.0).sum();
    let mut grad = vec![0.0; model.store().len()];
    let mut loss = 0.0;
    for (n, l, g) in parts {
        let w = n / total;
        loss += w * l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += w * b);
    }
    Ok((loss, grad))
}

/// Runs steps `state.step .. cfg.total_steps`. Step `s` draws its windows and
/// noise from `(seed, s)` alone, so a resumed run sees the same batches as an
/// uninterrupted one. Stops early and sets `state.diverged` on a non-finite
/// loss or gradient.
pub fn train(
    state: &mut TrainState,
    dataset: &[LatentSequence],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<()> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(invalid("empty training set"));
    }
    for s in dataset {
        crate::error::check_dim("frame dimension", state.model.dim(), s.dim)?;
        if s.len() < 2 {
            return Err(invalid(format!("sequence {} is shorter than two frames", s.id)));
        }
    }
    let window = cfg.window.min(state.model.arch().max_seq + 1);
    let root = Rng::new(state.seed, 0x7a1b);
    while state.step < cfg.total_steps {
        let step = state.step;
        let r = root.split(step as u64);
        let windows = sample_windows(dataset, cfg.batch_size, window, &r.split(0));
        let (loss, grad) = match batch_loss_and_grad(&state.model, &windows, cfg.draws_per_frame, &r.split(1)) {
            Ok(x) => x,
            Err(Error::TrainingDiverged { reason, .. }) => {
                state.diverged = Some(format!("step {step}: {reason}"));
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        let lr = match train_step(state.model.params_mut(), &mut state.adam, &grad, step, cfg) {
            Ok(lr) => lr,
            Err(Error::TrainingDiverged { reason, .. }) => {
                state.diverged = Some(format!("step {step}: {reason}"));
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        if state.model.store().values.iter().any(|x| !x.is_finite()) {
            state.diverged = Some(format!("step {step}: non-finite parameters"));
            return Ok(());
        }
        let rec = LossRecord { step, loss, lr };
        on_step(&rec);
        state.history.push(rec);
        state.step += 1;
    }
    Ok(())
}

/// Appends `step,loss,lr` rows, writing the header when the file is new.
pub fn write_history(records: &[LossRecord], path: &Path) -> Result<()> {
    let fresh = !path.exists();
    let f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(f);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelKind;
    use crate::neural::ArchConfig;
    use crate::process::data_scale;
    use crate::synthdata::{gen_pitch_timbre, GeneratorConfig, GeneratorSpec};

    fn setup(kind: ModelKind) -> (TrainState, Vec<LatentSequence>) {
        let spec = GeneratorSpec::from_config(GeneratorConfig {
            dim: 6,
            coarse_dim: 2,
            symbols: 4,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let data: Vec<LatentSequence> = (0..4)
            .map(|i| gen_pitch_timbre(&spec, 10, i % 5, &Rng::from_seed(i)).unwrap())
            .collect();
        let all: Vec<f64> = data.iter().flat_map(|s| s.frames.iter().copied()).collect();
        let arch = ArchConfig {
            dim: 6,
            width: 16,
            heads: 2,
            blocks: 1,
            max_seq: 64,
            mlp_hidden: 32,
            mlp_layers: 2,
            temb_dim: 8,
            gmm_components: 2,
            sigma_floor: 1e-3,
        };
        let model = AnyModel::new(kind, arch, data_scale(&all, 6).unwrap(), &Rng::from_seed(5)).unwrap();
        (TrainState::new(model, 11), data)
    }

    fn cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            lr: 3e-3,
            warmup_steps: 5,
            total_steps: steps,
            batch_size: 4,
            window: 16,
            draws_per_frame: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn windows_fit_their_sequences() {
        let (_, data) = setup(ModelKind::Givt);
        let w = sample_windows(&data, 50, 7, &Rng::from_seed(1));
        assert!(w.iter().all(|x| x.len() == 7 * 6));
        let w = sample_windows(&data, 5, 1000, &Rng::from_seed(1));
        assert!(w.iter().all(|x| x.len() == 40 * 6));
    }

    #[test]
    fn loss_trends_down_for_every_kind() {
        for kind in [ModelKind::Edm, ModelKind::Rff, ModelKind::Givt] {
            let (mut st, data) = setup(kind);
            train(&mut st, &data, &cfg(150), |_| {}).unwrap();
            assert!(st.diverged.is_none());
            let h: Vec<f64> = st.history.iter().map(|r| r.loss).collect();
            let first = h[..20].iter().sum::<f64>() / 20.0;
            let last = h[h.len() - 20..].iter().sum::<f64>() / 20.0;
            assert!(last < first, "{kind:?}: {first} → {last}");
        }
    }

    #[test]
    fn resume_continues_the_step_counter() {
        let dir = tempfile::tempdir().unwrap();
        let (mut st, data) = setup(ModelKind::Rff);
        train(&mut st, &data, &cfg(10), |_| {}).unwrap();
        let path = dir.path().join("m.ckpt");
        st.save_checkpoint(&path).unwrap();
        let mut back = TrainState::resume(&path).unwrap();
        assert_eq!(back.step, 10);
        assert_eq!(back.seed, 11);
        train(&mut back, &data, &cfg(15), |_| {}).unwrap();
        assert_eq!(back.step, 15);
        assert_eq!(back.history.first().unwrap().step, 10);
    }

    #[test]
    fn divergence_is_flagged() {
        let (mut st, data) = setup(ModelKind::Givt);
        st.model.params_mut()[0] = f64::NAN;
        train(&mut st, &data, &cfg(10), |_| {}).unwrap();
        assert!(st.diverged.is_some());
        assert_eq!(st.step, 0);
    }

    #[test]
    fn history_csv_appends() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        let r = |s| LossRecord { step: s, loss: 1.0, lr: 0.1 };
        write_history(&[r(0), r(1)], &p).unwrap();
        write_history(&[r(2)], &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("step,loss,lr"));
    }
}
