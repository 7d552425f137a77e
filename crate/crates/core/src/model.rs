//! One handle over the three model kinds: checkpoint I/O, the training loss
//! and IC extraction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baseline::{givt_ic_curve, GivtMeta, GivtModel};
use crate::error::{Error, Result};
use crate::neural::{AdamState, ArchConfig, Checkpoint, ParamStore};
use crate::numerics::Rng;
use crate::odelik::SolverConfig;
use crate::process::{FlowModel, ProcessKind, ScoreModel, ScoreModelMeta};
use crate::surprisal::{ic_curve, ICCurve};
use crate::synthdata::LatentSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Edm,
    Rff,
    Givt,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Edm => "edm",
            ModelKind::Rff => "rff",
            ModelKind::Givt => "givt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "edm" => Ok(ModelKind::Edm),
            "rff" => Ok(ModelKind::Rff),
            "givt" => Ok(ModelKind::Givt),
            other => Err(crate::error::invalid(format!("unknown model kind {other:?}"))),
        }
    }

    /// Noise-level grid of the correlation experiments.
    pub fn default_noise_levels(&self) -> Vec<f64> {
        match self {
            ModelKind::Edm => vec![0.002, 10.0, 20.0, 50.0, 60.0],
            ModelKind::Rff => vec![0.0, 0.1, 0.5, 0.6, 0.7],
            ModelKind::Givt => vec![0.0],
        }
    }

    /// Noise-level grid of the segmentation experiment.
    pub fn default_segment_levels(&self) -> Vec<f64> {
        match self {
            ModelKind::Edm => vec![0.002, 17.6, 40.0, 60.0],
            ModelKind::Rff => vec![0.0, 0.25, 0.5, 0.7],
            ModelKind::Givt => vec![0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Score(ScoreModel),
    Givt(GivtModel),
}

impl AnyModel {
    pub fn new(kind: ModelKind, arch: ArchConfig, data_scale: Vec<f64>, rng: &Rng) -> Result<Self> {
        Ok(match kind {
            ModelKind::Edm => AnyModel::Score(ScoreModel::new(arch, ProcessKind::Edm, data_scale, rng)?),
            ModelKind::Rff => AnyModel::Score(ScoreModel::new(arch, ProcessKind::Rff, data_scale, rng)?),
            ModelKind::Givt => AnyModel::Givt(GivtModel::new(arch, data_scale, rng)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Score(m) => match m.kind() {
                ProcessKind::Edm => ModelKind::Edm,
                ProcessKind::Rff => ModelKind::Rff,
            },
            AnyModel::Givt(_) => ModelKind::Givt,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            AnyModel::Score(m) => m.dim(),
            AnyModel::Givt(m) => m.dim(),
        }
    }

    pub fn arch(&self) -> &ArchConfig {
        match self {
            AnyModel::Score(m) => &m.meta.arch,
            AnyModel::Givt(m) => &m.meta.arch,
        }
    }

    /// Data-level noise: `t_start` of the process, 0 for the mixture model.
    pub fn t_start(&self) -> f64 {
        match self {
            AnyModel::Score(m) => m.meta.process.t_start,
            AnyModel::Givt(_) => 0.0,
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            AnyModel::Score(m) => &m.store,
            AnyModel::Givt(m) => &m.store,
        }
    }

    pub fn params_mut(&mut self) -> &mut Vec<f64> {
        match self {
            AnyModel::Score(m) => &mut m.store.values,
            AnyModel::Givt(m) => &mut m.store.values,
        }
    }

    pub fn as_flow(&self) -> Option<&dyn FlowModel> {
        match self {
            AnyModel::Score(m) => Some(m),
            AnyModel::Givt(_) => None,
        }
    }

    /// Mean training loss over windows of clean frames and its gradient.
    pub fn loss_and_grad(&self, windows: &[&[f64]], draws: usize, rng: &Rng) -> Result<(f64, Vec<f64>)> {
        match self {
            AnyModel::Score(m) => m.loss_and_grad(windows, draws, rng),
            AnyModel::Givt(m) => m.loss_and_grad(windows),
        }
    }

    pub fn train_loss(&self, windows: &[&[f64]], draws: usize, rng: &Rng) -> Result<f64> {
        match self {
            AnyModel::Score(m) => m.train_loss(windows, draws, rng),
            AnyModel::Givt(m) => m.train_loss(windows),
        }
    }

    /// IC curve at noise level `t`. The mixture model only has the data
    /// level and ignores `t`, `cfg` and `rng`.
    pub fn ic_curve(&self, seq: &LatentSequence, t: f64, cfg: &SolverConfig, rng: &Rng) -> Result<ICCurve> {
        match self {
            AnyModel::Score(m) => ic_curve(m, seq, t, cfg, rng),
            AnyModel::Givt(m) => givt_ic_curve(m, seq),
        }
    }

    fn meta_json(&self) -> Result<serde_json::Value> {
        Ok(match self {
            AnyModel::Score(m) => serde_json::to_value(&m.meta)?,
            AnyModel::Givt(m) => serde_json::to_value(&m.meta)?,
        })
    }

    pub fn checkpoint(&self, optimizer: Option<&AdamState>, seed: u64, step: usize) -> Result<Checkpoint> {
        Ok(Checkpoint::new(
            self.kind().name(),
            self.meta_json()?,
            self.store(),
            optimizer,
            seed,
            step,
        ))
    }

    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason,
        };
        let kind = ModelKind::parse(&ck.header.kind).map_err(|e| corrupt(e.to_string()))?;
        let store = ck.store();
        let model = match kind {
            ModelKind::Edm | ModelKind::Rff => {
                let meta: ScoreModelMeta = serde_json::from_value(ck.header.model.clone())
                    .map_err(|e| corrupt(format!("bad model header: {e}")))?;
                AnyModel::Score(ScoreModel::from_parts(meta, store)?)
            }
            ModelKind::Givt => {
                let meta: GivtMeta = serde_json::from_value(ck.header.model.clone())
                    .map_err(|e| corrupt(format!("bad model header: {e}")))?;
                AnyModel::Givt(GivtModel::from_parts(meta, store)?)
            }
        };
        if model.kind() != kind {
            return Err(corrupt("kind tag disagrees with the model header".into()));
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<(Self, Checkpoint)> {
        let ck = Checkpoint::load(path)?;
        Ok((Self::from_checkpoint(&ck, path)?, ck))
    }

    /// Report label: the kind name.
    pub fn name(&self) -> &'static str {
        self.kind().name()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ArchConfig {
        ArchConfig {
            dim: 3,
            width: 8,
            heads: 2,
            blocks: 1,
            max_seq: 16,
            mlp_hidden: 8,
            mlp_layers: 2,
            temb_dim: 4,
            gmm_components: 2,
            sigma_floor: 1e-3,
        }
    }

    #[test]
    fn checkpoint_round_trip_every_kind() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [ModelKind::Edm, ModelKind::Rff, ModelKind::Givt] {
            let mut m = AnyModel::new(kind, tiny(), vec![1.0, 0.5, 2.0], &Rng::from_seed(1)).unwrap();
            // stored parameters are f32
            m.params_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
            let path = dir.path().join(format!("{}.ckpt", kind.name()));
            m.checkpoint(None, 9, 17).unwrap().save(&path).unwrap();
            let (back, ck) = AnyModel::load(&path).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.kind(), kind);
            assert_eq!(ck.header.step, 17);
            assert_eq!(ck.header.seed, 9);
        }
    }

    #[test]
    fn mismatched_kind_tag_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let m = AnyModel::new(ModelKind::Givt, tiny(), vec![1.0; 3], &Rng::from_seed(1)).unwrap();
        let mut ck = m.checkpoint(None, 0, 0).unwrap();
        ck.header.kind = "edm".into();
        let path = dir.path().join("x.ckpt");
        ck.save(&path).unwrap();
        assert!(AnyModel::load(&path).is_err());
    }

    #[test]
    fn kinds_parse_and_grids() {
        for k in [ModelKind::Edm, ModelKind::Rff, ModelKind::Givt] {
            assert_eq!(ModelKind::parse(k.name()).unwrap(), k);
        }
        assert!(ModelKind::parse("vae").is_err());
        assert_eq!(ModelKind::Edm.default_noise_levels()[0], 0.002);
        assert_eq!(ModelKind::Rff.default_segment_levels(), vec![0.0, 0.25, 0.5, 0.7]);
    }
}
