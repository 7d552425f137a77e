//! Run configuration and the command implementations behind the `adm-ic`
//! binary. Every command is a function of (config, inputs, seed) and writes
//! the resolved configuration next to its outputs as `config.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::plot::{line_plot_svg, write_svg};
use crate::analysis::{
    correlation_experiment, error_experiment, model_curves, nll_experiment, novelty_curve, predicted_boundaries,
    segment_experiment, timbre_invariance_experiment, ErrorExperimentConfig, ModelAt, NoveltyConfig, SegmentConfig,
};
use crate::error::{check_dim, invalid, Error, Result};
use crate::model::{AnyModel, ModelKind};
use crate::neural::{ArchConfig, TrainConfig};
use crate::numerics::Rng;
use crate::odelik::SolverConfig;
use crate::process::{data_scale, EdmLossConfig};
use crate::synthdata::{
    gen_pitch_timbre, gen_segmented, load_dataset, save_dataset, GeneratorConfig, GeneratorSpec, LatentSequence,
};
use crate::train::{train, write_history, TrainState};

/// Sizes of the generated splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub generator: GeneratorConfig,
    /// directory written by `gen` and read by the other commands
    pub path: PathBuf,
    pub train_melodies: usize,
    pub train_segmented: usize,
    pub melody_symbols: usize,
    pub sections: usize,
    pub frames_per_section: usize,
    /// held-out melodies, each rendered in `test_timbres` timbres
    pub test_melodies: usize,
    pub test_timbres: u64,
    pub test_melody_symbols: usize,
    pub test_segmented: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig {
                a_fine: 0.5,
                coarse_jitter: 1.0,
                texture_anisotropy: 1e4,
                ..GeneratorConfig::default()
            },
            path: PathBuf::from("data"),
            train_melodies: 60,
            train_segmented: 30,
            melody_symbols: 32,
            sections: 4,
            frames_per_section: 48,
            test_melodies: 8,
            test_timbres: 3,
            test_melody_symbols: 24,
            test_segmented: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub arch: ArchConfig,
    pub edm_loss: EdmLossConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Edm,
            arch: ArchConfig {
                dim: 16,
                width: 32,
                heads: 2,
                blocks: 2,
                max_seq: 256,
                mlp_hidden: 64,
                mlp_layers: 3,
                temb_dim: 16,
                gmm_components: 8,
                sigma_floor: 1e-3,
            },
            edm_loss: EdmLossConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// correlation grid per kind; the kind's default grid when absent
    pub noise_levels: Option<Vec<f64>>,
    /// segmentation grid per kind; the kind's default grid when absent
    pub segment_levels: Option<Vec<f64>>,
    pub novelty: NoveltyConfig,
    pub window_seconds: f64,
    pub random_draws: usize,
    pub trim_fraction: f64,
    pub permutations: usize,
    pub errors: ErrorExperimentConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            noise_levels: None,
            segment_levels: None,
            novelty: NoveltyConfig::default(),
            window_seconds: 0.5,
            random_draws: 100,
            trim_fraction: 0.01,
            permutations: 10_000,
            errors: ErrorExperimentConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn levels(&self, kind: ModelKind) -> Vec<f64> {
        match (kind, &self.noise_levels) {
            (ModelKind::Givt, _) => vec![0.0],
            (_, Some(l)) => l.clone(),
            (k, None) => k.default_noise_levels(),
        }
    }

    pub fn seg_levels(&self, kind: ModelKind) -> Vec<f64> {
        match (kind, &self.segment_levels) {
            (ModelKind::Givt, _) => vec![0.0],
            (_, Some(l)) => l.clone(),
            (k, None) => k.default_segment_levels(),
        }
    }

    pub fn segment(&self) -> SegmentConfig {
        SegmentConfig {
            novelty: self.novelty,
            window_seconds: self.window_seconds,
            random_draws: self.random_draws,
        }
    }
}

/// The whole run definition. Unknown keys are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub solver: SolverConfig,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                lr: 2e-3,
                warmup_steps: 100,
                total_steps: 6000,
                batch_size: 8,
                window: 64,
                draws_per_frame: 4,
                ..TrainConfig::default()
            },
            solver: SolverConfig::with_tol(1e-2, crate::odelik::DivergenceMode::Hutchinson { n_r: 2 }),
            experiment: ExperimentConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; `None` gives the defaults. `seed` overrides the
    /// file's seed.
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_json(&std::fs::read_to_string(p)?)?,
            None => Self::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.experiment.novelty.validate()?;
        check_dim("model.arch.dim", self.data.generator.dim, self.model.arch.dim)?;
        if !(self.experiment.window_seconds > 0.0) {
            return Err(invalid("experiment.window_seconds must be positive"));
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// The three generated splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<LatentSequence>,
    /// melodies in several timbres, for correlation, timbre and NLL runs
    pub test_melody: Vec<LatentSequence>,
    /// planted-boundary sequences
    pub test_segmented: Vec<LatentSequence>,
}

pub const SPLITS: [&str; 3] = ["train", "test_melody", "test_segmented"];

impl Corpus {
    /// Training melodies cycle through the timbre bank; the test splits use
    /// streams disjoint from training.
    pub fn generate(cfg: &DataConfig, seed: u64) -> Result<Self> {
        let spec = GeneratorSpec::from_config(cfg.generator)?;
        let root = Rng::new(seed, 0xc0_4905);
        let timbres = cfg.generator.timbres;
        let mut train = Vec::new();
        for m in 0..cfg.train_melodies as u64 {
            train.push(gen_pitch_timbre(&spec, cfg.melody_symbols, m % timbres, &root.split(1).split(m))?);
        }
        for m in 0..cfg.train_segmented as u64 {
            train.push(gen_segmented(&spec, cfg.sections, cfg.frames_per_section, &root.split(2).split(m))?);
        }
        let mut test_melody = Vec::new();
        for m in 0..cfg.test_melodies as u64 {
            for t in 0..cfg.test_timbres.min(timbres) {
                test_melody.push(gen_pitch_timbre(&spec, cfg.test_melody_symbols, t, &root.split(3).split(m))?);
            }
        }
        let test_segmented = (0..cfg.test_segmented as u64)
            .map(|m| gen_segmented(&spec, cfg.sections, cfg.frames_per_section, &root.split(4).split(m)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            train,
            test_melody,
            test_segmented,
        })
    }

    pub fn split(&self, name: &str) -> Result<&[LatentSequence]> {
        match name {
            "train" => Ok(&self.train),
            "test_melody" => Ok(&self.test_melody),
            "test_segmented" => Ok(&self.test_segmented),
            other => Err(invalid(format!("unknown split {other:?}"))),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for name in SPLITS {
            save_dataset(self.split(name)?, &dir.join(name))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            train: load_dataset(&dir.join("train"))?,
            test_melody: load_dataset(&dir.join("test_melody"))?,
            test_segmented: load_dataset(&dir.join("test_segmented"))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: String,
    pub sequences: usize,
    pub frames: usize,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub spec_seed: u64,
    pub splits: Vec<ManifestEntry>,
}

/// Generates the corpus into `out` with a manifest of seeds and counts.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let corpus = Corpus::generate(&cfg.data, cfg.seed)?;
    corpus.save(out)?;
    let splits = SPLITS
        .iter()
        .map(|&name| {
            let s = corpus.split(name)?;
            let mut seeds: Vec<u64> = s.iter().map(|x| x.seed).collect();
            seeds.dedup();
            Ok(ManifestEntry {
                split: name.to_string(),
                sequences: s.len(),
                frames: s.iter().map(|x| x.len()).sum(),
                seeds,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        seed: cfg.seed,
        spec_seed: cfg.data.generator.spec_seed,
        splits,
    };
    std::fs::write(out.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    cfg.write(out)?;
    Ok(manifest)
}

/// Fresh model for the configured kind, scaled to the training frames.
pub fn init_model(cfg: &RunConfig, train_set: &[LatentSequence]) -> Result<AnyModel> {
    let d = cfg.model.arch.dim;
    let mut frames = Vec::new();
    for s in train_set {
        check_dim("frame dimension", d, s.dim)?;
        frames.extend_from_slice(&s.frames);
    }
    let mut model = AnyModel::new(
        cfg.model.kind,
        cfg.model.arch,
        data_scale(&frames, d)?,
        &Rng::new(cfg.seed, 0x1417),
    )?;
    if let AnyModel::Score(m) = &mut model {
        m.meta.edm_loss = cfg.model.edm_loss;
    }
    Ok(model)
}

/// Outcome of a training command.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub diverged: Option<String>,
}

/// Trains (or resumes from `resume`) on the `train` split and writes
/// `model.ckpt`, `loss.csv` and `config.json` into `out`. A diverged run keeps
/// its checkpoint, flagged, and returns an error.
pub fn cmd_train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<TrainReport> {
    std::fs::create_dir_all(out)?;
    cfg.write(out)?;
    let train_set = load_dataset(&cfg.data.path.join("train"))?;
    let mut state = match resume {
        Some(p) => {
            let st = TrainState::resume(p)?;
            if st.model.kind() != cfg.model.kind {
                return Err(invalid(format!(
                    "checkpoint holds a {} model, config asks for {}",
                    st.model.name(),
                    cfg.model.kind.name()
                )));
            }
            st
        }
        None => TrainState::new(init_model(cfg, &train_set)?, cfg.seed),
    };
    let history = out.join("loss.csv");
    if resume.is_none() && history.exists() {
        std::fs::remove_file(&history)?;
    }
    train(&mut state, &train_set, &cfg.train, |_| {})?;
    write_history(&state.history, &history)?;
    let ck = out.join("model.ckpt");
    state.save_checkpoint(&ck)?;
    if let Some(reason) = &state.diverged {
        return Err(Error::TrainingDiverged {
            step: state.step,
            reason: reason.clone(),
        });
    }
    Ok(TrainReport {
        checkpoint: ck,
        steps: state.step,
        final_loss: state.history.last().map(|r| r.loss),
        diverged: None,
    })
}

pub fn load_models(paths: &[PathBuf]) -> Result<Vec<AnyModel>> {
    if paths.is_empty() {
        return Err(invalid("at least one --checkpoint is required"));
    }
    paths.iter().map(|p| Ok(AnyModel::load(p)?.0)).collect()
}

fn check_models(models: &[AnyModel], data: &[LatentSequence]) -> Result<()> {
    for m in models {
        for s in data {
            check_dim("frame dimension", m.dim(), s.dim)?;
        }
    }
    Ok(())
}

fn level_tag(t: f64) -> String {
    format!("{t}").replace('.', "p")
}

/// IC curves of every `test_segmented` sequence at every segmentation level,
/// one CSV per (model, sequence, level) plus one SVG per (model, sequence).
pub fn cmd_ic(cfg: &RunConfig, models: &[AnyModel], out: &Path) -> Result<usize> {
    cfg.write(out)?;
    let data = load_dataset(&cfg.data.path.join("test_segmented"))?;
    check_models(models, &data)?;
    let rng = Rng::new(cfg.seed, 0x1c);
    let mut written = 0;
    for m in models {
        let dir = out.join("ic").join(m.name());
        std::fs::create_dir_all(&dir)?;
        let levels = cfg.experiment.seg_levels(m.kind());
        let per_level = levels
            .iter()
            .map(|&t| model_curves(m, &data, t, &cfg.solver, &rng))
            .collect::<Result<Vec<_>>>()?;
        for (si, s) in data.iter().enumerate() {
            let mut series = Vec::new();
            for (li, &t) in levels.iter().enumerate() {
                let c = &per_level[li][si];
                c.write_csv(&dir.join(format!("{}_t{}.csv", s.id, level_tag(t))))?;
                written += 1;
                series.push((format!("t={t}"), c.values.clone()));
            }
            let refs: Vec<(&str, &[f64])> = series.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
            let marks = s.annotations.as_ref().map(|a| a.boundaries.clone()).unwrap_or_default();
            let svg = line_plot_svg(&format!("{} IC, {}", m.name(), s.id), s.frame_rate, &refs, &marks);
            write_svg(&dir.join(format!("{}.svg", s.id)), &svg)?;
        }
    }
    Ok(written)
}

/// Data-level NLL of every model on both test splits, one trimming mask per
/// split.
pub fn cmd_nll(cfg: &RunConfig, models: &[AnyModel], out: &Path) -> Result<()> {
    cfg.write(out)?;
    let refs: Vec<&AnyModel> = models.iter().collect();
    let mut rows = Vec::new();
    for split in ["test_melody", "test_segmented"] {
        let data = load_dataset(&cfg.data.path.join(split))?;
        check_models(models, &data)?;
        let r = nll_experiment(&refs, &data, split, cfg.experiment.trim_fraction, &cfg.solver, &Rng::new(cfg.seed, 0x4e11))?;
        rows.extend(r.rows);
    }
    crate::analysis::ExperimentReport { rows }.write_csv(&out.join("nll.csv"))
}

/// Probe-count and tolerance errors of one diffusion model on the
/// `test_melody` split.
pub fn cmd_errors(cfg: &RunConfig, models: &[AnyModel], out: &Path) -> Result<()> {
    cfg.write(out)?;
    let [model] = models else {
        return Err(invalid("errors takes exactly one checkpoint"));
    };
    let flow = model
        .as_flow()
        .ok_or_else(|| invalid("the error experiment needs a diffusion checkpoint"))?;
    let data = load_dataset(&cfg.data.path.join("test_melody"))?;
    check_models(models, &data)?;
    error_experiment(flow, &data, &cfg.experiment.errors, &Rng::new(cfg.seed, 0xe770))?.write_csv(&out.join("errors.csv"))
}

/// Symbol-IC correlation and cross-timbre correlation on `test_melody`.
pub fn cmd_correlate(cfg: &RunConfig, models: &[AnyModel], out: &Path) -> Result<()> {
    cfg.write(out)?;
    let data = load_dataset(&cfg.data.path.join("test_melody"))?;
    check_models(models, &data)?;
    let levels: Vec<Vec<f64>> = models.iter().map(|m| cfg.experiment.levels(m.kind())).collect();
    let at: Vec<ModelAt> = models
        .iter()
        .zip(&levels)
        .map(|(model, l)| ModelAt { model, levels: l })
        .collect();
    let rng = Rng::new(cfg.seed, 0xc022);
    correlation_experiment(&at, &data, &cfg.solver, cfg.experiment.permutations, &rng)?
        .write_csv(&out.join("correlation.csv"))?;
    timbre_invariance_experiment(&at, &data, &cfg.solver, &rng)?.write_csv(&out.join("timbre.csv"))
}

/// Novelty segmentation on `test_segmented`, with a novelty plot of the
/// first sequence per model.
pub fn cmd_segment(cfg: &RunConfig, models: &[AnyModel], out: &Path) -> Result<()> {
    cfg.write(out)?;
    let data = load_dataset(&cfg.data.path.join("test_segmented"))?;
    check_models(models, &data)?;
    let levels: Vec<Vec<f64>> = models.iter().map(|m| cfg.experiment.seg_levels(m.kind())).collect();
    let at: Vec<ModelAt> = models
        .iter()
        .zip(&levels)
        .map(|(model, l)| ModelAt { model, levels: l })
        .collect();
    let rng = Rng::new(cfg.seed, 0x5e6);
    segment_experiment(&at, &data, &cfg.solver, &cfg.experiment.segment(), &rng)?
        .write_csv(&out.join("segment.csv"))?;
    if let Some(first) = data.first() {
        for (m, l) in models.iter().zip(&levels) {
            let mut series = Vec::new();
            for &t in l {
                let c = m.ic_curve(first, t, &cfg.solver, &rng)?;
                let nov = novelty_curve(&c.values, &cfg.experiment.novelty)?;
                let picked = predicted_boundaries(&c, &cfg.experiment.novelty)?;
                series.push((format!("t={t} ({} peaks)", picked.len()), nov));
            }
            let refs: Vec<(&str, &[f64])> = series.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
            let marks = first.annotations.as_ref().map(|a| a.boundaries.clone()).unwrap_or_default();
            let svg = line_plot_svg(&format!("{} novelty, {}", m.name(), first.id), first.frame_rate, &refs, &marks);
            write_svg(&out.join(format!("novelty_{}.svg", m.name())), &svg)?;
        }
    }
    Ok(())
}
