//! Experiment harnesses. Each produces an [`ExperimentReport`] whose rows
//! serialize to CSV with a fixed column order:
//!
//! | report        | columns                                                   |
//! |---------------|-----------------------------------------------------------|
//! | NLL           | model, dataset, nll_bits_per_dim, frames, trimmed          |
//! | correlation   | model, t, rho, p, n                                        |
//! | timbre        | model, t, mean_rho, pairs                                  |
//! | errors        | estimator, setting, mae_normalized, me_normalized, frames  |
//! | segmentation  | model, t, precision, recall, f1, random_f1, sequences      |

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{boundary_prf, novelty_curve, novelty_time, onset_aligned_ic, pick_peaks, trim_extremes, NoveltyConfig};
use crate::error::{invalid, Result};
use crate::model::AnyModel;
use crate::numerics::{error_stats, spearman_permutation_test, spearman_rho, Rng};
use crate::odelik::{DivergenceMode, SolverConfig};
use crate::process::FlowModel;
use crate::surprisal::{ic_curve, ICCurve};
use crate::synthdata::{Annotations, LatentSequence};

/// Rows of one experiment, in declared order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport<R> {
    pub rows: Vec<R>,
}

impl<R: Serialize> ExperimentReport<R> {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| invalid(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

/// A model together with the noise levels to probe it at.
#[derive(Debug, Clone, Copy)]
pub struct ModelAt<'a> {
    pub model: &'a AnyModel,
    pub levels: &'a [f64],
}

/// IC curves of every sequence at level `t`, in dataset order.
pub fn model_curves(
    model: &AnyModel,
    dataset: &[LatentSequence],
    t: f64,
    cfg: &SolverConfig,
    rng: &Rng,
) -> Result<Vec<ICCurve>> {
    dataset.par_iter().map(|s| model.ic_curve(s, t, cfg, rng)).collect()
}

fn annotations<'a>(seq: &'a LatentSequence) -> Result<&'a Annotations> {
    seq.annotations
        .as_ref()
        .ok_or_else(|| invalid(format!("sequence {} has no annotations", seq.id)))
}

fn check_aligned(curves: &[ICCurve], dataset: &[LatentSequence]) -> Result<()> {
    if curves.len() != dataset.len() {
        return Err(invalid("one curve per sequence expected"));
    }
    for (c, s) in curves.iter().zip(dataset) {
        if c.sequence != s.id || c.len() + 1 != s.len() {
            return Err(invalid(format!("curve {} does not belong to sequence {}", c.sequence, s.id)));
        }
    }
    Ok(())
}

/// Onsets that have an IC value (all but a frame-0 onset) with the true IC
/// of their symbol.
fn scored_onsets(a: &Annotations) -> (Vec<usize>, Vec<f64>) {
    a.onsets
        .iter()
        .zip(&a.symbol_ic)
        .filter(|(&f, _)| f > 0)
        .map(|(&f, &b)| (f, b))
        .unzip()
}

// ---------------------------------------------------------------------------
// NLL

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllRow {
    pub model: String,
    pub dataset: String,
    pub nll_bits_per_dim: f64,
    pub frames: usize,
    pub trimmed: usize,
}

/// Mean data-level IC of each model over a dataset after dropping the time
/// steps that are extreme under any model. `curves[m][s]` is model `m` on
/// sequence `s`.
pub fn nll_from_curves(
    names: &[&str],
    curves: &[Vec<ICCurve>],
    dataset_name: &str,
    trim_fraction: f64,
) -> Result<ExperimentReport<NllRow>> {
    if names.len() != curves.len() || curves.is_empty() {
        return Err(invalid("one name per model expected"));
    }
    let flat: Vec<Vec<f64>> = curves
        .iter()
        .map(|cs| cs.iter().flat_map(|c| c.values.iter().copied()).collect())
        .collect();
    let refs: Vec<&[f64]> = flat.iter().map(|v| v.as_slice()).collect();
    let mask = trim_extremes(&refs, trim_fraction)?;
    let trimmed = mask.iter().filter(|&&m| m).count();
    let rows = names
        .iter()
        .zip(&flat)
        .map(|(name, vals)| {
            let kept: Vec<f64> = vals.iter().zip(&mask).filter(|(_, &m)| !m).map(|(v, _)| *v).collect();
            if kept.is_empty() {
                return Err(invalid("every time step was trimmed"));
            }
            Ok(NllRow {
                model: name.to_string(),
                dataset: dataset_name.to_string(),
                nll_bits_per_dim: kept.iter().sum::<f64>() / kept.len() as f64,
                frames: kept.len(),
                trimmed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport { rows })
}

/// Data-level NLL of each model with a shared trimming mask.
pub fn nll_experiment(
    models: &[&AnyModel],
    dataset: &[LatentSequence],
    dataset_name: &str,
    trim_fraction: f64,
    cfg: &SolverConfig,
    rng: &Rng,
) -> Result<ExperimentReport<NllRow>> {
    let curves = models
        .iter()
        .map(|m| model_curves(m, dataset, m.t_start(), cfg, rng))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<&str> = models.iter().map(|m| m.name()).collect();
    nll_from_curves(&names, &curves, dataset_name, trim_fraction)
}

// ---------------------------------------------------------------------------
// correlation with the true symbol IC

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub model: String,
    pub t: f64,
    pub rho: f64,
    pub p: f64,
    pub n: usize,
}

/// Pooled onset-aligned model IC and generator-true symbol IC.
pub fn onset_pairs(curves: &[ICCurve], dataset: &[LatentSequence]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_aligned(curves, dataset)?;
    let mut model_ic = Vec::new();
    let mut true_ic = Vec::new();
    for (c, s) in curves.iter().zip(dataset) {
        let (onsets, truth) = scored_onsets(annotations(s)?);
        model_ic.extend(onset_aligned_ic(c, &onsets)?);
        true_ic.extend(truth);
    }
    Ok((model_ic, true_ic))
}

/// Spearman ρ between onset-aligned IC and true symbol IC with a
/// permutation p-value.
pub fn correlation_from_curves(
    curves: &[ICCurve],
    dataset: &[LatentSequence],
    n_perm: usize,
    rng: &Rng,
) -> Result<(f64, f64, usize)> {
    let (m, t) = onset_pairs(curves, dataset)?;
    let (rho, p) = spearman_permutation_test(&m, &t, n_perm, rng)?;
    Ok((rho, p, m.len()))
}

pub fn correlation_experiment(
    models: &[ModelAt],
    dataset: &[LatentSequence],
    cfg: &SolverConfig,
    n_perm: usize,
    rng: &Rng,
) -> Result<ExperimentReport<CorrelationRow>> {
    let mut rows = Vec::new();
    for (mi, m) in models.iter().enumerate() {
        for (li, &t) in m.levels.iter().enumerate() {
            let curves = model_curves(m.model, dataset, t, cfg, rng)?;
            let (rho, p, n) = correlation_from_curves(&curves, dataset, n_perm, &rng.split(1 << 20 | (mi << 8 | li) as u64))?;
            rows.push(CorrelationRow {
                model: m.model.name().to_string(),
                t,
                rho,
                p,
                n,
            });
        }
    }
    Ok(ExperimentReport { rows })
}

// ---------------------------------------------------------------------------
// timbre invariance

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimbreRow {
    pub model: String,
    pub t: f64,
    pub mean_rho: f64,
    pub pairs: usize,
}

/// Mean Spearman ρ of onset-aligned IC over every pair of sequences that
/// share note material. Returns the mean and the number of pairs.
pub fn timbre_from_curves(curves: &[ICCurve], dataset: &[LatentSequence]) -> Result<(f64, usize)> {
    check_aligned(curves, dataset)?;
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.iter().enumerate() {
        if let Some(mat) = annotations(s)?.material {
            groups.entry(mat).or_default().push(i);
        }
    }
    let mut rhos = Vec::new();
    for members in groups.values() {
        for (x, &i) in members.iter().enumerate() {
            for &j in &members[x + 1..] {
                let (a, b) = (annotations(&dataset[i])?, annotations(&dataset[j])?);
                if a.onsets != b.onsets || a.symbols != b.symbols {
                    return Err(invalid(format!(
                        "{} and {} share material but not symbols",
                        dataset[i].id, dataset[j].id
                    )));
                }
                let (onsets, _) = scored_onsets(a);
                let u = onset_aligned_ic(&curves[i], &onsets)?;
                let v = onset_aligned_ic(&curves[j], &onsets)?;
                rhos.push(spearman_rho(&u, &v)?);
            }
        }
    }
    if rhos.is_empty() {
        return Err(invalid("no pair of sequences shares note material"));
    }
    Ok((rhos.iter().sum::<f64>() / rhos.len() as f64, rhos.len()))
}

pub fn timbre_invariance_experiment(
    models: &[ModelAt],
    dataset: &[LatentSequence],
    cfg: &SolverConfig,
    rng: &Rng,
) -> Result<ExperimentReport<TimbreRow>> {
    let mut rows = Vec::new();
    for m in models {
        for &t in m.levels {
            let curves = model_curves(m.model, dataset, t, cfg, rng)?;
            let (mean_rho, pairs) = timbre_from_curves(&curves, dataset)?;
            rows.push(TimbreRow {
                model: m.model.name().to_string(),
                t,
                mean_rho,
                pairs,
            });
        }
    }
    Ok(ExperimentReport { rows })
}

// ---------------------------------------------------------------------------
// approximation errors

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErrorExperimentConfig {
    /// probe counts compared against the reference
    pub n_r: Vec<usize>,
    pub reference_n_r: usize,
    /// solver tolerance of the probe-count comparison
    pub s_tol: f64,
    pub tols: Vec<f64>,
    pub reference_tol: f64,
    /// probes of the tolerance comparison, shared by every tolerance
    pub q_n_r: usize,
    /// predicted frames to evaluate
    pub frames: usize,
}

impl Default for ErrorExperimentConfig {
    fn default() -> Self {
        Self {
            n_r: vec![1, 2, 4, 8, 16],
            reference_n_r: 32,
            s_tol: 1e-3,
            tols: vec![1.0, 0.1, 0.01, 0.001],
            reference_tol: 1e-5,
            q_n_r: 1,
            frames: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    /// "S" (probe count) or "Q" (solver tolerance)
    pub estimator: String,
    /// n_r for S rows, tol for Q rows
    pub setting: f64,
    pub mae_normalized: f64,
    pub me_normalized: f64,
    pub frames: usize,
}

/// Data-level NLLs (bits/dim) of the first `n` predicted frames of the
/// dataset, sequence by sequence.
fn frame_nlls(
    model: &dyn FlowModel,
    dataset: &[LatentSequence],
    n: usize,
    cfg: &SolverConfig,
    rng: &Rng,
) -> Result<Vec<f64>> {
    let t0 = model.process().t_start;
    let mut out = Vec::with_capacity(n);
    for s in dataset {
        if out.len() >= n {
            break;
        }
        out.extend(ic_curve(model, s, t0, cfg, rng)?.values);
    }
    if out.len() < n {
        return Err(invalid(format!("dataset holds {} predicted frames, {n} requested", out.len())));
    }
    out.truncate(n);
    Ok(out)
}

/// S rows: each probe count against the reference count at a fixed
/// tolerance, probes of count `n` drawn from stream `n`. Q rows: each
/// tolerance against the reference tolerance with the same probes.
pub fn error_experiment(
    model: &dyn FlowModel,
    dataset: &[LatentSequence],
    cfg: &ErrorExperimentConfig,
    rng: &Rng,
) -> Result<ExperimentReport<ErrorRow>> {
    if cfg.frames < 100 {
        return Err(invalid("the error experiment needs at least 100 frames"));
    }
    let n = cfg.frames;
    let hutch = |n_r, tol| SolverConfig::with_tol(tol, DivergenceMode::Hutchinson { n_r });
    let mut rows = Vec::new();
    let s_ref = frame_nlls(model, dataset, n, &hutch(cfg.reference_n_r, cfg.s_tol), &rng.split(cfg.reference_n_r as u64))?;
    for &n_r in &cfg.n_r {
        let est = frame_nlls(model, dataset, n, &hutch(n_r, cfg.s_tol), &rng.split(n_r as u64))?;
        let st = error_stats(&est, &s_ref)?;
        rows.push(ErrorRow {
            estimator: "S".into(),
            setting: n_r as f64,
            mae_normalized: st.mae_normalized,
            me_normalized: st.me_normalized,
            frames: n,
        });
    }
    let q_rng = rng.split(1 << 32);
    let q_ref = frame_nlls(model, dataset, n, &hutch(cfg.q_n_r, cfg.reference_tol), &q_rng)?;
    for &tol in &cfg.tols {
        let est = frame_nlls(model, dataset, n, &hutch(cfg.q_n_r, tol), &q_rng)?;
        let st = error_stats(&est, &q_ref)?;
        rows.push(ErrorRow {
            estimator: "Q".into(),
            setting: tol,
            mae_normalized: st.mae_normalized,
            me_normalized: st.me_normalized,
            frames: n,
        });
    }
    Ok(ExperimentReport { rows })
}

// ---------------------------------------------------------------------------
// segmentation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRow {
    pub model: String,
    pub t: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub random_f1: f64,
    pub sequences: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentConfig {
    pub novelty: NoveltyConfig,
    /// matching tolerance in seconds
    pub window_seconds: f64,
    /// draws of the random-peak baseline per sequence
    pub random_draws: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            novelty: NoveltyConfig::default(),
            window_seconds: 0.5,
            random_draws: 100,
        }
    }
}

/// Predicted boundary times of one IC curve.
pub fn predicted_boundaries(curve: &ICCurve, cfg: &NoveltyConfig) -> Result<Vec<f64>> {
    let nov = novelty_curve(&curve.values, cfg)?;
    Ok(pick_peaks(&nov, cfg)
        .into_iter()
        .map(|i| novelty_time(i, curve.frame_rate))
        .collect())
}

/// Mean per-sequence precision, recall and F1, and the mean F1 of random
/// peaks (same count per sequence, uniform positions).
pub fn segment_from_curves(
    curves: &[ICCurve],
    dataset: &[LatentSequence],
    cfg: &SegmentConfig,
    rng: &Rng,
) -> Result<(f64, f64, f64, f64)> {
    check_aligned(curves, dataset)?;
    if dataset.is_empty() {
        return Err(invalid("empty dataset"));
    }
    let mut acc = [0.0; 4];
    for (si, (c, s)) in curves.iter().zip(dataset).enumerate() {
        let truth = &annotations(s)?.boundaries;
        let pred = predicted_boundaries(c, &cfg.novelty)?;
        let r = boundary_prf(&pred, truth, cfg.window_seconds)?;
        let n_nov = c.len() - 1;
        let mut g = rng.split(stream_of(&s.id)).split(si as u64).generator();
        let mut rf = 0.0;
        for _ in 0..cfg.random_draws {
            let mut pos: Vec<f64> = (0..pred.len())
                .map(|_| novelty_time(g.random_range(0..n_nov), c.frame_rate))
                .collect();
            pos.sort_by(f64::total_cmp);
            rf += boundary_prf(&pos, truth, cfg.window_seconds)?.f1;
        }
        acc[0] += r.precision;
        acc[1] += r.recall;
        acc[2] += r.f1;
        acc[3] += rf / cfg.random_draws.max(1) as f64;
    }
    let n = dataset.len() as f64;
    Ok((acc[0] / n, acc[1] / n, acc[2] / n, acc[3] / n))
}

fn stream_of(id: &str) -> u64 {
    crate::surprisal::stream_key(id)
}

pub fn segment_experiment(
    models: &[ModelAt],
    dataset: &[LatentSequence],
    solver: &SolverConfig,
    cfg: &SegmentConfig,
    rng: &Rng,
) -> Result<ExperimentReport<SegmentRow>> {
    let mut rows = Vec::new();
    for m in models {
        for &t in m.levels {
            let curves = model_curves(m.model, dataset, t, solver, rng)?;
            let (precision, recall, f1, random_f1) = segment_from_curves(&curves, dataset, cfg, &rng.split(7))?;
            rows.push(SegmentRow {
                model: m.model.name().to_string(),
                t,
                precision,
                recall,
                f1,
                random_f1,
                sequences: dataset.len(),
            });
        }
    }
    Ok(ExperimentReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{gen_pitch_timbre, gen_segmented, GeneratorConfig, GeneratorSpec};

    fn spec() -> GeneratorSpec {
        GeneratorSpec::from_config(GeneratorConfig::default()).unwrap()
    }

    /// Curve whose value at every frame is the true IC of the symbol it
    /// belongs to.
    fn oracle_curve(s: &LatentSequence) -> ICCurve {
        let a = s.annotations.as_ref().unwrap();
        let fps = a.onsets.get(1).copied().unwrap_or(s.len());
        let values = (1..s.len()).map(|f| a.symbol_ic[f / fps]).collect();
        curve_of(s, values)
    }

    fn curve_of(s: &LatentSequence, values: Vec<f64>) -> ICCurve {
        ICCurve {
            model: "oracle".into(),
            sequence: s.id.clone(),
            noise_level: 0.0,
            frame_rate: s.frame_rate,
            values,
            solver: None,
            seed: 0,
        }
    }

    fn melodies(n: u64, timbres: &[u64]) -> Vec<LatentSequence> {
        let sp = spec();
        let mut out = Vec::new();
        for m in 0..n {
            for &t in timbres {
                out.push(gen_pitch_timbre(&sp, 30, t, &Rng::from_seed(100 + m)).unwrap());
            }
        }
        out
    }

    #[test]
    fn self_correlation_is_one() {
        let data = melodies(4, &[0]);
        let curves: Vec<ICCurve> = data.iter().map(oracle_curve).collect();
        let (rho, p, n) = correlation_from_curves(&curves, &data, 2000, &Rng::from_seed(1)).unwrap();
        assert!((rho - 1.0).abs() < 1e-12);
        assert!(p < 0.01);
        assert_eq!(n, 4 * 29);
    }

    #[test]
    fn random_ic_is_uncorrelated() {
        let data = melodies(6, &[0]);
        let mut hits = 0;
        for seed in 0..20u64 {
            let mut g = Rng::from_seed(seed).generator();
            let curves: Vec<ICCurve> = data
                .iter()
                .map(|s| curve_of(s, (1..s.len()).map(|_| g.random::<f64>()).collect()))
                .collect();
            let (rho, p, _) = correlation_from_curves(&curves, &data, 500, &Rng::from_seed(seed)).unwrap();
            assert!(rho.abs() < 0.4);
            if p < 0.05 {
                hits += 1;
            }
        }
        // about one in twenty under the null; 5 is far in the tail
        assert!(hits <= 5, "{hits}");
    }

    #[test]
    fn timbre_pairs() {
        let data = melodies(3, &[0, 1, 2]);
        let curves: Vec<ICCurve> = data.iter().map(oracle_curve).collect();
        let (rho, pairs) = timbre_from_curves(&curves, &data).unwrap();
        assert_eq!(pairs, 3 * 3);
        assert!((rho - 1.0).abs() < 1e-12);

        // a symbol-shuffled partner decorrelates
        let mut g = Rng::from_seed(9).generator();
        let shuffled: Vec<ICCurve> = data
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut c = oracle_curve(s);
                if i % 3 == 1 {
                    use rand::seq::SliceRandom;
                    c.values.shuffle(&mut g);
                }
                c
            })
            .collect();
        let (low, _) = timbre_from_curves(&shuffled, &data).unwrap();
        assert!(low < 0.6, "{low}");

        // mismatched symbols under one material id
        let mut bad = data.clone();
        bad[1].annotations.as_mut().unwrap().symbols[3] += 1;
        assert!(timbre_from_curves(&curves, &bad).is_err());
    }

    #[test]
    fn nll_report_layout() {
        let data = melodies(2, &[0]);
        let a: Vec<ICCurve> = data.iter().map(oracle_curve).collect();
        let b: Vec<ICCurve> = a
            .iter()
            .map(|c| ICCurve {
                values: c.values.iter().map(|v| v + 1.0).collect(),
                ..c.clone()
            })
            .collect();
        let r = nll_from_curves(&["edm", "givt"], &[a, b], "syn", 0.01).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!((r.rows[1].nll_bits_per_dim - r.rows[0].nll_bits_per_dim - 1.0).abs() < 1e-12);
        // both models rank the steps identically, so one model's share is trimmed
        let total: usize = data.iter().map(|s| s.len() - 1).sum();
        assert_eq!(r.rows[0].trimmed, (0.01 * total as f64).ceil() as usize);
        assert_eq!(r.rows[0].frames, total - r.rows[0].trimmed);
        let csv = r.to_csv().unwrap();
        assert!(csv.starts_with("model,dataset,nll_bits_per_dim,frames,trimmed\n"));
    }

    #[test]
    fn planted_boundaries_are_found_from_an_ideal_curve() {
        let sp = spec();
        let data: Vec<LatentSequence> = (0..3)
            .map(|i| gen_segmented(&sp, 4, 60, &Rng::from_seed(i)).unwrap())
            .collect();
        // a curve that jumps for a few frames after every boundary
        let curves: Vec<ICCurve> = data
            .iter()
            .map(|s| {
                let b: Vec<usize> = s
                    .annotations
                    .as_ref()
                    .unwrap()
                    .boundaries
                    .iter()
                    .map(|t| (t * s.frame_rate).round() as usize)
                    .collect();
                let v = (1..s.len())
                    .map(|f| if b.iter().any(|&x| f >= x && f < x + 4) { 5.0 } else { 1.0 })
                    .collect();
                curve_of(s, v)
            })
            .collect();
        let (p, r, f1, rf) = segment_from_curves(&curves, &data, &SegmentConfig::default(), &Rng::from_seed(0)).unwrap();
        assert_eq!((p, r, f1), (1.0, 1.0, 1.0));
        assert!(rf < 0.5, "{rf}");
    }

    #[test]
    fn error_experiment_needs_frames() {
        let cfg = ErrorExperimentConfig {
            frames: 50,
            ..ErrorExperimentConfig::default()
        };
        let flow = crate::process::GaussianFlow::new(crate::process::ProcessKind::Rff, 16, 0.5, 0.0, 0.5);
        assert!(error_experiment(&flow, &melodies(1, &[0]), &cfg, &Rng::from_seed(0)).is_err());
    }
}
