//! Information content of predicted frames, in bits per dimension, at the
//! data level and along the noise continuum.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::Rng;
use crate::odelik::{log_likelihood_augmented, SolverConfig};
use crate::process::{perturbation_mean, FlowModel};
use crate::synthdata::LatentSequence;

pub fn bits_per_dim(loglik_nats: f64, d: usize) -> f64 {
    -loglik_nats / (d as f64 * std::f64::consts::LN_2)
}

/// One IC value per predicted frame: `values[i]` belongs to frame `i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ICCurve {
    pub model: String,
    pub sequence: String,
    pub noise_level: f64,
    pub frame_rate: f64,
    pub values: Vec<f64>,
    pub solver: Option<SolverConfig>,
    pub seed: u64,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    model: &'a str,
    sequence: &'a str,
    noise_level: f64,
    frame_rate: f64,
    frames: usize,
    solver: Option<SolverConfig>,
    seed: u64,
}

impl ICCurve {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Writes `frame,time_seconds,ic_bits_per_dim` rows plus a `.json`
    /// sidecar next to `path`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["frame", "time_seconds", "ic_bits_per_dim"])?;
        for (i, v) in self.values.iter().enumerate() {
            let k = i + 1;
            w.write_record([k.to_string(), (k as f64 / self.frame_rate).to_string(), v.to_string()])?;
        }
        w.flush()?;
        let side = Sidecar {
            model: &self.model,
            sequence: &self.sequence,
            noise_level: self.noise_level,
            frame_rate: self.frame_rate,
            frames: self.values.len(),
            solver: self.solver,
            seed: self.seed,
        };
        let mut f = std::fs::File::create(path.with_extension("json"))?;
        f.write_all(&serde_json::to_vec_pretty(&side)?)?;
        Ok(())
    }
}

/// Stable 64-bit FNV-1a hash, used to key random streams by sequence id.
pub fn stream_key(id: &str) -> u64 {
    id.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Random stream of frame `k` of a sequence.
pub fn frame_rng(rng: &Rng, sequence_id: &str, k: usize) -> Rng {
    rng.split(stream_key(sequence_id)).split(k as u64)
}

fn ic_given_context(
    model: &dyn FlowModel,
    frame: &[f64],
    ctx: &[f64],
    t: f64,
    cfg: &SolverConfig,
    rng: &Rng,
) -> Result<f64> {
    let z_t = perturbation_mean(frame, t, model.process())?;
    let est = log_likelihood_augmented(model, &z_t, t, ctx, cfg, rng)?;
    Ok(bits_per_dim(est.loglik, model.dim()))
}

fn check_sequence(model: &dyn FlowModel, seq: &LatentSequence) -> Result<()> {
    crate::error::check_dim("frame dimension", model.dim(), seq.dim)
}

/// IC of frame `k ≥ 1` given the clean frames before it, evaluated at the
/// expected value of the level-`t` perturbation.
pub fn frame_ic(
    model: &dyn FlowModel,
    seq: &LatentSequence,
    k: usize,
    t: f64,
    cfg: &SolverConfig,
    rng: &Rng,
) -> Result<f64> {
    check_sequence(model, seq)?;
    if k == 0 || k >= seq.len() {
        return Err(invalid(format!("frame index {k} must lie in 1..{}", seq.len())));
    }
    let d = seq.dim;
    let ctx = model.contexts(&seq.frames[..k * d])?;
    let w = model.context_dim();
    ic_given_context(
        model,
        seq.frame(k),
        &ctx[(k - 1) * w..k * w],
        t,
        cfg,
        &frame_rng(rng, &seq.id, k),
    )
}

/// IC of every predicted frame. The encoder runs once over the sequence and
/// the frames are solved in parallel.
pub fn ic_curve(model: &dyn FlowModel, seq: &LatentSequence, t: f64, cfg: &SolverConfig, rng: &Rng) -> Result<ICCurve> {
    check_sequence(model, seq)?;
    model.process().check_t(t)?;
    let d = seq.dim;
    let n = seq.len();
    let ctx = model.contexts(&seq.frames[..(n - 1) * d])?;
    let w = model.context_dim();
    let values = (1..n)
        .into_par_iter()
        .map(|k| {
            ic_given_context(
                model,
                seq.frame(k),
                &ctx[(k - 1) * w..k * w],
                t,
                cfg,
                &frame_rng(rng, &seq.id, k),
            )
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ICCurve {
        model: model.name(),
        sequence: seq.id.clone(),
        noise_level: t,
        frame_rate: seq.frame_rate,
        values,
        solver: Some(*cfg),
        seed: rng.seed,
    })
}

/// Mean of the unmasked values of all curves. `mask[i]` drops index `i` of
/// every curve.
pub fn mean_nll(curves: &[&ICCurve], mask: &[bool]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in curves {
        if c.values.len() != mask.len() {
            return Err(invalid("mask length differs from the curve length"));
        }
        for (v, m) in c.values.iter().zip(mask) {
            if !m {
                sum += v;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(invalid("no IC values left after masking"));
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::ArchConfig;
    use crate::odelik::DivergenceMode;
    use crate::process::{GaussianFlow, ProcessKind, ProcessSpec, ScoreModel};

    #[test]
    fn unit_conversions() {
        assert!((bits_per_dim(-3.0 * std::f64::consts::LN_2, 3) - 1.0).abs() < 1e-15);
        assert_eq!(bits_per_dim(0.0, 5), 0.0);
        let two_pi = 2.0 * std::f64::consts::PI;
        assert!((bits_per_dim(-two_pi.ln(), 2) - 1.3257).abs() < 1e-4);
    }

    fn tiny_model(kind: ProcessKind) -> ScoreModel {
        let arch = ArchConfig {
            dim: 2,
            width: 8,
            heads: 2,
            blocks: 1,
            max_seq: 32,
            mlp_hidden: 8,
            mlp_layers: 2,
            temb_dim: 4,
            ..ArchConfig::default()
        };
        ScoreModel::new(arch, kind, vec![1.0; 2], &Rng::from_seed(1)).unwrap()
    }

    fn seq(len: usize) -> LatentSequence {
        let mut g = Rng::from_seed(2).generator();
        LatentSequence::new("s", crate::numerics::standard_normal_from(&mut g, 2 * len), 2, 10.0).unwrap()
    }

    #[test]
    fn curve_shape_and_frame_agreement() {
        let cfg = SolverConfig::with_tol(1e-3, DivergenceMode::Hutchinson { n_r: 2 });
        let rng = Rng::from_seed(3);
        for kind in [ProcessKind::Edm, ProcessKind::Rff] {
            let m = tiny_model(kind);
            let s = seq(6);
            let t = ProcessSpec::of(kind).t_start;
            let c = ic_curve(&m, &s, t, &cfg, &rng).unwrap();
            assert_eq!(c.len(), 5);
            for k in 1..6 {
                assert_eq!(frame_ic(&m, &s, k, t, &cfg, &rng).unwrap(), c.values[k - 1]);
            }
            assert!(frame_ic(&m, &s, 0, t, &cfg, &rng).is_err());
            assert_eq!(c, ic_curve(&m, &s, t, &cfg, &rng).unwrap());
        }
    }

    #[test]
    fn causality() {
        let cfg = SolverConfig::with_tol(1e-3, DivergenceMode::Exact);
        let rng = Rng::from_seed(4);
        let m = tiny_model(ProcessKind::Rff);
        let s = seq(7);
        let base = ic_curve(&m, &s, 0.3, &cfg, &rng).unwrap();
        for j in 1..7 {
            let mut s2 = s.clone();
            s2.frames[j * 2] += 0.5;
            let c = ic_curve(&m, &s2, 0.3, &cfg, &rng).unwrap();
            // frame j is predicted at index j − 1
            assert_eq!(&c.values[..j - 1], &base.values[..j - 1]);
            assert_ne!(c.values[j - 1], base.values[j - 1]);
        }
    }

    /// What the method should return for the Gaussian flow: the point is
    /// carried to `t_end` by the closed-form affine flow and scored under
    /// the prior, plus the log-volume change. For RFF this is the exact
    /// marginal; for EDM it differs from it by the prior mismatch
    /// `N(μ, s0² + 80²)` vs `N(0, 80²)`.
    fn transported_oracle(g: &GaussianFlow, z: &[f64], t: f64, prev: &[f64]) -> f64 {
        let mu = g.mean(prev);
        let (m_t, v_t) = g.marginal(&mu, t);
        let (m_e, v_e) = g.marginal(&mu, g.process.t_end);
        let scale = (v_e / v_t).sqrt();
        let z_end: Vec<f64> = (0..z.len()).map(|i| m_e[i] + scale * (z[i] - m_t[i])).collect();
        crate::numerics::isotropic_gaussian_logpdf(&z_end, g.process.sigma_max).unwrap()
            + z.len() as f64 * scale.ln()
    }

    #[test]
    fn gaussian_sequence_matches_closed_form() {
        let cfg = SolverConfig::with_tol(1e-6, DivergenceMode::Exact);
        let rng = Rng::from_seed(5);
        for (kind, ts) in [(ProcessKind::Edm, [0.002, 0.7, 12.0]), (ProcessKind::Rff, [0.0, 0.4, 0.8])] {
            let g = GaussianFlow::new(kind, 2, 0.8, 0.1, 0.5);
            let s = seq(5);
            for t in ts {
                let c = ic_curve(&g, &s, t, &cfg, &rng).unwrap();
                for k in 1..5 {
                    let z_t = perturbation_mean(s.frame(k), t, &g.process).unwrap();
                    let oracle = bits_per_dim(transported_oracle(&g, &z_t, t, s.frame(k - 1)), 2);
                    assert!((c.values[k - 1] - oracle).abs() < 1e-4, "{kind:?} t={t} k={k}");
                    if kind == ProcessKind::Rff {
                        let exact = bits_per_dim(g.exact_logpdf(&z_t, t, s.frame(k - 1)).unwrap(), 2);
                        assert!((c.values[k - 1] - exact).abs() < 1e-4);
                    }
                }
            }
        }
    }

    #[test]
    fn farther_frames_are_more_surprising() {
        let cfg = SolverConfig::with_tol(1e-6, DivergenceMode::Exact);
        let g = GaussianFlow::new(ProcessKind::Edm, 2, 0.0, 0.0, 0.5);
        let frames = vec![0.0, 0.0, 0.1, 0.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0, 1.0, -1.0];
        let s = LatentSequence::new("m", frames, 2, 10.0).unwrap();
        let c = ic_curve(&g, &s, 0.002, &cfg, &Rng::from_seed(0)).unwrap();
        // distances of frames 1, 3, 5 from the mean are increasing; 2, 4 are at it
        assert!(c.values[1] < c.values[0]);
        assert!(c.values[0] < c.values[2]);
        assert!(c.values[2] < c.values[4]);
    }

    #[test]
    fn masked_means() {
        let c = ICCurve {
            model: "m".into(),
            sequence: "s".into(),
            noise_level: 0.0,
            frame_rate: 10.0,
            values: vec![1.0, 2.0, 3.0],
            solver: None,
            seed: 0,
        };
        assert_eq!(mean_nll(&[&c], &[false; 3]).unwrap(), 2.0);
        assert_eq!(mean_nll(&[&c], &[false, false, true]).unwrap(), 1.5);
        assert!(mean_nll(&[&c], &[true; 3]).is_err());
    }

    #[test]
    fn csv_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let c = ICCurve {
            model: "edm".into(),
            sequence: "s".into(),
            noise_level: 50.0,
            frame_rate: 10.0,
            values: vec![0.5, 0.25],
            solver: Some(SolverConfig::default()),
            seed: 9,
        };
        let path = dir.path().join("ic.csv");
        c.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "frame,time_seconds,ic_bits_per_dim\n1,0.1,0.5\n2,0.2,0.25\n");
        let side: serde_json::Value = serde_json::from_slice(&std::fs::read(path.with_extension("json")).unwrap()).unwrap();
        assert_eq!(side["noise_level"], 50.0);
        assert_eq!(side["seed"], 9);
    }
}
