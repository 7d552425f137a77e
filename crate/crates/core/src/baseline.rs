//! Mixture-density baseline: a diagonal Gaussian mixture over the next frame
//! whose parameters an MLP reads off the causal context.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::neural::{ArchConfig, Encoder, LayoutBuilder, Mlp, ParamStore};
use crate::numerics::Rng;
use crate::process::normalize_frames;
use crate::surprisal::{bits_per_dim, ICCurve};
use crate::synthdata::LatentSequence;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Mixture parameters for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    pub k: usize,
    pub d: usize,
    /// unnormalized log-weights
    pub logits: Vec<f64>,
    /// `k × d`
    pub means: Vec<f64>,
    /// `k × d`, all positive
    pub sigmas: Vec<f64>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl GmmParams {
    /// Head output layout: `[logits (k) | means (k·d) | raw sigmas (k·d)]`.
    /// Means are `scale ⊙ out`, standard deviations `scale ⊙ softplus(raw) + floor`.
    pub fn from_head(out: &[f64], k: usize, scale: &[f64], floor: f64) -> Self {
        let d = scale.len();
        let means = (0..k * d).map(|j| scale[j % d] * out[k + j]).collect();
        let sigmas = (0..k * d)
            .map(|j| scale[j % d] * softplus(out[k + k * d + j]) + floor)
            .collect();
        Self {
            k,
            d,
            logits: out[..k].to_vec(),
            means,
            sigmas,
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        let lse = log_sum_exp(&self.logits);
        self.logits.iter().map(|l| (l - lse).exp()).collect()
    }

    /// `log w_k + log N(z; μ_k, diag σ_k²)` for every component.
    fn joint(&self, z: &[f64]) -> Vec<f64> {
        let lse = log_sum_exp(&self.logits);
        (0..self.k)
            .map(|c| {
                let mut lp = self.logits[c] - lse;
                for i in 0..self.d {
                    let s = self.sigmas[c * self.d + i];
                    let u = (z[i] - self.means[c * self.d + i]) / s;
                    lp -= 0.5 * (LN_2PI + u * u) + s.ln();
                }
                lp
            })
            .collect()
    }
}

/// `log Σ_k w_k Π_i N(z_i; μ_ki, σ_ki²)` with log-sum-exp stabilization.
pub fn gmm_logpdf(params: &GmmParams, z: &[f64]) -> Result<f64> {
    check_dim("frame", params.d, z.len())?;
    let finite = params.logits.iter().chain(&params.means).chain(&params.sigmas).all(|x| x.is_finite());
    if !finite || params.sigmas.iter().any(|s| *s <= 0.0) {
        return Err(invalid("mixture parameters must be finite with positive deviations"));
    }
    Ok(log_sum_exp(&params.joint(z)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GivtMeta {
    pub arch: ArchConfig,
    pub data_scale: Vec<f64>,
}

/// Causal encoder + mixture head.
#[derive(Debug, Clone, PartialEq)]
pub struct GivtModel {
    pub meta: GivtMeta,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub head: Mlp,
}

fn layout(arch: &ArchConfig) -> Result<(LayoutBuilder, Encoder, Mlp)> {
    if arch.gmm_components == 0 || !(arch.sigma_floor > 0.0) {
        return Err(invalid("mixture needs at least one component and a positive floor"));
    }
    let mut b = LayoutBuilder::new();
    let encoder = Encoder::declare(&mut b, "encoder", arch.encoder())?;
    let out = arch.gmm_components * (1 + 2 * arch.dim);
    let mut sizes = vec![arch.width];
    sizes.extend(std::iter::repeat_n(arch.mlp_hidden, arch.mlp_layers.saturating_sub(1)));
    sizes.push(out);
    let head = Mlp::declare(&mut b, "gmm", &sizes, 0.5);
    Ok((b, encoder, head))
}

impl GivtModel {
    pub fn new(arch: ArchConfig, data_scale: Vec<f64>, rng: &Rng) -> Result<Self> {
        check_dim("data_scale", arch.dim, data_scale.len())?;
        let (b, encoder, head) = layout(&arch)?;
        Ok(Self {
            meta: GivtMeta { arch, data_scale },
            store: b.build(rng),
            encoder,
            head,
        })
    }

    pub fn from_parts(meta: GivtMeta, store: ParamStore) -> Result<Self> {
        check_dim("data_scale", meta.arch.dim, meta.data_scale.len())?;
        let (b, encoder, head) = layout(&meta.arch)?;
        if b.len() != store.len() {
            return Err(Error::DimensionMismatch {
                field: "parameter count".into(),
                expected: b.len(),
                found: store.len(),
            });
        }
        Ok(Self {
            meta,
            store,
            encoder,
            head,
        })
    }

    pub fn dim(&self) -> usize {
        self.meta.arch.dim
    }

    fn k(&self) -> usize {
        self.meta.arch.gmm_components
    }

    /// Mixture for frame `k + 1` of every context row `k` of `frames`.
    pub fn mixtures(&self, frames: &[f64]) -> Result<Vec<GmmParams>> {
        let p = &self.store.values;
        let ctx = self.encoder.apply(p, &normalize_frames(frames, &self.meta.data_scale))?;
        let rows = ctx.len() / self.meta.arch.width;
        let tape = self.head.forward_rows(p, &ctx, rows);
        let n_out = self.head.n_out();
        Ok(tape
            .out
            .chunks_exact(n_out)
            .map(|o| GmmParams::from_head(o, self.k(), &self.meta.data_scale, self.meta.arch.sigma_floor))
            .collect())
    }

    /// Mean negative log-likelihood (nats per frame) of every predicted frame
    /// of the windows.
    pub fn train_loss(&self, windows: &[&[f64]]) -> Result<f64> {
        Ok(self.loss_impl(windows, false)?.0)
    }

    pub fn loss_and_grad(&self, windows: &[&[f64]]) -> Result<(f64, Vec<f64>)> {
        self.loss_impl(windows, true)
    }

    fn loss_impl(&self, windows: &[&[f64]], want_grad: bool) -> Result<(f64, Vec<f64>)> {
        let d = self.dim();
        let k = self.k();
        let w = self.meta.arch.width;
        let n_out = self.head.n_out();
        let scale = &self.meta.data_scale;
        let p = &self.store.values;
        let mut grads = if want_grad { vec![0.0; p.len()] } else { Vec::new() };
        let total: usize = windows.iter().map(|x| (x.len() / d).saturating_sub(1)).sum();
        if total == 0 {
            return Err(invalid("training batch has no predicted frames"));
        }
        let mut loss = 0.0;
        for frames in windows {
            if frames.len() % d != 0 {
                return Err(invalid("window length is not a multiple of the frame dimension"));
            }
            let len = frames.len() / d;
            if len < 2 {
                continue;
            }
            if frames.iter().any(|x| !x.is_finite()) {
                return Err(invalid("non-finite frame in training batch"));
            }
            let inp = normalize_frames(&frames[..(len - 1) * d], scale);
            let (ctx, etape) = self.encoder.forward(p, &inp)?;
            let rows = len - 1;
            let htape = self.head.forward_rows(p, &ctx, rows);
            let mut dout = if want_grad { vec![0.0; rows * n_out] } else { Vec::new() };
            for r in 0..rows {
                let out = &htape.out[r * n_out..(r + 1) * n_out];
                let gm = GmmParams::from_head(out, k, scale, self.meta.arch.sigma_floor);
                let z = &frames[(r + 1) * d..(r + 2) * d];
                let joint = gm.joint(z);
                let lse = log_sum_exp(&joint);
                loss -= lse;
                if want_grad {
                    let g = &mut dout[r * n_out..(r + 1) * n_out];
                    let inv = 1.0 / total as f64;
                    let wts = gm.weights();
                    for c in 0..k {
                        let resp = (joint[c] - lse).exp();
                        g[c] = (wts[c] - resp) * inv;
                        for i in 0..d {
                            let j = c * d + i;
                            let s = gm.sigmas[j];
                            let u = (z[i] - gm.means[j]) / s;
                            // −∂/∂μ and −∂/∂σ of the log-density, weighted by the responsibility
                            g[k + j] = -resp * u / s * scale[i] * inv;
                            let raw = out[k + k * d + j];
                            g[k + k * d + j] = -resp * (u * u - 1.0) / s * scale[i] * sigmoid(raw) * inv;
                        }
                    }
                }
            }
            if want_grad {
                let dctx = self.head.backward_rows(p, &mut grads, &htape, &dout);
                debug_assert_eq!(dctx.len(), rows * w);
                self.encoder.backward(p, &mut grads, &etape, &dctx)?;
            }
        }
        let loss = loss / total as f64;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged {
                step: 0,
                reason: "non-finite mixture loss".into(),
            });
        }
        Ok((loss, grads))
    }
}

/// Exact IC of frame `k ≥ 1` under the mixture predicted from frames `< k`.
pub fn givt_frame_ic(model: &GivtModel, seq: &LatentSequence, k: usize) -> Result<f64> {
    check_dim("frame dimension", model.dim(), seq.dim)?;
    if k == 0 || k >= seq.len() {
        return Err(invalid(format!("frame index {k} must lie in 1..{}", seq.len())));
    }
    let mix = model.mixtures(&seq.frames[..k * seq.dim])?;
    Ok(bits_per_dim(gmm_logpdf(&mix[k - 1], seq.frame(k))?, seq.dim))
}

pub fn givt_ic_curve(model: &GivtModel, seq: &LatentSequence) -> Result<ICCurve> {
    check_dim("frame dimension", model.dim(), seq.dim)?;
    let n = seq.len();
    let mix = model.mixtures(&seq.frames[..(n - 1) * seq.dim])?;
    let values = (1..n)
        .map(|k| Ok(bits_per_dim(gmm_logpdf(&mix[k - 1], seq.frame(k))?, seq.dim)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(ICCurve {
        model: "givt".into(),
        sequence: seq.id.clone(),
        noise_level: 0.0,
        frame_rate: seq.frame_rate,
        values,
        solver: None,
        seed: 0,
    })
}
