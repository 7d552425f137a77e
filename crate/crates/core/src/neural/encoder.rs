//! Causal pre-LayerNorm transformer that summarizes past frames into
//! context vectors.

use serde::{Deserialize, Serialize};

use super::linalg::{axpy, dot};
use super::mlp::{silu, silu_grad, Linear};
use super::params::{Init, LayoutBuilder};
use crate::error::{check_dim, invalid, Result};

const LN_EPS: f64 = 1e-5;
const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_in: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub max_seq: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_in: 16,
            width: 64,
            heads: 4,
            blocks: 2,
            max_seq: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct LayerNorm {
    width: usize,
    gain: usize,
    bias: usize,
}

impl LayerNorm {
    fn declare(b: &mut LayoutBuilder, name: &str, width: usize) -> Self {
        let gain = b.tensor(&format!("{name}.gain"), &[width], Init::Ones);
        let bias = b.tensor(&format!("{name}.bias"), &[width], Init::Zeros);
        Self { width, gain, bias }
    }

    fn forward(&self, p: &[f64], x: &[f64], rows: usize, y: &mut [f64]) -> LnCache {
        let w = self.width;
        let g = &p[self.gain..self.gain + w];
        let b = &p[self.bias..self.bias + w];
        let mut xhat = vec![0.0; rows * w];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * w..(r + 1) * w];
            let mu = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / w as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for i in 0..w {
                let xh = (row[i] - mu) * rs;
                xhat[r * w + i] = xh;
                y[r * w + i] = g[i] * xh + b[i];
            }
        }
        LnCache { xhat, rstd }
    }

    /// Accumulates gain/bias gradients and adds the input gradient into `dx`.
    fn backward(&self, p: &[f64], grads: &mut [f64], cache: &LnCache, dy: &[f64], dx: &mut [f64]) {
        let w = self.width;
        let rows = cache.rstd.len();
        let mut dxhat = vec![0.0; w];
        for r in 0..rows {
            let xh = &cache.xhat[r * w..(r + 1) * w];
            let d = &dy[r * w..(r + 1) * w];
            for i in 0..w {
                grads[self.gain + i] += d[i] * xh[i];
                grads[self.bias + i] += d[i];
                dxhat[i] = d[i] * p[self.gain + i];
            }
            let m1 = dxhat.iter().sum::<f64>() / w as f64;
            let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / w as f64;
            let rs = cache.rstd[r];
            for i in 0..w {
                dx[r * w + i] += rs * (dxhat[i] - m1 - xh[i] * m2);
            }
        }
    }
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    out: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
struct BlockTape {
    ln1: LnCache,
    a: Vec<f64>,
    /// rotated queries, rotated keys, values: each rows × width
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// heads × rows × rows, lower triangle used
    probs: Vec<f64>,
    attn: Vec<f64>,
    ln2: LnCache,
    b: Vec<f64>,
    h: Vec<f64>,
    act: Vec<f64>,
}

/// Layout of the encoder parameters inside a model's parameter store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    input: Linear,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct EncoderTape {
    rows: usize,
    x_in: Vec<f64>,
    blocks: Vec<BlockTape>,
    lnf: LnCache,
}

struct Rope {
    cos: Vec<f64>,
    sin: Vec<f64>,
    half: usize,
}

impl Rope {
    fn new(rows: usize, head_dim: usize) -> Self {
        let half = head_dim / 2;
        let mut cos = vec![0.0; rows * half];
        let mut sin = vec![0.0; rows * half];
        for pos in 0..rows {
            for i in 0..half {
                let theta = pos as f64 * ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
                cos[pos * half + i] = theta.cos();
                sin[pos * half + i] = theta.sin();
            }
        }
        Self { cos, sin, half }
    }

    /// Rotates consecutive pairs of one head slice at position `pos`.
    fn apply(&self, pos: usize, x: &mut [f64], inverse: bool) {
        for i in 0..self.half {
            let c = self.cos[pos * self.half + i];
            let s = if inverse {
                -self.sin[pos * self.half + i]
            } else {
                self.sin[pos * self.half + i]
            };
            let (x0, x1) = (x[2 * i], x[2 * i + 1]);
            x[2 * i] = x0 * c - x1 * s;
            x[2 * i + 1] = x0 * s + x1 * c;
        }
    }
}

impl Encoder {
    pub(crate) fn declare(builder: &mut LayoutBuilder, name: &str, cfg: EncoderConfig) -> Result<Self> {
        if cfg.width == 0 || cfg.heads == 0 || cfg.width % cfg.heads != 0 {
            return Err(invalid("encoder width must be a positive multiple of heads"));
        }
        if (cfg.width / cfg.heads) % 2 != 0 {
            return Err(invalid("encoder head dimension must be even for rotary embeddings"));
        }
        let w = cfg.width;
        let residual_gain = 1.0 / ((2 * cfg.blocks.max(1)) as f64).sqrt();
        let input = Linear::declare(builder, &format!("{name}.input"), cfg.d_in, w, 1.0);
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let n = format!("{name}.block{i}");
                Block {
                    ln1: LayerNorm::declare(builder, &format!("{n}.ln1"), w),
                    qkv: Linear::declare(builder, &format!("{n}.qkv"), w, 3 * w, 1.0),
                    out: Linear::declare(builder, &format!("{n}.out"), w, w, residual_gain),
                    ln2: LayerNorm::declare(builder, &format!("{n}.ln2"), w),
                    ff1: Linear::declare(builder, &format!("{n}.ff1"), w, 4 * w, 1.0),
                    ff2: Linear::declare(builder, &format!("{n}.ff2"), 4 * w, w, residual_gain),
                }
            })
            .collect();
        let ln_f = LayerNorm::declare(builder, &format!("{name}.ln_f"), w);
        Ok(Self {
            cfg,
            input,
            blocks,
            ln_f,
        })
    }

    pub fn width(&self) -> usize {
        self.cfg.width
    }

    fn check(&self, frames: &[f64]) -> Result<usize> {
        let d = self.cfg.d_in;
        if frames.is_empty() {
            return Err(invalid("encoder input is empty"));
        }
        if frames.len() % d != 0 {
            return Err(invalid(format!(
                "encoder input length {} is not a multiple of frame dim {d}",
                frames.len()
            )));
        }
        let rows = frames.len() / d;
        if rows > self.cfg.max_seq {
            return Err(invalid(format!(
                "sequence length {rows} exceeds encoder maximum {}",
                self.cfg.max_seq
            )));
        }
        Ok(rows)
    }

    /// Context vectors for every position (`rows × width`, row-major).
    /// Row `k` depends only on frames `0..=k`.
    pub fn apply(&self, p: &[f64], frames: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(p, frames)?.0)
    }

    pub fn forward(&self, p: &[f64], frames: &[f64]) -> Result<(Vec<f64>, EncoderTape)> {
        let rows = self.check(frames)?;
        let w = self.cfg.width;
        let heads = self.cfg.heads;
        let hd = w / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let rope = Rope::new(rows, hd);

        let mut x = vec![0.0; rows * w];
        self.input.forward_rows(p, frames, rows, &mut x);
        let mut tapes = Vec::with_capacity(self.blocks.len());

        for blk in &self.blocks {
            let mut a = vec![0.0; rows * w];
            let ln1 = blk.ln1.forward(p, &x, rows, &mut a);
            let mut qkv = vec![0.0; rows * 3 * w];
            blk.qkv.forward_rows(p, &a, rows, &mut qkv);
            let mut q = vec![0.0; rows * w];
            let mut k = vec![0.0; rows * w];
            let mut v = vec![0.0; rows * w];
            for r in 0..rows {
                q[r * w..(r + 1) * w].copy_from_slice(&qkv[r * 3 * w..r * 3 * w + w]);
                k[r * w..(r + 1) * w].copy_from_slice(&qkv[r * 3 * w + w..r * 3 * w + 2 * w]);
                v[r * w..(r + 1) * w].copy_from_slice(&qkv[r * 3 * w + 2 * w..(r + 1) * 3 * w]);
                for h in 0..heads {
                    rope.apply(r, &mut q[r * w + h * hd..r * w + (h + 1) * hd], false);
                    rope.apply(r, &mut k[r * w + h * hd..r * w + (h + 1) * hd], false);
                }
            }
            let mut probs = vec![0.0; heads * rows * rows];
            let mut attn = vec![0.0; rows * w];
            for h in 0..heads {
                for i in 0..rows {
                    let qi = &q[i * w + h * hd..i * w + (h + 1) * hd];
                    let prow = &mut probs[(h * rows + i) * rows..(h * rows + i) * rows + i + 1];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let s = scale * dot(qi, &k[j * w + h * hd..j * w + (h + 1) * hd]);
                        prow[j] = s;
                        mx = mx.max(s);
                    }
                    let mut z = 0.0;
                    for pj in prow.iter_mut() {
                        *pj = (*pj - mx).exp();
                        z += *pj;
                    }
                    let out = &mut attn[i * w + h * hd..i * w + (h + 1) * hd];
                    for j in 0..=i {
                        prow[j] /= z;
                        axpy(prow[j], &v[j * w + h * hd..j * w + (h + 1) * hd], out);
                    }
                }
            }
            let mut proj = vec![0.0; rows * w];
            blk.out.forward_rows(p, &attn, rows, &mut proj);
            for (xi, pi) in x.iter_mut().zip(&proj) {
                *xi += pi;
            }

            let mut b = vec![0.0; rows * w];
            let ln2 = blk.ln2.forward(p, &x, rows, &mut b);
            let mut hpre = vec![0.0; rows * 4 * w];
            blk.ff1.forward_rows(p, &b, rows, &mut hpre);
            let act: Vec<f64> = hpre.iter().map(|&h| silu(h)).collect();
            let mut ff = vec![0.0; rows * w];
            blk.ff2.forward_rows(p, &act, rows, &mut ff);
            for (xi, fi) in x.iter_mut().zip(&ff) {
                *xi += fi;
            }
            tapes.push(BlockTape {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                attn,
                ln2,
                b,
                h: hpre,
                act,
            });
        }

        let mut out = vec![0.0; rows * w];
        let lnf = self.ln_f.forward(p, &x, rows, &mut out);
        Ok((
            out,
            EncoderTape {
                rows,
                x_in: frames.to_vec(),
                blocks: tapes,
                lnf,
            },
        ))
    }

    /// Accumulates parameter gradients of `Σ d_out · output` into `grads`.
    pub fn backward(&self, p: &[f64], grads: &mut [f64], tape: &EncoderTape, d_out: &[f64]) -> Result<()> {
        let rows = tape.rows;
        let w = self.cfg.width;
        check_dim("encoder output gradient", rows * w, d_out.len())?;
        let heads = self.cfg.heads;
        let hd = w / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let rope = Rope::new(rows, hd);

        let mut dx = vec![0.0; rows * w];
        self.ln_f.backward(p, grads, &tape.lnf, d_out, &mut dx);

        for (blk, bt) in self.blocks.iter().zip(&tape.blocks).rev() {
            // feed-forward branch
            let mut dact = vec![0.0; rows * 4 * w];
            blk.ff2.backward_rows(p, grads, &bt.act, &dx, rows, Some(&mut dact));
            for (d, &h) in dact.iter_mut().zip(&bt.h) {
                *d *= silu_grad(h);
            }
            let mut db = vec![0.0; rows * w];
            blk.ff1.backward_rows(p, grads, &bt.b, &dact, rows, Some(&mut db));
            blk.ln2.backward(p, grads, &bt.ln2, &db, &mut dx);

            // attention branch
            let mut dattn = vec![0.0; rows * w];
            blk.out.backward_rows(p, grads, &bt.attn, &dx, rows, Some(&mut dattn));
            let mut dq = vec![0.0; rows * w];
            let mut dk = vec![0.0; rows * w];
            let mut dv = vec![0.0; rows * w];
            let mut dp = vec![0.0; rows];
            for h in 0..heads {
                let sl = |r: usize| r * w + h * hd..r * w + (h + 1) * hd;
                for i in 0..rows {
                    let prow = &bt.probs[(h * rows + i) * rows..(h * rows + i) * rows + i + 1];
                    let doi = &dattn[sl(i)];
                    let mut acc = 0.0;
                    for j in 0..=i {
                        dp[j] = dot(doi, &bt.v[sl(j)]);
                        acc += prow[j] * dp[j];
                        axpy(prow[j], doi, &mut dv[sl(j)]);
                    }
                    for j in 0..=i {
                        let ds = prow[j] * (dp[j] - acc) * scale;
                        if ds != 0.0 {
                            axpy(ds, &bt.k[sl(j)], &mut dq[sl(i)]);
                            axpy(ds, &bt.q[sl(i)], &mut dk[sl(j)]);
                        }
                    }
                }
            }
            let mut dqkv = vec![0.0; rows * 3 * w];
            for r in 0..rows {
                for h in 0..heads {
                    rope.apply(r, &mut dq[r * w + h * hd..r * w + (h + 1) * hd], true);
                    rope.apply(r, &mut dk[r * w + h * hd..r * w + (h + 1) * hd], true);
                }
                dqkv[r * 3 * w..r * 3 * w + w].copy_from_slice(&dq[r * w..(r + 1) * w]);
                dqkv[r * 3 * w + w..r * 3 * w + 2 * w].copy_from_slice(&dk[r * w..(r + 1) * w]);
                dqkv[r * 3 * w + 2 * w..(r + 1) * 3 * w].copy_from_slice(&dv[r * w..(r + 1) * w]);
            }
            let mut da = vec![0.0; rows * w];
            blk.qkv.backward_rows(p, grads, &bt.a, &dqkv, rows, Some(&mut da));
            blk.ln1.backward(p, grads, &bt.ln1, &da, &mut dx);
        }

        self.input.backward_rows(p, grads, &tape.x_in, &dx, rows, None);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{standard_normal_from, Rng};

    fn tiny(seed: u64) -> (Encoder, Vec<f64>) {
        let cfg = EncoderConfig {
            d_in: 3,
            width: 8,
            heads: 2,
            blocks: 2,
            max_seq: 300,
        };
        let mut b = LayoutBuilder::new();
        let enc = Encoder::declare(&mut b, "enc", cfg).unwrap();
        let store = b.build(&Rng::from_seed(seed));
        (enc, store.values)
    }

    #[test]
    fn output_shape_contract() {
        let (enc, p) = tiny(0);
        let mut g = Rng::from_seed(1).generator();
        for &t in &[1usize, 2, 256] {
            let frames = standard_normal_from(&mut g, t * 3);
            let out = enc.apply(&p, &frames).unwrap();
            assert_eq!(out.len(), t * 8);
        }
        assert!(enc.apply(&p, &[]).is_err());
    }

    #[test]
    fn causality_is_exact() {
        let (enc, p) = tiny(2);
        let mut g = Rng::from_seed(3).generator();
        let t = 12;
        let frames = standard_normal_from(&mut g, t * 3);
        let base = enc.apply(&p, &frames).unwrap();
        for k in 0..t {
            let mut pert = frames.clone();
            pert[k * 3 + 1] += 0.75;
            let out = enc.apply(&p, &pert).unwrap();
            assert_eq!(&out[..k * 8], &base[..k * 8], "position < {k} changed");
            assert_ne!(&out[k * 8..(k + 1) * 8], &base[k * 8..(k + 1) * 8]);
        }
    }

    #[test]
    fn parameter_gradients_match_central_differences() {
        let (enc, p) = tiny(5);
        let mut g = Rng::from_seed(6).generator();
        let t = 5;
        let frames = standard_normal_from(&mut g, t * 3);
        let dout = standard_normal_from(&mut g, t * 8);
        let objective = |params: &[f64]| -> f64 {
            let o = enc.apply(params, &frames).unwrap();
            o.iter().zip(&dout).map(|(a, b)| a * b).sum()
        };
        let (_, tape) = enc.forward(&p, &frames).unwrap();
        let mut grads = vec![0.0; p.len()];
        enc.backward(&p, &mut grads, &tape, &dout).unwrap();
        let h = 1e-4;
        let mut checked = 0;
        for i in (0..p.len()).step_by(7) {
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp[i] += h;
            pm[i] -= h;
            let fd = (objective(&pp) - objective(&pm)) / (2.0 * h);
            let err = (fd - grads[i]).abs();
            assert!(
                err <= 1e-3 * grads[i].abs().max(1e-3),
                "param {i}: fd {fd} analytic {}",
                grads[i]
            );
            checked += 1;
        }
        assert!(checked > 50);
    }
}
