use serde::{Deserialize, Serialize};

use super::linalg::{axpy, dot, gemm};
use super::params::{Init, LayoutBuilder};
use crate::error::{check_dim, Result};

/// Sigmoid-weighted linear unit. Smooth, so Jacobian traces of networks built
/// from it are continuous.
#[inline]
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Sinusoidal embedding of a scalar conditioning value.
///
/// Frequencies are geometric between 1 and 32; the first half of the output
/// holds sines, the second half cosines.
pub fn time_embedding(c: f64, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    write_time_embedding(c, &mut out);
    out
}

pub fn write_time_embedding(c: f64, out: &mut [f64]) {
    let half = out.len() / 2;
    for i in 0..half {
        let f = if half > 1 {
            (32f64.ln() * i as f64 / (half - 1) as f64).exp()
        } else {
            1.0
        };
        out[i] = (f * c).sin();
        out[half + i] = (f * c).cos();
    }
}

/// Fully connected layer `y = W x + b`, `W` stored row-major as `n_out × n_in`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub n_in: usize,
    pub n_out: usize,
    w: usize,
    b: usize,
}

impl Linear {
    pub(crate) fn declare(
        builder: &mut LayoutBuilder,
        name: &str,
        n_in: usize,
        n_out: usize,
        gain: f64,
    ) -> Self {
        let w = builder.tensor(
            &format!("{name}.weight"),
            &[n_out, n_in],
            Init::Normal(gain / (n_in as f64).sqrt()),
        );
        let b = builder.tensor(&format!("{name}.bias"), &[n_out], Init::Zeros);
        Self { n_in, n_out, w, b }
    }

    pub fn weight<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.w..self.w + self.n_in * self.n_out]
    }

    pub fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.b..self.b + self.n_out]
    }

    pub fn forward_vec(&self, p: &[f64], x: &[f64], y: &mut [f64]) {
        let w = self.weight(p);
        let b = self.bias(p);
        for o in 0..self.n_out {
            y[o] = b[o] + dot(&w[o * self.n_in..(o + 1) * self.n_in], x);
        }
    }

    pub fn forward_rows(&self, p: &[f64], x: &[f64], rows: usize, y: &mut [f64]) {
        let b = self.bias(p);
        for r in 0..rows {
            y[r * self.n_out..(r + 1) * self.n_out].copy_from_slice(b);
        }
        gemm(
            rows,
            self.n_in,
            self.n_out,
            1.0,
            x,
            self.n_in as isize,
            1,
            self.weight(p),
            1,
            self.n_in as isize,
            1.0,
            y,
        );
    }

    /// Accumulates parameter gradients into `g` and, if requested, writes the
    /// input gradient into `dx` (overwritten).
    #[allow(clippy::too_many_arguments)]
    pub fn backward_rows(
        &self,
        p: &[f64],
        g: &mut [f64],
        x: &[f64],
        dy: &[f64],
        rows: usize,
        dx: Option<&mut [f64]>,
    ) {
        let (n_in, n_out) = (self.n_in, self.n_out);
        gemm(
            n_out,
            rows,
            n_in,
            1.0,
            dy,
            1,
            n_out as isize,
            x,
            n_in as isize,
            1,
            1.0,
            &mut g[self.w..self.w + n_in * n_out],
        );
        let gb = &mut g[self.b..self.b + n_out];
        for r in 0..rows {
            for (gbo, d) in gb.iter_mut().zip(&dy[r * n_out..(r + 1) * n_out]) {
                *gbo += d;
            }
        }
        if let Some(dx) = dx {
            gemm(
                rows,
                n_out,
                n_in,
                1.0,
                dy,
                n_out as isize,
                1,
                self.weight(p),
                n_in as isize,
                1,
                0.0,
                dx,
            );
        }
    }

    /// `dx = Wᵀ dy` restricted to the first `dx.len()` input coordinates.
    pub fn vjp_vec(&self, p: &[f64], dy: &[f64], dx: &mut [f64]) {
        let w = self.weight(p);
        let m = dx.len();
        dx.fill(0.0);
        for o in 0..self.n_out {
            axpy(dy[o], &w[o * self.n_in..o * self.n_in + m], dx);
        }
    }
}

/// Multi-layer perceptron with SiLU between layers and a linear output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Activations of a single-vector forward pass.
#[derive(Debug, Clone)]
pub struct MlpTape {
    /// pre-activations of the hidden layers
    pres: Vec<Vec<f64>>,
    out: Vec<f64>,
}

impl MlpTape {
    pub fn output(&self) -> &[f64] {
        &self.out
    }
}

/// Activations of a batched forward pass (row-major, one row per sample).
#[derive(Debug, Clone)]
pub struct MlpBatchTape {
    pub rows: usize,
    acts: Vec<Vec<f64>>,
    pres: Vec<Vec<f64>>,
    pub out: Vec<f64>,
}

impl Mlp {
    /// `sizes = [n_in, h1, ..., n_out]`. The last layer is scaled by `out_gain`.
    pub(crate) fn declare(
        builder: &mut LayoutBuilder,
        name: &str,
        sizes: &[usize],
        out_gain: f64,
    ) -> Self {
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let gain = if l + 1 == n { out_gain } else { 1.0 };
                Linear::declare(builder, &format!("{name}.{l}"), sizes[l], sizes[l + 1], gain)
            })
            .collect();
        Self { layers }
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().unwrap().n_out
    }

    pub fn tape_vec(&self, p: &[f64], x: &[f64]) -> MlpTape {
        let mut pres = Vec::with_capacity(self.layers.len() - 1);
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut y = vec![0.0; layer.n_out];
            layer.forward_vec(p, &cur, &mut y);
            if l < last {
                cur = y.iter().map(|&h| silu(h)).collect();
                pres.push(y);
            } else {
                cur = y;
            }
        }
        MlpTape {
            pres,
            out: cur,
        }
    }

    pub fn forward_vec(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        self.tape_vec(p, x).out
    }

    /// Gradient of `dyᵀ·mlp(x)` with respect to the first `n_prefix` inputs.
    pub fn vjp_input(&self, p: &[f64], tape: &MlpTape, dy: &[f64], n_prefix: usize) -> Vec<f64> {
        let mut grad = dy.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let width = if l == 0 { n_prefix } else { layer.n_in };
            let mut dx = vec![0.0; width];
            layer.vjp_vec(p, &grad, &mut dx);
            if l > 0 {
                for (d, &h) in dx.iter_mut().zip(&tape.pres[l - 1]) {
                    *d *= silu_grad(h);
                }
            }
            grad = dx;
        }
        grad
    }

    pub fn forward_rows(&self, p: &[f64], x: &[f64], rows: usize) -> MlpBatchTape {
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(last);
        let mut cur = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut y = vec![0.0; rows * layer.n_out];
            layer.forward_rows(p, &cur, rows, &mut y);
            acts.push(std::mem::take(&mut cur));
            if l < last {
                cur = y.iter().map(|&h| silu(h)).collect();
                pres.push(y);
            } else {
                cur = y;
            }
        }
        MlpBatchTape {
            rows,
            acts,
            pres,
            out: cur,
        }
    }

    /// Accumulates parameter gradients and returns the input gradient rows.
    pub fn backward_rows(&self, p: &[f64], g: &mut [f64], tape: &MlpBatchTape, dy: &[f64]) -> Vec<f64> {
        let rows = tape.rows;
        let mut grad = dy.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let mut dx = vec![0.0; rows * layer.n_in];
            layer.backward_rows(p, g, &tape.acts[l], &grad, rows, Some(&mut dx));
            if l > 0 {
                for (d, &h) in dx.iter_mut().zip(&tape.pres[l - 1]) {
                    *d *= silu_grad(h);
                }
            }
            grad = dx;
        }
        grad
    }
}

/// MLP conditioned on a noise time and a context vector.
///
/// Input layout: `[z (d), time embedding (temb_dim), ctx (ctx_dim)]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CondMlp {
    pub mlp: Mlp,
    pub d: usize,
    pub temb_dim: usize,
    pub ctx_dim: usize,
}

/// Single-point linearization of a [`CondMlp`] in its `z` input.
#[derive(Debug, Clone)]
pub struct CondTape {
    tape: MlpTape,
}

impl CondTape {
    pub fn value(&self) -> &[f64] {
        self.tape.output()
    }
}

impl CondMlp {
    pub(crate) fn declare(
        builder: &mut LayoutBuilder,
        name: &str,
        d: usize,
        temb_dim: usize,
        ctx_dim: usize,
        hidden: usize,
        layers: usize,
        out_gain: f64,
    ) -> Self {
        let mut sizes = vec![d + temb_dim + ctx_dim];
        sizes.extend(std::iter::repeat_n(hidden, layers.saturating_sub(1)));
        sizes.push(d);
        Self {
            mlp: Mlp::declare(builder, name, &sizes, out_gain),
            d,
            temb_dim,
            ctx_dim,
        }
    }

    pub fn n_in(&self) -> usize {
        self.d + self.temb_dim + self.ctx_dim
    }

    pub fn write_input(&self, z: &[f64], c_noise: f64, ctx: &[f64], out: &mut [f64]) {
        out[..self.d].copy_from_slice(z);
        write_time_embedding(c_noise, &mut out[self.d..self.d + self.temb_dim]);
        out[self.d + self.temb_dim..].copy_from_slice(ctx);
    }

    fn check(&self, z: &[f64], ctx: &[f64]) -> Result<()> {
        check_dim("head input z", self.d, z.len())?;
        check_dim("head context", self.ctx_dim, ctx.len())
    }

    pub fn linearize(&self, p: &[f64], z: &[f64], c_noise: f64, ctx: &[f64]) -> Result<CondTape> {
        self.check(z, ctx)?;
        let mut x = vec![0.0; self.n_in()];
        self.write_input(z, c_noise, ctx, &mut x);
        Ok(CondTape {
            tape: self.mlp.tape_vec(p, &x),
        })
    }

    /// `vᵀ ∂f/∂z` at a linearization point.
    pub fn vjp_z(&self, p: &[f64], tape: &CondTape, v: &[f64]) -> Result<Vec<f64>> {
        check_dim("cotangent", self.d, v.len())?;
        Ok(self.mlp.vjp_input(p, &tape.tape, v, self.d))
    }

    pub fn apply(&self, p: &[f64], z: &[f64], c_noise: f64, ctx: &[f64]) -> Result<Vec<f64>> {
        Ok(self.linearize(p, z, c_noise, ctx)?.tape.out)
    }

    pub fn vjp(&self, p: &[f64], z: &[f64], c_noise: f64, ctx: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let tape = self.linearize(p, z, c_noise, ctx)?;
        self.vjp_z(p, &tape, v)
    }
}
