//! The two diffusion processes (EDM and rectified flow) as probability-flow
//! ODE fields, their priors and perturbation means, and their training losses.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::neural::{ArchConfig, CondMlp, CondTape, Encoder, LayoutBuilder, ParamStore};
use crate::numerics::{isotropic_gaussian_logpdf, Rng};
use crate::odelik::{Linearization, VectorField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcessKind {
    Edm,
    Rff,
}

impl ProcessKind {
    pub fn name(&self) -> &'static str {
        match self {
            ProcessKind::Edm => "edm",
            ProcessKind::Rff => "rff",
        }
    }
}

/// Time interval and prior of a diffusion process.
///
/// EDM: `s(t) = 1`, `σ(t) = t` on `[0.002, 80]` with prior `N(0, 80² I)`.
/// RFF: `z_t = (1 − t) z₀ + t z₁` on `[0, 1]` with prior `N(0, I)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessSpec {
    pub kind: ProcessKind,
    pub t_start: f64,
    pub t_end: f64,
    /// standard deviation of the isotropic Gaussian prior
    pub sigma_max: f64,
}

impl ProcessSpec {
    pub fn edm() -> Self {
        Self {
            kind: ProcessKind::Edm,
            t_start: 0.002,
            t_end: 80.0,
            sigma_max: 80.0,
        }
    }

    pub fn rff() -> Self {
        Self {
            kind: ProcessKind::Rff,
            t_start: 0.0,
            t_end: 1.0,
            sigma_max: 1.0,
        }
    }

    pub fn of(kind: ProcessKind) -> Self {
        match kind {
            ProcessKind::Edm => Self::edm(),
            ProcessKind::Rff => Self::rff(),
        }
    }

    pub fn check_t(&self, t: f64) -> Result<()> {
        if t >= self.t_start && t <= self.t_end {
            Ok(())
        } else {
            Err(invalid(format!(
                "t = {t} outside the {} interval [{}, {}]",
                self.kind.name(),
                self.t_start,
                self.t_end
            )))
        }
    }
}

/// Mean of the perturbation kernel at level `t` given a clean frame.
pub fn perturbation_mean(z0: &[f64], t: f64, spec: &ProcessSpec) -> Result<Vec<f64>> {
    spec.check_t(t)?;
    Ok(match spec.kind {
        ProcessKind::Edm => z0.to_vec(),
        ProcessKind::Rff => z0.iter().map(|x| (1.0 - t) * x).collect(),
    })
}

pub fn prior_logpdf(z1: &[f64], spec: &ProcessSpec) -> Result<f64> {
    isotropic_gaussian_logpdf(z1, spec.sigma_max)
}

/// Per-coordinate root-mean-square of `T × d` frames, floored at 1e-6.
pub fn data_scale(frames: &[f64], d: usize) -> Result<Vec<f64>> {
    if d == 0 || frames.is_empty() || frames.len() % d != 0 {
        return Err(invalid("frames must be a nonempty multiple of the dimension"));
    }
    let n = (frames.len() / d) as f64;
    let mut sq = vec![0.0; d];
    for row in frames.chunks_exact(d) {
        for (s, x) in sq.iter_mut().zip(row) {
            *s += x * x;
        }
    }
    Ok(sq.into_iter().map(|s| (s / n).sqrt().max(1e-6)).collect())
}

fn check_scale(scale: &[f64], d: usize) -> Result<()> {
    check_dim("data_scale", d, scale.len())?;
    if scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(invalid("data scales must be positive and finite"));
    }
    Ok(())
}

/// Divides each coordinate of `T × d` frames by its data scale.
pub fn normalize_frames(frames: &[f64], scale: &[f64]) -> Vec<f64> {
    frames
        .chunks_exact(scale.len())
        .flat_map(|row| row.iter().zip(scale).map(|(x, s)| x / s))
        .collect()
}

/// EDM denoiser scalings for one coordinate whose second moment is
/// `sigma_data²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdmScalings {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

impl EdmScalings {
    pub fn new(sigma: f64, sigma_data: f64) -> Self {
        let s2 = sigma * sigma + sigma_data * sigma_data;
        Self {
            c_skip: sigma_data * sigma_data / s2,
            c_out: sigma * sigma_data / s2.sqrt(),
            c_in: 1.0 / s2.sqrt(),
            c_noise: sigma.ln() / 4.0,
        }
    }
}

/// Input/output scalings of the rectified-flow velocity head for one
/// coordinate: the input is normalized by the standard deviation of `z_t`,
/// the output by that of `z₁ − z₀`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RffScalings {
    pub c_in: f64,
    pub c_out: f64,
    pub c_noise: f64,
}

impl RffScalings {
    pub fn new(t: f64, sigma_data: f64) -> Self {
        let var = (1.0 - t) * (1.0 - t) * sigma_data * sigma_data + t * t;
        Self {
            c_in: 1.0 / var.sqrt(),
            c_out: (sigma_data * sigma_data + 1.0).sqrt(),
            c_noise: t,
        }
    }
}

/// Log-normal noise-level distribution for denoiser training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdmLossConfig {
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for EdmLossConfig {
    fn default() -> Self {
        Self {
            p_mean: -0.4,
            p_std: 2.0,
        }
    }
}

/// A conditional flow: context summaries of clean frames plus a vector field
/// for the next frame given a context.
pub trait FlowModel: Sync {
    fn process(&self) -> &ProcessSpec;
    fn dim(&self) -> usize;
    /// Row `k` (length [`FlowModel::context_dim`]) summarizes frames `0..=k`
    /// and conditions the prediction of frame `k + 1`.
    fn contexts(&self, frames: &[f64]) -> Result<Vec<f64>>;
    fn context_dim(&self) -> usize;
    fn field<'a>(&'a self, ctx: &'a [f64]) -> Result<Box<dyn VectorField + 'a>>;
    /// Label used in reports.
    fn name(&self) -> String {
        self.process().kind.name().to_string()
    }
}

/// Header data describing a [`ScoreModel`], stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreModelMeta {
    pub arch: ArchConfig,
    pub process: ProcessSpec,
    /// root-mean-square of each coordinate over the training frames
    pub data_scale: Vec<f64>,
    pub edm_loss: EdmLossConfig,
}

/// Autoregressive diffusion model: causal encoder + conditioned head.
///
/// For EDM the head is the preconditioned denoiser network; for RFF it
/// outputs the (scaled) velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel {
    pub meta: ScoreModelMeta,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub head: CondMlp,
}

fn layout(arch: &ArchConfig) -> Result<(LayoutBuilder, Encoder, CondMlp)> {
    let mut b = LayoutBuilder::new();
    let encoder = Encoder::declare(&mut b, "encoder", arch.encoder())?;
    let head = CondMlp::declare(
        &mut b,
        "head",
        arch.dim,
        arch.temb_dim,
        arch.width,
        arch.mlp_hidden,
        arch.mlp_layers,
        0.1,
    );
    Ok((b, encoder, head))
}

impl ScoreModel {
    pub fn new(arch: ArchConfig, kind: ProcessKind, data_scale: Vec<f64>, rng: &Rng) -> Result<Self> {
        check_scale(&data_scale, arch.dim)?;
        let (b, encoder, head) = layout(&arch)?;
        Ok(Self {
            meta: ScoreModelMeta {
                arch,
                process: ProcessSpec::of(kind),
                data_scale,
                edm_loss: EdmLossConfig::default(),
            },
            store: b.build(rng),
            encoder,
            head,
        })
    }

    /// Rebuilds a model from checkpoint metadata and a parameter store.
    pub fn from_parts(meta: ScoreModelMeta, store: ParamStore) -> Result<Self> {
        check_scale(&meta.data_scale, meta.arch.dim)?;
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

    pub fn kind(&self) -> ProcessKind {
        self.meta.process.kind
    }

    fn p(&self) -> &[f64] {
        &self.store.values
    }

    fn encoder_input(&self, frames: &[f64]) -> Vec<f64> {
        normalize_frames(frames, &self.meta.data_scale)
    }

    /// Preconditioned denoiser `D(z; σ, ctx)` (EDM only).
    pub fn denoise(&self, z: &[f64], sigma: f64, ctx: &[f64]) -> Result<Vec<f64>> {
        self.require(ProcessKind::Edm)?;
        self.meta.process.check_t(sigma)?;
        check_dim("frame", self.meta.arch.dim, z.len())?;
        let sc: Vec<EdmScalings> = self.meta.data_scale.iter().map(|&s| EdmScalings::new(sigma, s)).collect();
        let u: Vec<f64> = z.iter().zip(&sc).map(|(x, c)| c.c_in * x).collect();
        let f = self.head.apply(self.p(), &u, sc[0].c_noise, ctx)?;
        Ok((0..z.len()).map(|i| sc[i].c_skip * z[i] + sc[i].c_out * f[i]).collect())
    }

    /// `∇_z log p(z; σ) ≈ (D(z; σ) − z) / σ²`.
    pub fn edm_score(&self, z: &[f64], sigma: f64, ctx: &[f64]) -> Result<Vec<f64>> {
        let d = self.denoise(z, sigma, ctx)?;
        Ok(d.iter().zip(z).map(|(di, zi)| (di - zi) / (sigma * sigma)).collect())
    }

    /// Velocity `v(z, t, ctx)` (RFF only).
    pub fn velocity(&self, z: &[f64], t: f64, ctx: &[f64]) -> Result<Vec<f64>> {
        self.require(ProcessKind::Rff)?;
        self.meta.process.check_t(t)?;
        check_dim("frame", self.meta.arch.dim, z.len())?;
        let sc: Vec<RffScalings> = self.meta.data_scale.iter().map(|&s| RffScalings::new(t, s)).collect();
        let u: Vec<f64> = z.iter().zip(&sc).map(|(x, c)| c.c_in * x).collect();
        let f = self.head.apply(self.p(), &u, t, ctx)?;
        Ok(f.iter().zip(&sc).map(|(x, c)| c.c_out * x).collect())
    }

    /// Right-hand side of the probability-flow ODE, integrated forward from
    /// data towards the prior.
    pub fn ode_rhs(&self, z: &[f64], t: f64, ctx: &[f64]) -> Result<Vec<f64>> {
        match self.kind() {
            ProcessKind::Edm => Ok(self
                .edm_score(z, t, ctx)?
                .iter()
                .map(|s| -t * s)
                .collect()),
            ProcessKind::Rff => self.velocity(z, t, ctx),
        }
    }

    fn require(&self, kind: ProcessKind) -> Result<()> {
        if self.kind() == kind {
            Ok(())
        } else {
            Err(invalid(format!(
                "operation requires a {} model, this is {}",
                kind.name(),
                self.kind().name()
            )))
        }
    }

    /// Diffusion training loss on a batch of frame windows (each `L × dim`),
    /// teacher-forced: the encoder sees clean frames, only targets are noised.
    pub fn train_loss(&self, windows: &[&[f64]], draws: usize, rng: &Rng) -> Result<f64> {
        Ok(self.loss_impl(windows, draws, rng, false)?.0)
    }

    pub fn loss_and_grad(&self, windows: &[&[f64]], draws: usize, rng: &Rng) -> Result<(f64, Vec<f64>)> {
        self.loss_impl(windows, draws, rng, true)
    }

    fn loss_impl(&self, windows: &[&[f64]], draws: usize, rng: &Rng, want_grad: bool) -> Result<(f64, Vec<f64>)> {
        let d = self.meta.arch.dim;
        let w = self.meta.arch.width;
        let n_in = self.head.n_in();
        let draws = draws.max(1);
        let p = self.p();
        let mut grads = if want_grad { vec![0.0; p.len()] } else { Vec::new() };
        let mut gen = rng.generator();

        let total_rows: usize = windows.iter().map(|w| (w.len() / d).saturating_sub(1) * draws).sum();
        if total_rows == 0 {
            return Err(invalid("training batch has no predicted frames"));
        }
        let mut loss_sum = 0.0;

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
            let ctx_frames = self.encoder_input(&frames[..(len - 1) * d]);
            let (ctx, tape) = self.encoder.forward(p, &ctx_frames)?;
            let rows = (len - 1) * draws;
            let mut x = vec![0.0; rows * n_in];
            let mut target = vec![0.0; rows * d];
            let mut z = vec![0.0; d];
            for k in 0..len - 1 {
                let y = &frames[(k + 1) * d..(k + 2) * d];
                let c = &ctx[k * w..(k + 1) * w];
                for m in 0..draws {
                    let r = k * draws + m;
                    let row = &mut x[r * n_in..(r + 1) * n_in];
                    let tgt = &mut target[r * d..(r + 1) * d];
                    let scale = &self.meta.data_scale;
                    match self.kind() {
                        // both losses are unweighted in the network's output space
                        ProcessKind::Edm => {
                            let ln_sigma: f64 = self.meta.edm_loss.p_mean
                                + self.meta.edm_loss.p_std * gen.sample::<f64, _>(StandardNormal);
                            let sigma = ln_sigma.exp();
                            for i in 0..d {
                                let sc = EdmScalings::new(sigma, scale[i]);
                                let zi = y[i] + sigma * gen.sample::<f64, _>(StandardNormal);
                                tgt[i] = (y[i] - sc.c_skip * zi) / sc.c_out;
                                z[i] = sc.c_in * zi;
                            }
                            self.head.write_input(&z, sigma.ln() / 4.0, c, row);
                        }
                        // ‖(z₁ − z₀) − v‖², coordinate i measured in units of c_out,i
                        ProcessKind::Rff => {
                            let t: f64 = gen.random::<f64>();
                            for i in 0..d {
                                let sc = RffScalings::new(t, scale[i]);
                                let z1: f64 = gen.sample(StandardNormal);
                                z[i] = sc.c_in * ((1.0 - t) * y[i] + t * z1);
                                tgt[i] = (z1 - y[i]) / sc.c_out;
                            }
                            self.head.write_input(&z, t, c, row);
                        }
                    }
                }
            }
            let htape = self.head.mlp.forward_rows(p, &x, rows);
            let mut dout = if want_grad { vec![0.0; rows * d] } else { Vec::new() };
            for r in 0..rows {
                for i in 0..d {
                    let j = r * d + i;
                    let diff = htape.out[j] - target[j];
                    loss_sum += diff * diff;
                    if want_grad {
                        dout[j] = 2.0 * diff / total_rows as f64;
                    }
                }
            }
            if want_grad {
                let dx = self.head.mlp.backward_rows(p, &mut grads, &htape, &dout);
                let mut dctx = vec![0.0; (len - 1) * w];
                let off = d + self.head.temb_dim;
                for k in 0..len - 1 {
                    for m in 0..draws {
                        let r = k * draws + m;
                        for (a, b) in dctx[k * w..(k + 1) * w]
                            .iter_mut()
                            .zip(&dx[r * n_in + off..(r + 1) * n_in])
                        {
                            *a += b;
                        }
                    }
                }
                self.encoder.backward(p, &mut grads, &tape, &dctx)?;
            }
        }
        let loss = loss_sum / total_rows as f64;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged {
                step: 0,
                reason: "non-finite loss".into(),
            });
        }
        Ok((loss, grads))
    }
}

/// The ODE field of a [`ScoreModel`] for one fixed context.
pub struct ScoreField<'a> {
    model: &'a ScoreModel,
    ctx: &'a [f64],
}

/// `fᵢ(z) = aᵢ zᵢ + bᵢ Fᵢ(c_in ⊙ z)` at one point.
struct ScoreLin<'a> {
    model: &'a ScoreModel,
    tape: CondTape,
    value: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    c_in: Vec<f64>,
}

impl Linearization for ScoreLin<'_> {
    fn value(&self) -> &[f64] {
        &self.value
    }

    fn vjp(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim("cotangent", self.a.len(), v.len())?;
        let bv: Vec<f64> = v.iter().zip(&self.b).map(|(x, b)| x * b).collect();
        let g = self.model.head.vjp_z(self.model.p(), &self.tape, &bv)?;
        Ok((0..v.len()).map(|j| self.a[j] * v[j] + self.c_in[j] * g[j]).collect())
    }
}

impl VectorField for ScoreField<'_> {
    fn dim(&self) -> usize {
        self.model.meta.arch.dim
    }

    fn linearize<'s>(&'s self, z: &[f64], t: f64) -> Result<Box<dyn Linearization + 's>> {
        let m = self.model;
        m.meta.process.check_t(t)?;
        check_dim("frame", self.dim(), z.len())?;
        let d = z.len();
        let scale = &m.meta.data_scale;
        let (a, b, c_in, c_noise) = match m.kind() {
            // f = −t·(D − z)/t² = ((1 − c_skip) z − c_out F(c_in z))/t
            ProcessKind::Edm => {
                let sc: Vec<EdmScalings> = scale.iter().map(|&s| EdmScalings::new(t, s)).collect();
                (
                    sc.iter().map(|c| (1.0 - c.c_skip) / t).collect::<Vec<_>>(),
                    sc.iter().map(|c| -c.c_out / t).collect::<Vec<_>>(),
                    sc.iter().map(|c| c.c_in).collect::<Vec<_>>(),
                    t.ln() / 4.0,
                )
            }
            ProcessKind::Rff => {
                let sc: Vec<RffScalings> = scale.iter().map(|&s| RffScalings::new(t, s)).collect();
                (
                    vec![0.0; d],
                    sc.iter().map(|c| c.c_out).collect(),
                    sc.iter().map(|c| c.c_in).collect(),
                    t,
                )
            }
        };
        let u: Vec<f64> = z.iter().zip(&c_in).map(|(x, c)| c * x).collect();
        let tape = m.head.linearize(m.p(), &u, c_noise, self.ctx)?;
        let value = (0..d).map(|i| a[i] * z[i] + b[i] * tape.value()[i]).collect();
        Ok(Box::new(ScoreLin {
            model: m,
            tape,
            value,
            a,
            b,
            c_in,
        }))
    }
}

impl FlowModel for ScoreModel {
    fn process(&self) -> &ProcessSpec {
        &self.meta.process
    }

    fn dim(&self) -> usize {
        self.meta.arch.dim
    }

    fn context_dim(&self) -> usize {
        self.meta.arch.width
    }

    fn contexts(&self, frames: &[f64]) -> Result<Vec<f64>> {
        self.encoder.apply(self.p(), &self.encoder_input(frames))
    }

    fn field<'a>(&'a self, ctx: &'a [f64]) -> Result<Box<dyn VectorField + 'a>> {
        check_dim("context", self.context_dim(), ctx.len())?;
        Ok(Box::new(ScoreField { model: self, ctx }))
    }
}

/// Closed-form conditional Gaussian flow.
///
/// The next frame is `N(a·prev + b, s0² I)` given the previous frame, and
/// the context is the previous frame itself. Its EDM and RFF fields are the
/// exact probability-flow fields of that Gaussian, so likelihoods have a
/// closed form at every noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFlow {
    pub process: ProcessSpec,
    pub d: usize,
    pub a: f64,
    pub b: f64,
    pub s0: f64,
}

impl GaussianFlow {
    pub fn new(kind: ProcessKind, d: usize, a: f64, b: f64, s0: f64) -> Self {
        Self {
            process: ProcessSpec::of(kind),
            d,
            a,
            b,
            s0,
        }
    }

    pub fn mean(&self, prev: &[f64]) -> Vec<f64> {
        prev.iter().map(|x| self.a * x + self.b).collect()
    }

    /// Mean and variance of the level-`t` marginal given a data mean `mu`.
    pub fn marginal(&self, mu: &[f64], t: f64) -> (Vec<f64>, f64) {
        match self.process.kind {
            ProcessKind::Edm => (mu.to_vec(), self.s0 * self.s0 + t * t),
            ProcessKind::Rff => (
                mu.iter().map(|m| (1.0 - t) * m).collect(),
                (1.0 - t) * (1.0 - t) * self.s0 * self.s0 + t * t,
            ),
        }
    }

    /// Exact log-density of the level-`t` marginal at `z`.
    pub fn exact_logpdf(&self, z: &[f64], t: f64, prev: &[f64]) -> Result<f64> {
        let (m, var) = self.marginal(&self.mean(prev), t);
        let diff: Vec<f64> = z.iter().zip(&m).map(|(a, b)| a - b).collect();
        isotropic_gaussian_logpdf(&diff, var.sqrt())
    }
}

struct GaussianField<'a> {
    flow: &'a GaussianFlow,
    mu: Vec<f64>,
}

struct DiagLin {
    value: Vec<f64>,
    slope: f64,
}

impl Linearization for DiagLin {
    fn value(&self) -> &[f64] {
        &self.value
    }
    fn vjp(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(v.iter().map(|x| self.slope * x).collect())
    }
}

impl VectorField for GaussianField<'_> {
    fn dim(&self) -> usize {
        self.flow.d
    }

    fn linearize<'s>(&'s self, z: &[f64], t: f64) -> Result<Box<dyn Linearization + 's>> {
        self.flow.process.check_t(t)?;
        check_dim("frame", self.flow.d, z.len())?;
        let s2 = self.flow.s0 * self.flow.s0;
        let (m, var) = self.flow.marginal(&self.mu, t);
        let (slope, shift): (f64, Vec<f64>) = match self.flow.process.kind {
            // −t·score with score = −(z − μ)/(s0² + t²)
            ProcessKind::Edm => (t / var, m.iter().map(|mi| -t / var * mi).collect()),
            // E[z₁ − z₀ | z_t] for a Gaussian source
            ProcessKind::Rff => {
                let slope = (t - (1.0 - t) * s2) / var;
                (slope, m.iter().zip(&self.mu).map(|(mi, mu)| -slope * mi - mu).collect())
            }
        };
        let value = z.iter().zip(&shift).map(|(zi, c)| slope * zi + c).collect();
        Ok(Box::new(DiagLin { value, slope }))
    }
}

impl FlowModel for GaussianFlow {
    fn process(&self) -> &ProcessSpec {
        &self.process
    }

    fn dim(&self) -> usize {
        self.d
    }

    fn context_dim(&self) -> usize {
        self.d
    }

    fn contexts(&self, frames: &[f64]) -> Result<Vec<f64>> {
        if frames.is_empty() || frames.len() % self.d != 0 {
            return Err(invalid("frames must be a nonempty multiple of the dimension"));
        }
        Ok(frames.to_vec())
    }

    fn field<'a>(&'a self, ctx: &'a [f64]) -> Result<Box<dyn VectorField + 'a>> {
        check_dim("context", self.d, ctx.len())?;
        Ok(Box::new(GaussianField {
            flow: self,
            mu: self.mean(ctx),
        }))
    }
}
