//! Augmented-ODE likelihood engine.
//!
//! A point `z_t` at noise level `t` is integrated jointly with the running
//! log-density change `δ(s) = −∫_t^s tr(∂f/∂z) ds'` up to the end of the
//! process; then `log p_t(z_t) = log π₁(z(t_end)) − δ(t_end)`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::numerics::{rademacher_from, Rng};
use crate::process::{prior_logpdf, FlowModel, ProcessSpec};

/// A time-dependent vector field `f(z, t)` with vector-Jacobian products.
pub trait VectorField {
    fn dim(&self) -> usize;

    fn linearize<'s>(&'s self, z: &[f64], t: f64) -> Result<Box<dyn Linearization + 's>>;

    fn eval(&self, z: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self.linearize(z, t)?.value().to_vec())
    }
}

/// `f` evaluated at one point, able to contract its Jacobian from the left.
pub trait Linearization {
    fn value(&self) -> &[f64];
    /// `vᵀ ∂f/∂z`
    fn vjp(&self, v: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DivergenceMode {
    Exact,
    Hutchinson { n_r: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub atol: f64,
    pub rtol: f64,
    pub max_steps: usize,
    pub divergence: DivergenceMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::with_tol(1e-3, DivergenceMode::Hutchinson { n_r: 4 })
    }
}

impl SolverConfig {
    pub fn with_tol(tol: f64, divergence: DivergenceMode) -> Self {
        Self {
            atol: tol,
            rtol: tol,
            max_steps: 100_000,
            divergence,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.atol > 0.0 && self.rtol > 0.0) {
            return Err(invalid("solver tolerances must be positive"));
        }
        if self.max_steps == 0 {
            return Err(invalid("max_steps must be positive"));
        }
        if let DivergenceMode::Hutchinson { n_r: 0 } = self.divergence {
            return Err(invalid("hutchinson estimator needs n_r ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
}

/// A frame vector together with its accumulated log-density change.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub z: Vec<f64>,
    pub delta_logp: f64,
}

impl AugmentedState {
    pub fn start(z: &[f64]) -> Self {
        Self {
            z: z.to_vec(),
            delta_logp: 0.0,
        }
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut y = self.z.clone();
        y.push(self.delta_logp);
        y
    }

    fn from_flat(mut y: Vec<f64>) -> Self {
        let delta_logp = y.pop().unwrap();
        Self { z: y, delta_logp }
    }
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// difference between the 5th- and 4th-order weights
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;
const PI_BETA: f64 = 0.04;

fn rms_scaled(v: &[f64], scale: &[f64]) -> f64 {
    (v.iter().zip(scale).map(|(a, s)| (a / s) * (a / s)).sum::<f64>() / v.len() as f64).sqrt()
}

fn check_finite(v: &[f64], t: f64) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalBlowup(format!("non-finite right-hand side at t = {t}")))
    }
}

/// Integrates `dy/dt = rhs(t, y)` from `t0` to `t1` with the Dormand–Prince
/// 5(4) pair and a proportional-integral step controller. The local error of
/// every accepted step satisfies `|err_i| ≤ atol + rtol·max(|y_i|, |y_i'|)`
/// for each component.
pub fn dopri5<F>(mut rhs: F, y0: &[f64], t0: f64, t1: f64, cfg: &SolverConfig) -> Result<(Vec<f64>, SolveStats)>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    cfg.validate()?;
    if t0 == t1 {
        return Err(invalid("integration interval is empty"));
    }
    let n = y0.len();
    let dir = (t1 - t0).signum();
    let span = (t1 - t0).abs();
    let mut stats = SolveStats::default();
    let mut y = y0.to_vec();
    let mut t = t0;

    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    rhs(t, &y, &mut k[0])?;
    stats.rhs_evals += 1;
    check_finite(&k[0], t)?;

    // automatic initial step
    let scale: Vec<f64> = y.iter().map(|v| cfg.atol + cfg.rtol * v.abs()).collect();
    let d0 = rms_scaled(&y, &scale);
    let d1 = rms_scaled(&k[0], &scale);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 }.min(span);
    let y1: Vec<f64> = y.iter().zip(&k[0]).map(|(a, f)| a + dir * h0 * f).collect();
    let mut f1 = vec![0.0; n];
    rhs(t + dir * h0, &y1, &mut f1)?;
    stats.rhs_evals += 1;
    check_finite(&f1, t + dir * h0)?;
    let diff: Vec<f64> = f1.iter().zip(&k[0]).map(|(a, b)| a - b).collect();
    let d2 = rms_scaled(&diff, &scale) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    let mut h = (100.0 * h0).min(h1).min(span);

    let mut err_old: f64 = 1e-4;
    let mut rejected_last = false;
    let mut ytmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];

    loop {
        if stats.accepted + stats.rejected >= cfg.max_steps {
            return Err(Error::NoConvergence(format!(
                "exceeded {} steps at t = {t}",
                cfg.max_steps
            )));
        }
        let remaining = (t1 - t).abs();
        let last = h >= remaining;
        if last {
            h = remaining;
        }
        if h <= 1e-14 * t.abs().max(1.0) {
            return Err(Error::NoConvergence(format!("step size underflow at t = {t}")));
        }
        let hs = dir * h;
        for s in 1..7 {
            ytmp.copy_from_slice(&y);
            for (j, kj) in k.iter().enumerate().take(s) {
                let a = A[s][j];
                if a != 0.0 {
                    for i in 0..n {
                        ytmp[i] += hs * a * kj[i];
                    }
                }
            }
            let ts = if s >= 5 { t + hs } else { t + C[s] * hs };
            let (before, after) = k.split_at_mut(s);
            rhs(ts, &ytmp, &mut after[0])?;
            stats.rhs_evals += 1;
            check_finite(&after[0], ts)?;
            if s == 6 {
                ynew.copy_from_slice(&ytmp);
            }
            let _ = before;
        }
        let mut err: f64 = 0.0;
        for i in 0..n {
            let e: f64 = (0..7).map(|s| E[s] * k[s][i]).sum::<f64>() * hs;
            let sc = cfg.atol + cfg.rtol * y[i].abs().max(ynew[i].abs());
            err = err.max((e / sc).abs());
        }
        if !err.is_finite() {
            return Err(Error::NumericalBlowup(format!("non-finite error estimate at t = {t}")));
        }
        let fac11 = err.powf(0.2 - PI_BETA * 0.75);
        if err <= 1.0 {
            stats.accepted += 1;
            t = if last { t1 } else { t + hs };
            y.copy_from_slice(&ynew);
            let last_k = k[6].clone();
            k[0] = last_k;
            if last {
                return Ok((y, stats));
            }
            let mut fac = fac11 / err_old.powf(PI_BETA) / SAFETY;
            fac = fac.clamp(1.0 / MAX_FACTOR, 1.0 / MIN_FACTOR);
            if rejected_last {
                fac = fac.max(1.0);
            }
            err_old = err.max(1e-4);
            h /= fac;
            rejected_last = false;
        } else {
            stats.rejected += 1;
            h /= (fac11 / SAFETY).min(1.0 / MIN_FACTOR);
            rejected_last = true;
        }
    }
}

/// Integrates an augmented state `(z, δ)` whose right-hand side returns the
/// pair `(dz/dt, dδ/dt)`.
pub fn rk45_integrate<F>(
    mut rhs: F,
    y0: &AugmentedState,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<(AugmentedState, SolveStats)>
where
    F: FnMut(f64, &[f64]) -> Result<(Vec<f64>, f64)>,
{
    let d = y0.z.len();
    let flat = y0.to_flat();
    let (y, stats) = dopri5(
        |t, y, out| {
            let (dz, dd) = rhs(t, &y[..d])?;
            check_dim("rhs output", d, dz.len())?;
            out[..d].copy_from_slice(&dz);
            out[d] = dd;
            Ok(())
        },
        &flat,
        t0,
        t1,
        cfg,
    )?;
    Ok((AugmentedState::from_flat(y), stats))
}

/// Exact Jacobian trace from `d` basis-vector VJPs.
pub fn trace_exact(lin: &dyn Linearization, d: usize) -> Result<f64> {
    let mut e = vec![0.0; d];
    let mut tr = 0.0;
    for i in 0..d {
        e[i] = 1.0;
        tr += lin.vjp(&e)?[i];
        e[i] = 0.0;
    }
    finite_trace(tr)
}

/// Mean of `vᵀ J v` over the given probes.
pub fn trace_with_probes(lin: &dyn Linearization, probes: &[Vec<f64>]) -> Result<f64> {
    let mut acc = 0.0;
    for v in probes {
        let g = lin.vjp(v)?;
        acc += g.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
    finite_trace(acc / probes.len() as f64)
}

fn finite_trace(tr: f64) -> Result<f64> {
    if tr.is_finite() {
        Ok(tr)
    } else {
        Err(Error::NumericalBlowup("non-finite divergence".into()))
    }
}

pub fn draw_probes(d: usize, n_r: usize, rng: &Rng) -> Vec<Vec<f64>> {
    let mut g = rng.generator();
    (0..n_r).map(|_| rademacher_from(&mut g, d)).collect()
}

pub fn divergence_exact(field: &dyn VectorField, z: &[f64], t: f64) -> Result<f64> {
    let lin = field.linearize(z, t)?;
    trace_exact(lin.as_ref(), field.dim())
}

/// Skilling–Hutchinson estimate with `n_r` fresh Rademacher probes.
pub fn divergence_hutchinson(
    field: &dyn VectorField,
    z: &[f64],
    t: f64,
    n_r: usize,
    rng: &Rng,
) -> Result<f64> {
    if n_r == 0 {
        return Err(invalid("n_r must be at least 1"));
    }
    let lin = field.linearize(z, t)?;
    trace_with_probes(lin.as_ref(), &draw_probes(field.dim(), n_r, rng))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikelihoodEstimate {
    /// log-density in nats
    pub loglik: f64,
    pub stats: SolveStats,
}

/// Log-density of the level-`t` marginal of `process` at `z_t`, for an
/// arbitrary field. Hutchinson probes are drawn once from `rng` and reused at
/// every solver stage.
pub fn log_likelihood_field(
    field: &dyn VectorField,
    process: &ProcessSpec,
    z_t: &[f64],
    t: f64,
    cfg: &SolverConfig,
    rng: &Rng,
) -> Result<LikelihoodEstimate> {
    process.check_t(t)?;
    let d = field.dim();
    check_dim("frame", d, z_t.len())?;
    cfg.validate()?;
    if t == process.t_end {
        return Ok(LikelihoodEstimate {
            loglik: prior_logpdf(z_t, process)?,
            stats: SolveStats::default(),
        });
    }
    let probes = match cfg.divergence {
        DivergenceMode::Exact => None,
        DivergenceMode::Hutchinson { n_r } => Some(draw_probes(d, n_r, rng)),
    };
    let (end, stats) = rk45_integrate(
        |s, z| {
            let lin = field.linearize(z, s)?;
            let tr = match &probes {
                None => trace_exact(lin.as_ref(), d)?,
                Some(p) => trace_with_probes(lin.as_ref(), p)?,
            };
            Ok((lin.value().to_vec(), -tr))
        },
        &AugmentedState::start(z_t),
        t,
        process.t_end,
        cfg,
    )?;
    Ok(LikelihoodEstimate {
        loglik: prior_logpdf(&end.z, process)? - end.delta_logp,
        stats,
    })
}

/// Log-likelihood of `z_t` under a conditional flow model given a context.
pub fn log_likelihood_augmented(
    model: &dyn FlowModel,
    z_t: &[f64],
    t: f64,
    ctx: &[f64],
    cfg: &SolverConfig,
    rng: &Rng,
) -> Result<LikelihoodEstimate> {
    let field = model.field(ctx)?;
    log_likelihood_field(field.as_ref(), model.process(), z_t, t, cfg, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{mean, std_dev};

    /// f(z) = A z
    pub(crate) struct LinearField {
        pub a: Vec<f64>,
        pub d: usize,
    }

    struct LinLin {
        value: Vec<f64>,
        a: Vec<f64>,
        d: usize,
    }

    impl Linearization for LinLin {
        fn value(&self) -> &[f64] {
            &self.value
        }
        fn vjp(&self, v: &[f64]) -> Result<Vec<f64>> {
            Ok((0..self.d)
                .map(|j| (0..self.d).map(|i| v[i] * self.a[i * self.d + j]).sum())
                .collect())
        }
    }

    impl VectorField for LinearField {
        fn dim(&self) -> usize {
            self.d
        }
        fn linearize<'s>(&'s self, z: &[f64], _t: f64) -> Result<Box<dyn Linearization + 's>> {
            let value = (0..self.d)
                .map(|i| (0..self.d).map(|j| self.a[i * self.d + j] * z[j]).sum())
                .collect();
            Ok(Box::new(LinLin {
                value,
                a: self.a.clone(),
                d: self.d,
            }))
        }
    }

    struct SinField;
    struct SinLin(Vec<f64>, f64);
    impl Linearization for SinLin {
        fn value(&self) -> &[f64] {
            &self.0
        }
        fn vjp(&self, v: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![v[0] * self.1.cos()])
        }
    }
    impl VectorField for SinField {
        fn dim(&self) -> usize {
            1
        }
        fn linearize<'s>(&'s self, z: &[f64], _t: f64) -> Result<Box<dyn Linearization + 's>> {
            Ok(Box::new(SinLin(vec![z[0].sin()], z[0])))
        }
    }

    fn dense(d: usize, seed: u64) -> LinearField {
        let mut g = Rng::from_seed(seed).generator();
        LinearField {
            a: crate::numerics::standard_normal_from(&mut g, d * d),
            d,
        }
    }

    #[test]
    fn exponential_decay() {
        let cfg = SolverConfig::with_tol(1e-6, DivergenceMode::Exact);
        let (y, stats) = dopri5(
            |_, y, out| {
                out[0] = -y[0];
                Ok(())
            },
            &[1.0],
            0.0,
            1.0,
            &cfg,
        )
        .unwrap();
        assert!((y[0] - (-1.0f64).exp()).abs() < 1e-6);
        assert!(stats.accepted > 0 && stats.rhs_evals >= 6 * stats.accepted);
    }

    #[test]
    fn zero_field_is_identity() {
        let cfg = SolverConfig::with_tol(1e-3, DivergenceMode::Exact);
        let y0 = AugmentedState {
            z: vec![0.3, -1.2],
            delta_logp: 0.5,
        };
        let (y, _) = rk45_integrate(|_, z| Ok((vec![0.0; z.len()], 0.0)), &y0, 2.0, 7.0, &cfg).unwrap();
        assert_eq!(y, y0);
    }

    #[test]
    fn backward_integration_works() {
        let cfg = SolverConfig::with_tol(1e-8, DivergenceMode::Exact);
        let (y, _) = dopri5(
            |_, y, out| {
                out[0] = y[0];
                Ok(())
            },
            &[1.0],
            1.0,
            0.0,
            &cfg,
        )
        .unwrap();
        assert!((y[0] - (-1.0f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn tighter_tolerance_never_hurts_on_exponential() {
        let exact = (-1.0f64).exp();
        let mut prev = f64::INFINITY;
        for tol in [1e-2, 5e-3, 1e-3, 5e-4, 1e-4, 5e-5, 1e-5, 1e-6] {
            let cfg = SolverConfig::with_tol(tol, DivergenceMode::Exact);
            let (y, _) = dopri5(
                |_, y, out| {
                    out[0] = -y[0];
                    Ok(())
                },
                &[1.0],
                0.0,
                1.0,
                &cfg,
            )
            .unwrap();
            let err = (y[0] - exact).abs();
            assert!(err <= prev * 1.0001 + 1e-15, "tol {tol}: {err} > {prev}");
            prev = err;
        }
    }

    #[test]
    fn solver_errors() {
        let cfg = SolverConfig {
            max_steps: 3,
            ..SolverConfig::with_tol(1e-10, DivergenceMode::Exact)
        };
        let r = dopri5(
            |t, _, out| {
                out[0] = (50.0 * t).sin();
                Ok(())
            },
            &[0.0],
            0.0,
            10.0,
            &cfg,
        );
        assert!(matches!(r, Err(Error::NoConvergence(_))));
        let cfg = SolverConfig::with_tol(1e-3, DivergenceMode::Exact);
        let r = dopri5(
            |_, _, out| {
                out[0] = f64::NAN;
                Ok(())
            },
            &[0.0],
            0.0,
            1.0,
            &cfg,
        );
        assert!(matches!(r, Err(Error::NumericalBlowup(_))));
        assert!(dopri5(|_, _, _| Ok(()), &[0.0], 1.0, 1.0, &cfg).is_err());
    }

    #[test]
    fn exact_trace_of_linear_and_sine_fields() {
        let f = dense(5, 1);
        let tr: f64 = (0..5).map(|i| f.a[i * 5 + i]).sum();
        let got = divergence_exact(&f, &[0.1, 0.2, 0.3, 0.4, 0.5], 0.0).unwrap();
        assert!((got - tr).abs() < 1e-12);
        assert!((divergence_exact(&SinField, &[0.0], 0.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_probe_is_exact_for_diagonal_fields() {
        let d = 16;
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            a[i * d + i] = i as f64 * 0.3 - 2.0;
        }
        let tr: f64 = (0..d).map(|i| a[i * d + i]).sum();
        let f = LinearField { a, d };
        for s in 0..50 {
            let est = divergence_hutchinson(&f, &vec![0.0; d], 0.0, 1, &Rng::new(3, s)).unwrap();
            assert!((est - tr).abs() < 1e-12);
        }
    }

    #[test]
    fn hutchinson_is_unbiased_on_dense_field() {
        let f = dense(16, 7);
        let tr: f64 = (0..16).map(|i| f.a[i * 16 + i]).sum();
        let z = vec![0.0; 16];
        let est: Vec<f64> = (0..10_000)
            .map(|s| divergence_hutchinson(&f, &z, 0.0, 1, &Rng::new(5, s)).unwrap())
            .collect();
        let se = std_dev(&est) / (est.len() as f64).sqrt();
        assert!((mean(&est) - tr).abs() <= 3.0 * se, "{} vs {tr} (se {se})", mean(&est));
    }

    #[test]
    fn hutchinson_variance_shrinks_with_probe_count() {
        let f = dense(16, 9);
        let z = vec![0.0; 16];
        let mut prev = f64::INFINITY;
        for n_r in [1, 2, 4, 8, 16] {
            let est: Vec<f64> = (0..2000)
                .map(|s| divergence_hutchinson(&f, &z, 0.0, n_r, &Rng::new(n_r as u64, s)).unwrap())
                .collect();
            let var = std_dev(&est).powi(2);
            assert!(var < prev, "n_r {n_r}: {var} ≥ {prev}");
            prev = var;
        }
    }
}
