//! Closed-form checks of the likelihood engine.

use adm_surprisal::numerics::{standard_normal_from, Rng};
use adm_surprisal::odelik::{
    log_likelihood_augmented, log_likelihood_field, DivergenceMode, Linearization, SolverConfig, VectorField,
};
use adm_surprisal::process::{prior_logpdf, GaussianFlow, ProcessKind, ProcessSpec};
use adm_surprisal::Result;

fn points(d: usize, n: usize, scale: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut g = Rng::from_seed(seed).generator();
    (0..n)
        .map(|_| standard_normal_from(&mut g, d).into_iter().map(|x| scale * x).collect())
        .collect()
}

#[test]
fn edm_gaussian_data_level_matches_closed_form() {
    let cfg = SolverConfig::with_tol(1e-5, DivergenceMode::Exact);
    for d in [1, 4, 16] {
        let flow = GaussianFlow::new(ProcessKind::Edm, d, 0.0, 0.0, 0.5);
        let prev = vec![0.0; d];
        for (i, z) in points(d, 100, 0.5, d as u64).iter().enumerate() {
            let t = flow.process.t_start;
            let est = log_likelihood_augmented(&flow, z, t, &prev, &cfg, &Rng::from_seed(i as u64)).unwrap();
            let exact = flow.exact_logpdf(z, t, &prev).unwrap();
            assert!((est.loglik - exact).abs() / d as f64 <= 1e-3, "d={d}: {} vs {exact}", est.loglik);
        }
    }
}

#[test]
fn rff_gaussian_matches_closed_form_along_the_continuum() {
    let cfg = SolverConfig::with_tol(1e-6, DivergenceMode::Exact);
    let d = 4;
    let flow = GaussianFlow::new(ProcessKind::Rff, d, 0.7, -0.2, 0.3);
    let prev = vec![1.0, -2.0, 0.5, 0.0];
    for t in [0.0, 0.1, 0.5, 0.9] {
        for (i, z) in points(d, 20, 1.0, 40).iter().enumerate() {
            let est = log_likelihood_augmented(&flow, z, t, &prev, &cfg, &Rng::from_seed(i as u64)).unwrap();
            let exact = flow.exact_logpdf(z, t, &prev).unwrap();
            assert!((est.loglik - exact).abs() < 1e-4, "t={t}: {} vs {exact}", est.loglik);
        }
    }
}

#[test]
fn hutchinson_mode_is_exact_for_isotropic_gaussian_fields() {
    // the Gaussian flow's Jacobian is a multiple of the identity
    let flow = GaussianFlow::new(ProcessKind::Edm, 16, 0.0, 0.0, 0.5);
    let prev = vec![0.0; 16];
    let z = &points(16, 1, 0.5, 3)[0];
    let exact = SolverConfig::with_tol(1e-6, DivergenceMode::Exact);
    let hutch = SolverConfig::with_tol(1e-6, DivergenceMode::Hutchinson { n_r: 1 });
    let a = log_likelihood_augmented(&flow, z, 0.002, &prev, &exact, &Rng::from_seed(0)).unwrap();
    let b = log_likelihood_augmented(&flow, z, 0.002, &prev, &hutch, &Rng::from_seed(7)).unwrap();
    assert!((a.loglik - b.loglik).abs() < 1e-6);
}

/// Rotation in two planes; its Jacobian is skew-symmetric.
struct Rotation;

struct RotationAt(Vec<f64>);

impl Linearization for RotationAt {
    fn value(&self) -> &[f64] {
        &self.0
    }
    fn vjp(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![v[1], -v[0], -2.0 * v[3], 2.0 * v[2]])
    }
}

impl VectorField for Rotation {
    fn dim(&self) -> usize {
        4
    }
    fn linearize<'s>(&'s self, z: &[f64], _t: f64) -> Result<Box<dyn Linearization + 's>> {
        Ok(Box::new(RotationAt(vec![-z[1], z[0], 2.0 * z[3], -2.0 * z[2]])))
    }
}

#[test]
fn divergence_free_field_leaves_the_density_unchanged() {
    for spec in [ProcessSpec::edm(), ProcessSpec::rff()] {
        for (i, z) in points(4, 10, 2.0, 5).iter().enumerate() {
            for mode in [DivergenceMode::Exact, DivergenceMode::Hutchinson { n_r: 3 }] {
                let cfg = SolverConfig::with_tol(1e-8, mode);
                let est = log_likelihood_field(&Rotation, &spec, z, spec.t_start, &cfg, &Rng::from_seed(i as u64)).unwrap();
                // the rotation preserves the norm, so the prior density is unchanged
                let expect = prior_logpdf(z, &spec).unwrap();
                assert!((est.loglik - expect).abs() < 1e-5, "{:?}: {} vs {expect}", spec.kind, est.loglik);
            }
        }
    }
}
