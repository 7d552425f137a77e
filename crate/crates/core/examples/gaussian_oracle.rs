//! Likelihood of a closed-form Gaussian flow at several noise levels,
//! against the exact log-density.
//!
//!     cargo run --release --example gaussian_oracle

use adm_surprisal::numerics::{standard_normal_from, Rng};
use adm_surprisal::odelik::{log_likelihood_augmented, DivergenceMode, SolverConfig};
use adm_surprisal::process::{GaussianFlow, ProcessKind};

fn main() -> adm_surprisal::Result<()> {
    let d = 4;
    let prev = vec![0.5, -1.0, 2.0, 0.0];
    let cfg = SolverConfig::with_tol(1e-6, DivergenceMode::Exact);
    for (kind, levels) in [
        (ProcessKind::Edm, vec![0.002, 1.0, 10.0, 60.0]),
        (ProcessKind::Rff, vec![0.0, 0.25, 0.5, 0.9]),
    ] {
        let flow = GaussianFlow::new(kind, d, 0.8, 0.1, 0.5);
        println!("{} (next frame ~ N(0.8·prev + 0.1, 0.5²))", kind.name());
        let mut g = Rng::from_seed(1).generator();
        for t in levels {
            let (mu, var) = flow.marginal(&flow.mean(&prev), t);
            let z: Vec<f64> = standard_normal_from(&mut g, d)
                .iter()
                .zip(&mu)
                .map(|(e, m)| m + var.sqrt() * e)
                .collect();
            let est = log_likelihood_augmented(&flow, &z, t, &prev, &cfg, &Rng::from_seed(0))?;
            let exact = flow.exact_logpdf(&z, t, &prev)?;
            println!(
                "  t = {t:<6} ODE {:>10.6}  exact {:>10.6}  steps {}",
                est.loglik, exact, est.stats.accepted
            );
        }
    }
    Ok(())
}
