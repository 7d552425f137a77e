//! Variance of the Skilling–Hutchinson divergence estimate against the
//! number of Rademacher probes, on a dense linear field.
//!
//!     cargo run --release --example hutchinson

use adm_surprisal::numerics::{mean, standard_normal_from, std_dev, Rng};
use adm_surprisal::odelik::{divergence_exact, divergence_hutchinson, Linearization, VectorField};
use adm_surprisal::Result;

/// f(z) = A z
struct Dense {
    a: Vec<f64>,
    d: usize,
}

struct DenseAt<'a> {
    field: &'a Dense,
    value: Vec<f64>,
}

impl Linearization for DenseAt<'_> {
    fn value(&self) -> &[f64] {
        &self.value
    }
    fn vjp(&self, v: &[f64]) -> Result<Vec<f64>> {
        let d = self.field.d;
        Ok((0..d).map(|j| (0..d).map(|i| v[i] * self.field.a[i * d + j]).sum()).collect())
    }
}

impl VectorField for Dense {
    fn dim(&self) -> usize {
        self.d
    }
    fn linearize<'s>(&'s self, z: &[f64], _t: f64) -> Result<Box<dyn Linearization + 's>> {
        let d = self.d;
        let value = (0..d).map(|i| (0..d).map(|j| self.a[i * d + j] * z[j]).sum()).collect();
        Ok(Box::new(DenseAt { field: self, value }))
    }
}

fn main() -> Result<()> {
    let d = 16;
    let field = Dense {
        a: standard_normal_from(&mut Rng::from_seed(3).generator(), d * d),
        d,
    };
    let z = vec![1.0; d];
    let exact = divergence_exact(&field, &z, 0.0)?;
    println!("exact trace {exact:.4}");
    println!("{:>4} {:>10} {:>10}", "n_r", "mean", "std");
    for n_r in [1, 2, 4, 8, 16, 32] {
        let est = (0..2000u64)
            .map(|i| divergence_hutchinson(&field, &z, 0.0, n_r, &Rng::new(n_r as u64, i)))
            .collect::<Result<Vec<_>>>()?;
        println!("{n_r:>4} {:>10.4} {:>10.4}", mean(&est), std_dev(&est));
    }
    Ok(())
}
