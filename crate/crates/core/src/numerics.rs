//! Reproducible random streams and the small set of statistics shared by
//! every experiment.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Key of a counter-based random stream.
///
/// An `Rng` is a plain value: it does not advance when used. Consumers call
/// [`Rng::generator`] to obtain a fresh sequential generator, and derive
/// independent child streams with [`Rng::split`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rng {
    pub seed: u64,
    pub stream: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::new(seed, 0)
    }

    /// Child stream identified by `id`. Distinct ids give distinct streams.
    pub fn split(&self, id: u64) -> Rng {
        Rng {
            seed: self.seed,
            stream: splitmix64(self.stream ^ splitmix64(id.wrapping_add(0x5851_f42d_4c95_7f2d))),
        }
    }

    pub fn generator(&self) -> ChaCha8Rng {
        let mut g = ChaCha8Rng::seed_from_u64(self.seed);
        g.set_stream(self.stream);
        g
    }
}

/// Vector of independent ±1 draws.
pub fn sample_rademacher(n: usize, rng: &Rng) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(invalid("rademacher sample length must be positive"));
    }
    let mut g = rng.generator();
    Ok(rademacher_from(&mut g, n))
}

pub fn rademacher_from<R: rand::Rng>(g: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| if g.random::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

pub fn standard_normal_from<R: rand::Rng>(g: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| g.sample::<f64, _>(StandardNormal)).collect()
}

/// log N(z; 0, sigma² I) in nats.
pub fn isotropic_gaussian_logpdf(z: &[f64], sigma: f64) -> Result<f64> {
    if z.is_empty() {
        return Err(invalid("gaussian log-density of an empty vector"));
    }
    if !(sigma > 0.0) {
        return Err(invalid(format!("sigma must be positive, got {sigma}")));
    }
    let d = z.len() as f64;
    let sq: f64 = z.iter().map(|x| x * x).sum();
    Ok(-0.5 * d * (2.0 * std::f64::consts::PI).ln() - d * sigma.ln() - sq / (2.0 * sigma * sigma))
}

/// Mid-ranks (1-based) with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "zero variance in a ranked series".into(),
        ));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(invalid(format!(
            "length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 3 {
        return Err(invalid("spearman correlation needs at least 3 pairs"));
    }
    Ok(())
}

/// Spearman's rank correlation with mid-rank tie handling.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Spearman correlation together with a two-sided permutation p-value.
///
/// The p-value is `(1 + #{|rho_perm| >= |rho|}) / (1 + n_perm)`.
pub fn spearman_permutation_test(
    xs: &[f64],
    ys: &[f64],
    n_perm: usize,
    rng: &Rng,
) -> Result<(f64, f64)> {
    check_pair(xs, ys)?;
    let rx = average_ranks(xs);
    let mut ry = average_ranks(ys);
    let rho = pearson(&rx, &ry)?;
    let mut g = rng.generator();
    let mut hits = 0usize;
    for _ in 0..n_perm {
        ry.shuffle(&mut g);
        let r = pearson(&rx, &ry)?;
        if r.abs() >= rho.abs() - 1e-12 {
            hits += 1;
        }
    }
    Ok((rho, (1 + hits) as f64 / (1 + n_perm) as f64))
}

/// Normalized approximation error of a set of estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    /// mean |estimate − reference| / mean |reference|
    pub mae_normalized: f64,
    /// mean (estimate − reference) / mean |reference|
    pub me_normalized: f64,
}

pub fn error_stats(estimates: &[f64], references: &[f64]) -> Result<ErrorStats> {
    if estimates.is_empty() || estimates.len() != references.len() {
        return Err(invalid(format!(
            "error_stats needs equal nonempty lengths, got {} and {}",
            estimates.len(),
            references.len()
        )));
    }
    let n = references.len() as f64;
    let scale = references.iter().map(|r| r.abs()).sum::<f64>() / n;
    if scale == 0.0 {
        return Err(invalid("references are all zero"));
    }
    let mae = estimates
        .iter()
        .zip(references)
        .map(|(e, r)| (e - r).abs())
        .sum::<f64>()
        / n;
    let me = estimates.iter().zip(references).map(|(e, r)| e - r).sum::<f64>() / n;
    Ok(ErrorStats {
        mae_normalized: mae / scale,
        me_normalized: me / scale,
    })
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Least-squares slope of `ys` against `xs`.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let mx = mean(xs);
    let my = mean(ys);
    let num: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}
