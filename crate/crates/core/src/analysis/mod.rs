//! Evaluation logic: extreme trimming, onset alignment, novelty curves, peak
//! picking, boundary matching, and the experiment harnesses built on them.

pub mod experiments;
pub mod plot;

pub use experiments::*;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::surprisal::ICCurve;

/// Marks time steps that fall among the most extreme values of any model.
///
/// Each model contributes `m = ⌈fraction·T⌉` steps: its `⌊m/2⌋` lowest and
/// `m − ⌊m/2⌋` highest values (ties broken by index).
pub fn trim_extremes(curves: &[&[f64]], fraction: f64) -> Result<Vec<bool>> {
    if !(0.0..0.5).contains(&fraction) {
        return Err(invalid(format!("trim fraction {fraction} must lie in [0, 0.5)")));
    }
    let Some(first) = curves.first() else {
        return Err(invalid("no curves to trim"));
    };
    let t = first.len();
    if curves.iter().any(|c| c.len() != t) {
        return Err(invalid("curves are not aligned to the same time steps"));
    }
    let mut mask = vec![false; t];
    let m = (fraction * t as f64).ceil() as usize;
    if m == 0 {
        return Ok(mask);
    }
    let low = m / 2;
    let high = m - low;
    for c in curves {
        if c.iter().any(|x| x.is_nan()) {
            return Err(invalid("NaN in IC curve"));
        }
        let mut idx: Vec<usize> = (0..t).collect();
        idx.sort_by(|&a, &b| c[a].total_cmp(&c[b]).then(a.cmp(&b)));
        for &i in idx[..low].iter().chain(&idx[t - high..]) {
            mask[i] = true;
        }
    }
    Ok(mask)
}

/// Mean IC over the two frames that contain each onset: the onset frame and
/// the one after it (just the onset frame at the end of the curve). Onsets
/// are frame indices of the sequence; frame 0 has no IC.
pub fn onset_aligned_ic(ic: &ICCurve, onsets: &[usize]) -> Result<Vec<f64>> {
    onset_aligned(&ic.values, onsets)
}

fn onset_aligned(values: &[f64], onsets: &[usize]) -> Result<Vec<f64>> {
    let n = values.len();
    onsets
        .iter()
        .map(|&f| {
            if f == 0 || f > n {
                return Err(invalid(format!("onset frame {f} outside the predicted frames 1..={n}")));
            }
            let i = f - 1;
            Ok(if i + 1 < n { 0.5 * (values[i] + values[i + 1]) } else { values[i] })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoveltyConfig {
    /// Gaussian smoothing width in frames
    pub sigma: f64,
    /// peak half-window in frames
    pub window: usize,
    /// threshold in local standard deviations above the local mean
    pub kappa: f64,
}

impl Default for NoveltyConfig {
    fn default() -> Self {
        Self {
            sigma: 5.0,
            window: 10,
            kappa: 1.0,
        }
    }
}

impl NoveltyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || self.window == 0 {
            return Err(invalid("novelty sigma must be positive and the peak window at least 1"));
        }
        Ok(())
    }
}

/// Normalized Gaussian weights on `−r..=r`, `r = ⌈4σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Value at any integer index of `x` extended by point reflection about its
/// end samples, which continues straight lines.
fn extended(x: &[f64], j: i64) -> f64 {
    let n = x.len() as i64;
    if j < 0 {
        2.0 * x[0] - extended(x, -j)
    } else if j >= n {
        2.0 * x[(n - 1) as usize] - extended(x, 2 * (n - 1) - j)
    } else {
        x[j as usize]
    }
}

pub fn gaussian_smooth(x: &[f64], sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    (0..x.len() as i64)
        .map(|i| k.iter().enumerate().map(|(m, w)| w * extended(x, i + m as i64 - r)).sum())
        .collect()
}

/// First difference of the Gaussian-smoothed series: `out[i]` is the change
/// from step `i` to step `i + 1`.
pub fn novelty_curve(ic: &[f64], cfg: &NoveltyConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if ic.len() < 3 {
        return Err(invalid("novelty needs at least three values"));
    }
    if ic.iter().any(|x| !x.is_finite()) {
        return Err(invalid("non-finite value in IC curve"));
    }
    let s = gaussian_smooth(ic, cfg.sigma);
    Ok(s.windows(2).map(|w| w[1] - w[0]).collect())
}

/// Indices that are the strict maximum of `[i − w, i + w]` and reach the
/// local mean plus `kappa` population standard deviations. The two end
/// samples are never peaks.
pub fn pick_peaks(curve: &[f64], cfg: &NoveltyConfig) -> Vec<usize> {
    let n = curve.len();
    let w = cfg.window.max(1);
    let mut peaks = Vec::new();
    for i in 1..n.saturating_sub(1) {
        let lo = i.saturating_sub(w);
        let hi = (i + w).min(n - 1);
        let win = &curve[lo..=hi];
        let v = curve[i];
        if win.iter().enumerate().any(|(j, &x)| lo + j != i && x >= v) {
            continue;
        }
        let m = win.iter().sum::<f64>() / win.len() as f64;
        let sd = (win.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / win.len() as f64).sqrt();
        if v >= m + cfg.kappa * sd {
            peaks.push(i);
        }
    }
    peaks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryMatchResult {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// (predicted, annotated) pairs in order of increasing distance
    pub matched: Vec<(f64, f64)>,
}

fn check_sorted(xs: &[f64], what: &str) -> Result<()> {
    if xs.iter().any(|x| !x.is_finite()) || xs.windows(2).any(|w| w[0] > w[1]) {
        return Err(invalid(format!("{what} times must be finite and sorted")));
    }
    Ok(())
}

/// Greedy one-to-one matching of boundaries closest pair first, counting a
/// pair as a hit when it lies within `window` seconds.
pub fn boundary_prf(predicted: &[f64], annotated: &[f64], window: f64) -> Result<BoundaryMatchResult> {
    if !(window > 0.0) {
        return Err(invalid("matching window must be positive"));
    }
    check_sorted(predicted, "predicted")?;
    check_sorted(annotated, "annotated")?;
    let mut cand: Vec<(f64, usize, usize)> = Vec::new();
    for (i, &p) in predicted.iter().enumerate() {
        for (j, &a) in annotated.iter().enumerate() {
            let dist = (p - a).abs();
            if dist <= window {
                cand.push((dist, i, j));
            }
        }
    }
    // ties are broken on the pair's times, not on which list they came from
    cand.sort_by(|x, y| {
        let key = |c: &(f64, usize, usize)| {
            let (p, a) = (predicted[c.1], annotated[c.2]);
            (c.0, p.min(a), p.max(a))
        };
        let (a, b) = (key(x), key(y));
        a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.total_cmp(&b.2))
    });
    let mut used_p = vec![false; predicted.len()];
    let mut used_a = vec![false; annotated.len()];
    let mut matched = Vec::new();
    for (_, i, j) in cand {
        if !used_p[i] && !used_a[j] {
            used_p[i] = true;
            used_a[j] = true;
            matched.push((predicted[i], annotated[j]));
        }
    }
    let hits = matched.len() as f64;
    let precision = if predicted.is_empty() { 0.0 } else { hits / predicted.len() as f64 };
    let recall = if annotated.is_empty() { 0.0 } else { hits / annotated.len() as f64 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(BoundaryMatchResult {
        precision,
        recall,
        f1,
        matched,
    })
}

/// Time in seconds of novelty index `i`: the start of the later of the two
/// frames it compares.
pub fn novelty_time(i: usize, frame_rate: f64) -> f64 {
    (i + 2) as f64 / frame_rate
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn curve(values: Vec<f64>) -> ICCurve {
        ICCurve {
            model: "x".into(),
            sequence: "s".into(),
            noise_level: 0.0,
            frame_rate: 10.0,
            values,
            solver: None,
            seed: 0,
        }
    }

    #[test]
    fn trim_counts() {
        let c: Vec<f64> = (0..200).map(|i| ((i * 37) % 200) as f64).collect();
        assert!(trim_extremes(&[&c], 0.0).unwrap().iter().all(|m| !m));
        let m = trim_extremes(&[&c], 0.01).unwrap();
        assert_eq!(m.iter().filter(|&&x| x).count(), 2);
        // one low, one high
        let picked: Vec<f64> = m.iter().enumerate().filter(|x| *x.1).map(|x| c[x.0]).collect();
        assert!(picked.contains(&0.0) && picked.contains(&199.0));
    }

    #[test]
    fn trim_union_across_models() {
        let a: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let mut b = vec![1.0; 100];
        b[50] = 1000.0;
        b[20] = -1000.0;
        let m = trim_extremes(&[&a, &b], 0.02).unwrap();
        for i in [0, 99, 50, 20] {
            assert!(m[i], "{i}");
        }
        assert_eq!(m.iter().filter(|&&x| x).count(), 4);
        assert!(trim_extremes(&[&a, &b[..99]], 0.02).is_err());
        assert!(trim_extremes(&[&a], 0.5).is_err());
    }

    #[test]
    fn onset_alignment() {
        let c = curve(vec![0.0, 1.0, 3.0, 7.0]);
        // frame 2 is values[1], frame 3 is values[2]
        assert_eq!(onset_aligned_ic(&c, &[2]).unwrap(), vec![2.0]);
        assert_eq!(onset_aligned_ic(&c, &[4]).unwrap(), vec![7.0]);
        assert!(onset_aligned_ic(&c, &[]).unwrap().is_empty());
        assert!(onset_aligned_ic(&c, &[5]).is_err());
        assert!(onset_aligned_ic(&c, &[0]).is_err());
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        for s in [0.5, 1.0, 5.0] {
            let k = gaussian_kernel(s);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            assert_eq!(k.len(), 2 * (4.0 * s).ceil() as usize + 1);
            for i in 0..k.len() {
                assert_eq!(k[i], k[k.len() - 1 - i]);
            }
        }
    }

    #[test]
    fn novelty_trivial_cases() {
        let cfg = NoveltyConfig::default();
        let n = novelty_curve(&[2.5; 50], &cfg).unwrap();
        assert_eq!(n.len(), 49);
        assert!(n.iter().all(|x| x.abs() < 1e-12));
        let ramp: Vec<f64> = (0..60).map(|i| 0.3 * i as f64 - 1.0).collect();
        for v in novelty_curve(&ramp, &cfg).unwrap() {
            assert!((v - 0.3).abs() < 1e-12, "{v}");
        }
        assert!(novelty_curve(&[1.0, 2.0], &cfg).is_err());
    }

    #[test]
    fn novelty_of_a_step_matches_direct_convolution() {
        let cfg = NoveltyConfig::default();
        let n = 120;
        let j = 60;
        let x: Vec<f64> = (0..n).map(|i| if i >= j { 1.0 } else { 0.0 }).collect();
        let nov = novelty_curve(&x, &cfg).unwrap();
        // away from the ends, s[i] = Σ_{m ≥ j − i} k[m] over offsets m
        let sigma: f64 = 5.0;
        let r = (4.0 * sigma).ceil() as i64;
        let raw: Vec<f64> = (-r..=r).map(|m| (-(m * m) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let z: f64 = raw.iter().sum();
        let smooth = |i: i64| -> f64 { (-r..=r).filter(|m| i + m >= j as i64).map(|m| raw[(m + r) as usize] / z).sum() };
        for i in 30..90 {
            let oracle = smooth(i as i64 + 1) - smooth(i as i64);
            assert!((nov[i] - oracle).abs() < 1e-14);
        }
        let arg = (0..nov.len()).max_by(|&a, &b| nov[a].total_cmp(&nov[b])).unwrap();
        assert!(arg == j - 1 || arg == j, "{arg}");
        // increment equals the central kernel weight pair (0 and ±1 offsets)
        assert!((nov[j - 1] - raw[r as usize] / z).abs() < 1e-14);
    }

    #[test]
    fn peak_trivial_cases() {
        let cfg = NoveltyConfig::default();
        let mono: Vec<f64> = (0..80).map(|i| (i as f64).sqrt()).collect();
        assert!(pick_peaks(&mono, &cfg).is_empty());
        let down: Vec<f64> = mono.iter().map(|x| -x).collect();
        assert!(pick_peaks(&down, &cfg).is_empty());
        let mut imp = vec![0.0; 80];
        imp[33] = 1.0;
        assert_eq!(pick_peaks(&imp, &cfg), vec![33]);
        imp[33 + 2 * cfg.window + 1] = 0.7;
        assert_eq!(pick_peaks(&imp, &cfg), vec![33, 54]);
        assert!(pick_peaks(&[], &cfg).is_empty());
    }

    #[test]
    fn boundary_cases() {
        let r = boundary_prf(&[1.0, 5.0, 9.0], &[1.0, 5.0, 9.0], 0.5).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let r = boundary_prf(&[10.0], &[10.3], 0.5).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        assert_eq!(r.matched, vec![(10.0, 10.3)]);
        let r = boundary_prf(&[], &[5.0], 0.5).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        // one annotation cannot be claimed twice; the nearer prediction wins
        let r = boundary_prf(&[4.7, 5.1], &[5.0], 0.5).unwrap();
        assert_eq!(r.matched, vec![(5.1, 5.0)]);
        assert_eq!(r.precision, 0.5);
        assert!(boundary_prf(&[2.0, 1.0], &[1.0], 0.5).is_err());
        assert!(boundary_prf(&[1.0], &[1.0], 0.0).is_err());
    }

    fn sorted_times() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..60.0, 0..12).prop_map(|mut v| {
            v.sort_by(f64::total_cmp);
            v
        })
    }

    proptest! {
        #[test]
        fn novelty_is_linear(
            x in prop::collection::vec(-5.0f64..5.0, 3..60),
            seed in 0u64..1000,
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let cfg = NoveltyConfig { sigma: 1.0 + (seed % 7) as f64, ..NoveltyConfig::default() };
            let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| (v * 1.7 + i as f64 * 0.1).sin()).collect();
            let comb: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let nx = novelty_curve(&x, &cfg).unwrap();
            let ny = novelty_curve(&y, &cfg).unwrap();
            let nc = novelty_curve(&comb, &cfg).unwrap();
            for i in 0..nc.len() {
                let lin = a * nx[i] + b * ny[i];
                prop_assert!((nc[i] - lin).abs() <= 1e-9 * (1.0 + lin.abs()));
            }
        }

        #[test]
        fn peaks_are_increasing_and_separated(
            x in prop::collection::vec(-1.0f64..1.0, 1..200),
            w in 1usize..15,
            kappa in 0.0f64..2.0,
        ) {
            let cfg = NoveltyConfig { window: w, kappa, ..NoveltyConfig::default() };
            let p = pick_peaks(&x, &cfg);
            for pair in p.windows(2) {
                prop_assert!(pair[1] > pair[0] + w);
            }
        }

        #[test]
        fn matching_is_symmetric(p in sorted_times(), a in sorted_times(), window in 0.1f64..3.0) {
            let r = boundary_prf(&p, &a, window).unwrap();
            let s = boundary_prf(&a, &p, window).unwrap();
            prop_assert_eq!(r.precision, s.recall);
            prop_assert_eq!(r.recall, s.precision);
            prop_assert_eq!(r.f1, s.f1);
            prop_assert!(r.matched.iter().all(|(x, y)| (x - y).abs() <= window));
        }

        #[test]
        fn trim_count_is_bounded(
            curves in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 50), 1..4),
            fraction in 0.0f64..0.3,
        ) {
            let refs: Vec<&[f64]> = curves.iter().map(|c| c.as_slice()).collect();
            let m = trim_extremes(&refs, fraction).unwrap();
            let per = (fraction * 50.0).ceil() as usize;
            let n = m.iter().filter(|&&x| x).count();
            prop_assert!(n >= per.min(50));
            prop_assert!(n <= curves.len() * per);
        }
    }
}
