//! Synthetic latent sequences with known symbol surprisal and planted
//! section boundaries, plus the on-disk dataset format.
//!
//! A frame is `[coarse (d_c) | fine (d − d_c)]`. The coarse part is the
//! embedding of the current symbol plus a little jitter; the fine part is a
//! low-amplitude autoregressive texture whose correlation structure depends
//! on the timbre id only.
//!
//! Dataset layout (one pair of files per sequence, `<id>` is the sequence id):
//!
//! ```text
//! <id>.f32   T × d little-endian f32, row-major
//! <id>.json  SequenceHeader (id, frame count, dimension, frame rate,
//!            generator seed, annotations)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{standard_normal_from, Rng};

/// Ground truth attached to a generated sequence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotations {
    /// symbol id of every frame
    pub symbols: Vec<usize>,
    /// frame index of each symbol onset
    pub onsets: Vec<usize>,
    /// true IC of each symbol in bits, `−log₂ P(sᵢ | sᵢ₋₁)`
    pub symbol_ic: Vec<f64>,
    /// section boundaries in seconds
    pub boundaries: Vec<f64>,
    pub timbre: Option<u64>,
    /// id shared by renderings of the same note material
    pub material: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub id: String,
    /// `T × dim`, row-major
    pub frames: Vec<f64>,
    pub dim: usize,
    pub frame_rate: f64,
    pub seed: u64,
    pub annotations: Option<Annotations>,
}

impl LatentSequence {
    pub fn new(id: impl Into<String>, frames: Vec<f64>, dim: usize, frame_rate: f64) -> Result<Self> {
        let s = Self {
            id: id.into(),
            frames,
            dim,
            frame_rate,
            seed: 0,
            annotations: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.frames.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        &self.frames[k * self.dim..(k + 1) * self.dim]
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.frame_rate
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.frames.len() % self.dim != 0 {
            return Err(invalid("frame buffer is not a multiple of the dimension"));
        }
        if self.len() < 2 {
            return Err(invalid("a sequence needs at least two frames"));
        }
        if !(self.frame_rate > 0.0) {
            return Err(invalid("frame rate must be positive"));
        }
        if self.frames.iter().any(|x| !x.is_finite()) {
            return Err(invalid("non-finite frame value"));
        }
        if let Some(a) = &self.annotations {
            let dur = self.duration();
            if a.boundaries.windows(2).any(|w| w[0] >= w[1])
                || a.boundaries.iter().any(|&b| b <= 0.0 || b >= dur)
            {
                return Err(invalid("boundaries must be increasing and interior"));
            }
            if !a.symbols.is_empty() && a.symbols.len() != self.len() {
                return Err(invalid("one symbol id per frame expected"));
            }
            if a.onsets.len() != a.symbol_ic.len() || a.onsets.iter().any(|&o| o >= self.len()) {
                return Err(invalid("onsets and symbol ICs disagree"));
            }
        }
        Ok(())
    }
}

/// Scalar knobs from which a [`GeneratorSpec`] is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub dim: usize,
    pub coarse_dim: usize,
    pub symbols: usize,
    pub frames_per_symbol: usize,
    pub frame_rate: f64,
    /// typical norm of a coarse embedding
    pub coarse_scale: f64,
    /// per-frame isotropic noise on the coarse part
    pub coarse_jitter: f64,
    /// amplitude of the fine texture
    pub a_fine: f64,
    /// ratio between the largest and smallest texture variance
    pub texture_anisotropy: f64,
    /// larger values give peakier transition rows
    pub transition_sharpness: f64,
    pub timbres: u64,
    /// section styles available to segmented sequences
    pub section_styles: usize,
    /// seed of the transition matrix, palette and timbre bank
    pub spec_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            coarse_dim: 4,
            symbols: 8,
            frames_per_symbol: 4,
            frame_rate: 10.0,
            coarse_scale: 20.0,
            coarse_jitter: 0.3,
            a_fine: 0.05,
            texture_anisotropy: 100.0,
            transition_sharpness: 1.5,
            timbres: 5,
            section_styles: 4,
            spec_seed: 7,
        }
    }
}

/// Fine-texture generator of one timbre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timbre {
    /// orthogonal `d_f × d_f` mixing, row-major
    pub mixing: Vec<f64>,
    /// standard deviation of each latent texture channel
    pub scales: Vec<f64>,
    /// AR(1) coefficient
    pub rho: f64,
}

/// Transition matrix and palette of one section style.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionStyle {
    pub transition: Vec<f64>,
    pub palette: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub config: GeneratorConfig,
    /// `S × S`, rows sum to one
    pub transition: Vec<f64>,
    /// `S × d_c`
    pub palette: Vec<f64>,
    pub timbres: Vec<Timbre>,
    pub styles: Vec<SectionStyle>,
}

/// Random orthogonal matrix (row-major) by Gram–Schmidt on Gaussian columns.
fn random_orthogonal(n: usize, rng: &Rng) -> Vec<f64> {
    let mut g = rng.generator();
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    while q.len() < n {
        let mut v = standard_normal_from(&mut g, n);
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    q.concat()
}

fn random_transition(s: usize, sharpness: f64, rng: &Rng) -> Vec<f64> {
    let mut g = rng.generator();
    let mut t = Vec::with_capacity(s * s);
    for _ in 0..s {
        let logits: Vec<f64> = (0..s).map(|_| sharpness * g.sample::<f64, _>(StandardNormal)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        t.extend(e.iter().map(|x| x / z));
    }
    t
}

/// `S` points of norm about `scale` in `d_c` dimensions, pairwise at least
/// `scale / 2` apart (rejection sampling, relaxed if it keeps failing).
fn random_palette(s: usize, dc: usize, scale: f64, rng: &Rng) -> Vec<f64> {
    let mut g = rng.generator();
    let mut min_sep = 0.5 * scale;
    let mut pts: Vec<Vec<f64>> = Vec::new();
    let mut tries = 0;
    while pts.len() < s {
        let v: Vec<f64> = standard_normal_from(&mut g, dc)
            .into_iter()
            .map(|x| x * scale / (dc as f64).sqrt())
            .collect();
        let ok = pts
            .iter()
            .all(|p| p.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= min_sep);
        if ok {
            pts.push(v);
        }
        tries += 1;
        if tries % 1000 == 0 {
            min_sep *= 0.8;
        }
    }
    pts.concat()
}

/// Each style occupies its own register: a palette of spread
/// `coarse_scale / 3` around a centre, centres about `2·coarse_scale` from
/// the origin and well apart from each other.
fn section_styles(c: &GeneratorConfig, rng: &Rng) -> Vec<SectionStyle> {
    let dc = c.coarse_dim;
    let centres = random_palette(c.section_styles, dc, 2.0 * c.coarse_scale, &rng.split(0));
    (0..c.section_styles)
        .map(|i| {
            let r = rng.split(1).split(i as u64);
            let local = random_palette(c.symbols, dc, c.coarse_scale / 3.0, &r.split(1));
            SectionStyle {
                transition: random_transition(c.symbols, c.transition_sharpness, &r.split(0)),
                palette: local
                    .iter()
                    .enumerate()
                    .map(|(j, x)| x + centres[i * dc + j % dc])
                    .collect(),
            }
        })
        .collect()
}

impl GeneratorSpec {
    pub fn from_config(config: GeneratorConfig) -> Result<Self> {
        let c = config;
        if c.coarse_dim == 0 || c.coarse_dim >= c.dim {
            return Err(invalid("coarse_dim must lie in 1..dim"));
        }
        if c.symbols < 2 || c.frames_per_symbol == 0 || c.timbres == 0 {
            return Err(invalid("need at least two symbols, one frame per symbol and one timbre"));
        }
        if !(c.frame_rate > 0.0 && c.coarse_scale > 0.0 && c.a_fine >= 0.0 && c.coarse_jitter >= 0.0) {
            return Err(invalid("scales and frame rate must be positive"));
        }
        if !(c.texture_anisotropy >= 1.0) {
            return Err(invalid("texture_anisotropy must be at least 1"));
        }
        if c.section_styles < 2 {
            return Err(invalid("need at least two section styles"));
        }
        let root = Rng::new(c.spec_seed, 0x5eed);
        let df = c.dim - c.coarse_dim;
        let timbres = (0..c.timbres)
            .map(|id| {
                let r = root.split(1000 + id);
                let mut g = r.split(1).generator();
                // geometric spectrum with unit mean variance
                let vars: Vec<f64> = (0..df)
                    .map(|i| c.texture_anisotropy.powf(-(i as f64) / (df.max(2) - 1) as f64))
                    .collect();
                let mv = vars.iter().sum::<f64>() / df as f64;
                Timbre {
                    mixing: random_orthogonal(df, &r.split(0)),
                    scales: vars.iter().map(|v| (v / mv).sqrt()).collect(),
                    rho: 0.5 + 0.4 * g.random::<f64>(),
                }
            })
            .collect();
        let spec = Self {
            config: c,
            transition: random_transition(c.symbols, c.transition_sharpness, &root.split(1)),
            palette: random_palette(c.symbols, c.coarse_dim, c.coarse_scale, &root.split(2)),
            timbres,
            styles: section_styles(&c, &root.split(3)),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        validate_transition(&self.transition, c.symbols)?;
        validate_palette(&self.palette, c)?;
        if self.timbres.len() as u64 != c.timbres {
            return Err(invalid("timbre bank size differs from the configured count"));
        }
        if self.styles.len() != c.section_styles {
            return Err(invalid("style bank size differs from the configured count"));
        }
        for st in &self.styles {
            validate_transition(&st.transition, c.symbols)?;
            validate_palette(&st.palette, c)?;
        }
        Ok(())
    }

    pub fn transition_prob(&self, from: usize, to: usize) -> f64 {
        self.transition[from * self.config.symbols + to]
    }
}

fn validate_transition(transition: &[f64], s: usize) -> Result<()> {
    if transition.len() != s * s {
        return Err(invalid("transition matrix must be S × S"));
    }
    for row in transition.chunks(s) {
        if row.iter().any(|p| !(*p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid("transition rows must be probability vectors"));
        }
    }
    Ok(())
}

fn validate_palette(palette: &[f64], c: &GeneratorConfig) -> Result<()> {
    let dc = c.coarse_dim;
    if palette.len() != c.symbols * dc {
        return Err(invalid("palette must be S × d_c"));
    }
    for i in 0..c.symbols {
        for j in 0..i {
            let d: f64 = (0..dc)
                .map(|k| (palette[i * dc + k] - palette[j * dc + k]).powi(2))
                .sum::<f64>()
                .sqrt();
            if d < 4.0 * c.a_fine || d == 0.0 {
                return Err(invalid("coarse embeddings must be separated by at least 4·a_fine"));
            }
        }
    }
    Ok(())
}

/// Samples a Markov path of `n` symbols from a uniform start. Returns the
/// path and the IC of every symbol in bits.
fn sample_path(transition: &[f64], s: usize, n: usize, g: &mut impl rand::Rng) -> (Vec<usize>, Vec<f64>) {
    let mut path = Vec::with_capacity(n);
    let mut ic = Vec::with_capacity(n);
    let mut cur = g.random_range(0..s);
    path.push(cur);
    ic.push((s as f64).log2());
    for _ in 1..n {
        let u: f64 = g.random();
        let row = &transition[cur * s..(cur + 1) * s];
        let mut acc = 0.0;
        let mut next = s - 1;
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                next = j;
                break;
            }
        }
        // zero-probability symbols can only be hit through rounding
        while row[next] == 0.0 {
            next -= 1;
        }
        ic.push(-row[next].log2());
        path.push(next);
        cur = next;
    }
    (path, ic)
}

/// Adds jitter to per-frame coarse embeddings (`T × d_c`) and appends the
/// timbre texture.
fn render(cfg: &GeneratorConfig, coarse: &[f64], timbre: &Timbre, coarse_rng: &Rng, texture_rng: &Rng) -> Vec<f64> {
    let d = cfg.dim;
    let dc = cfg.coarse_dim;
    let df = d - dc;
    let t_len = coarse.len() / dc;
    let mut gc = coarse_rng.generator();
    let mut gt = texture_rng.generator();
    let mut frames = vec![0.0; t_len * d];
    let mut x: Vec<f64> = standard_normal_from(&mut gt, df);
    let innov = (1.0 - timbre.rho * timbre.rho).sqrt();
    for k in 0..t_len {
        let row = &mut frames[k * d..(k + 1) * d];
        for i in 0..dc {
            row[i] = coarse[k * dc + i] + cfg.coarse_jitter * gc.sample::<f64, _>(StandardNormal);
        }
        if k > 0 {
            for xi in x.iter_mut() {
                *xi = timbre.rho * *xi + innov * gt.sample::<f64, _>(StandardNormal);
            }
        }
        for i in 0..df {
            let mut acc = 0.0;
            for j in 0..df {
                acc += timbre.mixing[i * df + j] * timbre.scales[j] * x[j];
            }
            row[dc + i] = cfg.a_fine * acc;
        }
    }
    frames
}

fn timbre_of(spec: &GeneratorSpec, timbre: u64) -> Result<&Timbre> {
    spec.timbres
        .get(timbre as usize)
        .ok_or_else(|| invalid(format!("timbre {timbre} not in the bank of {}", spec.timbres.len())))
}

/// One melody rendered with one timbre. The symbol path and the coarse
/// rendering depend only on `(spec, length, rng)`; the fine texture stream
/// is keyed by the timbre id.
pub fn gen_pitch_timbre(spec: &GeneratorSpec, length_symbols: usize, timbre: u64, rng: &Rng) -> Result<LatentSequence> {
    spec.validate()?;
    if length_symbols < 2 {
        return Err(invalid("need at least two symbols"));
    }
    let c = &spec.config;
    let tim = timbre_of(spec, timbre)?;
    let (path, ic) = sample_path(&spec.transition, c.symbols, length_symbols, &mut rng.split(0).generator());
    let fps = c.frames_per_symbol;
    let symbols: Vec<usize> = path.iter().flat_map(|&s| std::iter::repeat_n(s, fps)).collect();
    let dc = c.coarse_dim;
    let coarse: Vec<f64> = symbols
        .iter()
        .flat_map(|&s| spec.palette[s * dc..(s + 1) * dc].iter().copied())
        .collect();
    let frames = render(c, &coarse, tim, &rng.split(1), &rng.split(2).split(timbre));
    let seq = LatentSequence {
        id: format!("melody{:016x}-timbre{timbre}", rng.seed ^ rng.stream.rotate_left(17)),
        frames,
        dim: c.dim,
        frame_rate: c.frame_rate,
        seed: rng.seed,
        annotations: Some(Annotations {
            onsets: (0..length_symbols).map(|i| i * fps).collect(),
            symbols,
            symbol_ic: ic,
            boundaries: Vec::new(),
            timbre: Some(timbre),
            material: Some(rng.seed ^ rng.stream.rotate_left(17)),
        }),
    };
    seq.validate()?;
    Ok(seq)
}

/// Concatenated sections, `frames_per_section` frames each, one timbre
/// throughout. Every section follows one style of the spec's bank with its
/// own transition matrix and palette; consecutive sections differ in style.
pub fn gen_segmented(
    spec: &GeneratorSpec,
    sections: usize,
    frames_per_section: usize,
    rng: &Rng,
) -> Result<LatentSequence> {
    spec.validate()?;
    let c = &spec.config;
    if sections < 2 {
        return Err(invalid("need at least two sections"));
    }
    if frames_per_section < c.frames_per_symbol {
        return Err(invalid("a section must hold at least one symbol"));
    }
    let s = c.symbols;
    let dc = c.coarse_dim;
    let fps = c.frames_per_symbol;
    let n_styles = spec.styles.len();
    let mut g = rng.split(3).generator();
    let timbre = g.random_range(0..c.timbres);
    let mut styles = Vec::with_capacity(sections);
    let mut symbols = Vec::with_capacity(sections * frames_per_section);
    let mut onsets = Vec::new();
    let mut symbol_ic = Vec::new();
    for sec in 0..sections {
        let style = match styles.last() {
            None => g.random_range(0..n_styles),
            Some(&prev) => (prev + 1 + g.random_range(0..n_styles - 1)) % n_styles,
        };
        styles.push(style);
        let n_sym = frames_per_section.div_ceil(fps);
        let (path, ic) = sample_path(
            &spec.styles[style].transition,
            s,
            n_sym,
            &mut rng.split(100 + sec as u64).generator(),
        );
        let start = sec * frames_per_section;
        for (i, (&p, &b)) in path.iter().zip(&ic).enumerate() {
            onsets.push(start + i * fps);
            symbol_ic.push(b);
            for _ in 0..fps {
                if symbols.len() < start + frames_per_section {
                    symbols.push(p);
                }
            }
        }
    }
    let coarse: Vec<f64> = symbols
        .iter()
        .enumerate()
        .flat_map(|(k, &s)| {
            spec.styles[styles[k / frames_per_section]].palette[s * dc..(s + 1) * dc]
                .iter()
                .copied()
        })
        .collect();
    let frames = render(c, &coarse, timbre_of(spec, timbre)?, &rng.split(1), &rng.split(2).split(timbre));
    let seq = LatentSequence {
        id: format!("segmented{:016x}", rng.seed ^ rng.stream.rotate_left(17)),
        frames,
        dim: c.dim,
        frame_rate: c.frame_rate,
        seed: rng.seed,
        annotations: Some(Annotations {
            symbols,
            onsets,
            symbol_ic,
            boundaries: (1..sections)
                .map(|i| (i * frames_per_section) as f64 / c.frame_rate)
                .collect(),
            timbre: Some(timbre),
            material: None,
        }),
    };
    seq.validate()?;
    Ok(seq)
}

/// Index of the nearest palette entry to the coarse part of a frame.
pub fn nearest_symbol(spec: &GeneratorSpec, frame: &[f64]) -> usize {
    let dc = spec.config.coarse_dim;
    (0..spec.config.symbols)
        .min_by(|&a, &b| {
            let da: f64 = (0..dc).map(|i| (frame[i] - spec.palette[a * dc + i]).powi(2)).sum();
            let db: f64 = (0..dc).map(|i| (frame[i] - spec.palette[b * dc + i]).powi(2)).sum();
            da.total_cmp(&db)
        })
        .unwrap()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceHeader {
    id: String,
    frames: usize,
    dim: usize,
    frame_rate: f64,
    seed: u64,
    annotations: Option<Annotations>,
}

/// Writes every sequence as `<id>.f32` + `<id>.json` into `dir` (created if
/// missing). Frames are stored as f32.
pub fn save_dataset(sequences: &[LatentSequence], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut seen = BTreeMap::new();
    for s in sequences {
        s.validate()?;
        if seen.insert(s.id.clone(), ()).is_some() {
            return Err(invalid(format!("duplicate sequence id {}", s.id)));
        }
        let mut bytes = Vec::with_capacity(4 * s.frames.len());
        for &x in &s.frames {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
        std::fs::write(dir.join(format!("{}.f32", s.id)), bytes)?;
        let header = SequenceHeader {
            id: s.id.clone(),
            frames: s.len(),
            dim: s.dim,
            frame_rate: s.frame_rate,
            seed: s.seed,
            annotations: s.annotations.clone(),
        };
        std::fs::write(dir.join(format!("{}.json", s.id)), serde_json::to_vec_pretty(&header)?)?;
    }
    Ok(())
}

/// Loads every `<id>.json` / `<id>.f32` pair in `dir`, sorted by id.
pub fn load_dataset(dir: &Path) -> Result<Vec<LatentSequence>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") {
            if path.file_name().is_some_and(|n| n == "manifest.json" || n == "config.json") {
                continue;
            }
            names.push(path);
        }
    }
    names.sort();
    let mut out = Vec::with_capacity(names.len());
    for json in names {
        let corrupt = |reason: String| Error::CorruptDataset {
            path: json.clone(),
            reason,
        };
        let header: SequenceHeader = serde_json::from_slice(&std::fs::read(&json)?)
            .map_err(|e| corrupt(format!("bad header: {e}")))?;
        let bin = json.with_extension("f32");
        let bytes = std::fs::read(&bin).map_err(|e| corrupt(format!("missing frame file: {e}")))?;
        let expected = 4 * header.frames * header.dim;
        if bytes.len() != expected {
            return Err(corrupt(format!("frame file has {} bytes, expected {expected}", bytes.len())));
        }
        let frames = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let seq = LatentSequence {
            id: header.id,
            frames,
            dim: header.dim,
            frame_rate: header.frame_rate,
            seed: header.seed,
            annotations: header.annotations,
        };
        seq.validate().map_err(|e| corrupt(e.to_string()))?;
        out.push(seq);
    }
    Ok(out)
}

/// Rounds frames to f32 so in-memory sequences equal what a save/load
/// round trip produces.
pub fn quantize_frames(seq: &mut LatentSequence) {
    for x in &mut seq.frames {
        *x = *x as f32 as f64;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    fn spec_with(transition: Vec<f64>, symbols: usize) -> GeneratorSpec {
        let mut s = GeneratorSpec::from_config(GeneratorConfig {
            symbols,
            ..GeneratorConfig::default()
        })
        .unwrap();
        s.transition = transition;
        s
    }

    #[test]
    fn uniform_transitions_give_two_bits() {
        let spec = spec_with(vec![0.25; 16], 4);
        let seq = gen_pitch_timbre(&spec, 50, 0, &Rng::from_seed(1)).unwrap();
        for ic in &seq.annotations.unwrap().symbol_ic {
            assert!((ic - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_chain_is_certain() {
        let mut t = vec![0.0; 16];
        for i in 0..4 {
            t[i * 4 + i] = 1.0;
        }
        let spec = spec_with(t, 4);
        let seq = gen_pitch_timbre(&spec, 20, 1, &Rng::from_seed(2)).unwrap();
        let a = seq.annotations.unwrap();
        assert!(a.symbol_ic[1..].iter().all(|&b| b == 0.0));
        assert!(a.symbols.iter().all(|&s| s == a.symbols[0]));
    }

    #[test]
    fn timbres_share_note_material() {
        let spec = GeneratorSpec::from_config(GeneratorConfig::default()).unwrap();
        let rng = Rng::from_seed(3);
        let a = gen_pitch_timbre(&spec, 30, 0, &rng).unwrap();
        let b = gen_pitch_timbre(&spec, 30, 3, &rng).unwrap();
        let (aa, ba) = (a.annotations.clone().unwrap(), b.annotations.clone().unwrap());
        assert_eq!(aa.symbols, ba.symbols);
        assert_eq!(aa.symbol_ic, ba.symbol_ic);
        assert_eq!(aa.onsets, ba.onsets);
        assert_eq!(aa.material, ba.material);
        assert_ne!(a.frames, b.frames);
        assert_ne!(a.id, b.id);
    }

    #[test]
    fn invalid_transition_rejected() {
        let spec = spec_with(vec![0.5; 16], 4);
        assert!(gen_pitch_timbre(&spec, 10, 0, &Rng::from_seed(0)).is_err());
        let spec = GeneratorSpec::from_config(GeneratorConfig::default()).unwrap();
        assert!(gen_pitch_timbre(&spec, 1, 0, &Rng::from_seed(0)).is_err());
        assert!(gen_pitch_timbre(&spec, 4, 99, &Rng::from_seed(0)).is_err());
    }

    #[test]
    fn segmented_boundaries() {
        let spec = GeneratorSpec::from_config(GeneratorConfig::default()).unwrap();
        let seq = gen_segmented(&spec, 2, 50, &Rng::from_seed(4)).unwrap();
        assert_eq!(seq.len(), 100);
        assert_eq!(seq.annotations.as_ref().unwrap().boundaries, vec![5.0]);
        let seq = gen_segmented(&spec, 5, 40, &Rng::from_seed(5)).unwrap();
        let b = &seq.annotations.as_ref().unwrap().boundaries;
        assert_eq!(b.len(), 4);
        assert!(b.windows(2).all(|w| w[0] < w[1]));
        assert!(b[0] > 0.0 && *b.last().unwrap() < seq.duration());
        assert_eq!(seq, gen_segmented(&spec, 5, 40, &Rng::from_seed(5)).unwrap());
        assert!(gen_segmented(&spec, 1, 40, &Rng::from_seed(5)).is_err());

        // the coarse part of each section sits on exactly one style palette,
        // and neighbouring sections use different ones
        let dc = spec.config.coarse_dim;
        let style_of = |k: usize| {
            let f = seq.frame(k);
            (0..spec.styles.len())
                .min_by(|&a, &b| {
                    let dist = |st: usize| {
                        spec.styles[st]
                            .palette
                            .chunks(dc)
                            .map(|p| p.iter().zip(f).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
                            .fold(f64::INFINITY, f64::min)
                    };
                    dist(a).total_cmp(&dist(b))
                })
                .unwrap()
        };
        let styles: Vec<usize> = (0..5).map(|sec| style_of(sec * 40)).collect();
        for sec in 0..5 {
            assert!((sec * 40..(sec + 1) * 40).all(|k| style_of(k) == styles[sec]));
        }
        assert!(styles.windows(2).all(|w| w[0] != w[1]), "{styles:?}");
    }

    #[test]
    fn empirical_transitions_match() {
        let spec = GeneratorSpec::from_config(GeneratorConfig::default()).unwrap();
        let s = spec.config.symbols;
        let (path, _) = sample_path(&spec.transition, s, 100_001, &mut Rng::from_seed(6).generator());
        let mut counts = vec![0.0; s * s];
        let mut from = vec![0.0; s];
        for w in path.windows(2) {
            counts[w[0] * s + w[1]] += 1.0;
            from[w[0]] += 1.0;
        }
        for i in 0..s {
            for j in 0..s {
                let p = spec.transition_prob(i, j);
                let n = from[i];
                let sd = (n * p * (1.0 - p)).sqrt();
                assert!((counts[i * s + j] - n * p).abs() <= 3.0 * sd + 1.0, "{i}->{j}");
            }
        }
    }

    #[test]
    fn coarse_part_identifies_symbol() {
        let spec = GeneratorSpec::from_config(GeneratorConfig::default()).unwrap();
        let mut total = 0;
        let mut right = 0;
        for seed in 0..20 {
            let seq = gen_pitch_timbre(&spec, 64, seed % 5, &Rng::from_seed(seed)).unwrap();
            let a = seq.annotations.as_ref().unwrap();
            for k in 0..seq.len() {
                total += 1;
                right += (nearest_symbol(&spec, seq.frame(k)) == a.symbols[k]) as usize;
            }
        }
        assert!(right as f64 / total as f64 >= 0.999, "{right}/{total}");
    }

    #[test]
    fn dataset_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path()).unwrap().is_empty());
        let spec = GeneratorSpec::from_config(GeneratorConfig::default()).unwrap();
        let mut seqs = vec![
            gen_pitch_timbre(&spec, 10, 2, &Rng::from_seed(8)).unwrap(),
            gen_segmented(&spec, 3, 20, &Rng::from_seed(9)).unwrap(),
        ];
        seqs.iter_mut().for_each(quantize_frames);
        save_dataset(&seqs, dir.path()).unwrap();
        let mut back = load_dataset(dir.path()).unwrap();
        back.sort_by(|a, b| a.id.cmp(&b.id));
        seqs.sort_by(|a, b| a.id.cmp(&b.id));
        assert_eq!(back, seqs);
        for (a, b) in back.iter().zip(&seqs) {
            assert!(a.frames.iter().zip(&b.frames).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let bin = dir.path().join(format!("{}.f32", seqs[0].id));
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::CorruptDataset { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn round_trip_is_bit_exact(seed in 0u64..1000, len in 2usize..20, timbre in 0u64..5) {
            let spec = GeneratorSpec::from_config(GeneratorConfig::default()).unwrap();
            let mut s = gen_pitch_timbre(&spec, len, timbre, &Rng::from_seed(seed)).unwrap();
            quantize_frames(&mut s);
            let dir = tempfile::tempdir().unwrap();
            save_dataset(std::slice::from_ref(&s), dir.path()).unwrap();
            let back = load_dataset(dir.path()).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert!(back[0].frames.iter().zip(&s.frames).all(|(x, y)| x.to_bits() == y.to_bits()));
            prop_assert_eq!(&back[0], &s);
        }
    }
}
