//! Procedural cirrus-contaminated images, simulated annotator consensus, augmentation,
//! and on-disk datasets.
//!
//! Every output is a pure function of `(seed, params)`. Images and intensity maps are
//! rounded to single precision at generation time so that datasets stored as `f32`
//! load back bit-identically.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::{Array, ArrayData, ArrayFile};
use crate::error::{Error, Result};
use crate::loss::{ConsensusMask, MAJORITY_MIN};
use crate::metrics::coverage;
use crate::tensor::Tensor;

pub const MIN_SIZE: usize = 64;

/// Gradient noise on the integer lattice with a seeded permutation.
#[derive(Clone, Debug)]
pub struct Perlin {
    perm: Vec<usize>,
    grads: Vec<(f64, f64)>,
}

impl Perlin {
    pub fn new(rng: &mut impl Rng) -> Self {
        let mut p: Vec<usize> = (0..256).collect();
        p.shuffle(rng);
        let perm = p.iter().chain(p.iter()).copied().collect();
        let grads = (0..256)
            .map(|_| {
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                (a.cos(), a.sin())
            })
            .collect();
        Perlin { perm, grads }
    }

    fn grad(&self, ix: i64, iy: i64, dx: f64, dy: f64) -> f64 {
        let h = self.perm[self.perm[(ix & 255) as usize] + (iy & 255) as usize];
        let (gx, gy) = self.grads[h];
        gx * dx + gy * dy
    }

    /// Roughly in `[-1, 1]`.
    pub fn noise(&self, x: f64, y: f64) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (ix, iy) = (x0 as i64, y0 as i64);
        let fade = |t: f64| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
        let (u, v) = (fade(fx), fade(fy));
        let n00 = self.grad(ix, iy, fx, fy);
        let n10 = self.grad(ix + 1, iy, fx - 1.0, fy);
        let n01 = self.grad(ix, iy + 1, fx, fy - 1.0);
        let n11 = self.grad(ix + 1, iy + 1, fx - 1.0, fy - 1.0);
        let a = n00 + u * (n10 - n00);
        let b = n01 + u * (n11 - n01);
        std::f64::consts::SQRT_2 * (a + v * (b - a))
    }

    /// Fractal sum over octaves with lacunarity 2, normalised by the total amplitude.
    pub fn fbm(&self, x: f64, y: f64, octaves: usize, gain: f64) -> f64 {
        let (mut sum, mut norm, mut amp, mut freq) = (0.0, 0.0, 1.0, 1.0);
        for o in 0..octaves {
            // Offsets decorrelate the lattice origins of successive octaves.
            let off = 17.31 * o as f64;
            sum += amp * self.noise(x * freq + off, y * freq - off);
            norm += amp;
            amp *= gain;
            freq *= 2.0;
        }
        if norm > 0.0 {
            sum / norm
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotator {
    /// Detection threshold on the (jittered) intensity, in `(0, 1)`.
    pub threshold: f64,
    /// Displacement amplitude as a fraction of the image side.
    pub jitter: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorModel {
    pub annotators: Vec<Annotator>,
}

impl Default for AnnotatorModel {
    /// Two experts (weight 2) and two non-experts (weight 1).
    fn default() -> Self {
        let a = |threshold, jitter, weight| Annotator {
            threshold,
            jitter,
            weight,
        };
        AnnotatorModel {
            annotators: vec![
                a(0.3, 0.006, 2.0),
                a(0.4, 0.008, 2.0),
                a(0.2, 0.015, 1.0),
                a(0.55, 0.02, 1.0),
            ],
        }
    }
}

impl AnnotatorModel {
    pub fn equal(thresholds: &[f64], jitter: f64) -> Self {
        AnnotatorModel {
            annotators: thresholds
                .iter()
                .map(|&threshold| Annotator {
                    threshold,
                    jitter,
                    weight: 1.0,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.annotators.is_empty() {
            return Err(Error::invalid("annotator set is empty"));
        }
        for a in &self.annotators {
            if !(a.threshold > 0.0 && a.threshold < 1.0) {
                return Err(Error::invalid(format!("threshold {} not in (0, 1)", a.threshold)));
            }
            if !(a.weight > 0.0 && a.weight.is_finite()) {
                return Err(Error::invalid(format!("weight {} must be positive", a.weight)));
            }
            if !(a.jitter >= 0.0 && a.jitter.is_finite()) {
                return Err(Error::invalid("jitter must be non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    /// Forces contamination on or off; otherwise drawn with probability `prevalence`.
    pub cirrus_present: Option<bool>,
    pub prevalence: f64,
    /// Mean fraction of pixels covered in contaminated images.
    pub coverage: f64,
    pub coverage_spread: f64,
    /// Envelope frequency in cycles per image.
    pub envelope_frequency: f64,
    /// Width of the envelope edge ramp in units of the envelope's standard deviation.
    pub edge_softness: f64,
    /// Wisp frequency along the dominant orientation, cycles per image.
    pub wisp_frequency: f64,
    /// Ratio of across-filament to along-filament frequency.
    pub anisotropy: f64,
    pub shear: f64,
    pub wisp_gamma: f64,
    pub octaves: usize,
    pub cirrus_amplitude: (f64, f64),
    pub cirrus_strength: (f64, f64),
    /// Stars per 128×128 pixels.
    pub star_density: (f64, f64),
    pub star_amplitude: (f64, f64),
    /// Point-spread sigma in pixels at 128×128, scaled with the image side.
    pub star_sigma: (f64, f64),
    pub background_level: (f64, f64),
    pub background_slope: f64,
    pub background_variation: f64,
    pub read_noise: (f64, f64),
    pub annotators: AnnotatorModel,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            cirrus_present: None,
            prevalence: 0.25,
            coverage: 0.6,
            coverage_spread: 0.12,
            envelope_frequency: 2.0,
            edge_softness: 0.15,
            wisp_frequency: 3.0,
            anisotropy: 5.0,
            shear: 0.35,
            wisp_gamma: 1.6,
            octaves: 5,
            cirrus_amplitude: (0.12, 0.3),
            cirrus_strength: (0.75, 1.0),
            star_density: (10.0, 35.0),
            star_amplitude: (0.1, 2.0),
            star_sigma: (0.6, 1.3),
            background_level: (0.05, 0.2),
            background_slope: 0.12,
            background_variation: 0.1,
            read_noise: (0.01, 0.03),
            annotators: AnnotatorModel::default(),
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.prevalence) {
            return Err(Error::invalid("prevalence must lie in [0, 1]"));
        }
        if !(self.coverage > 0.0 && self.coverage < 1.0) {
            return Err(Error::invalid("coverage must lie in (0, 1)"));
        }
        if self.octaves == 0 {
            return Err(Error::invalid("octaves must be positive"));
        }
        self.annotators.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CirrusSample {
    /// `[size, size]`, clipped to `[0, 1]`.
    pub image: Tensor,
    /// Latent cirrus envelope in `[0, 1]`, `[size, size]`.
    pub intensity: Tensor,
    pub consensus: ConsensusMask,
    pub seed: u64,
    pub cirrus_present: bool,
}

impl CirrusSample {
    pub fn size(&self) -> usize {
        self.image.dim(0)
    }

    /// Fraction of pixels with consensus at or above one half.
    pub fn coverage(&self) -> f64 {
        coverage(self.consensus.y.data(), MAJORITY_MIN)
    }
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn round_f32(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Smooth cirrus envelope covering about `coverage` of the image.
fn cirrus_envelope(rng: &mut ChaCha8Rng, size: usize, coverage: f64, p: &SynthParams) -> Vec<f64> {
    let noise = Perlin::new(rng);
    let s = size as f64;
    let f = p.envelope_frequency;
    let e: Vec<f64> = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64 / s, (i / size) as f64 / s);
            noise.fbm(x * f, y * f, 3, 0.5)
        })
        .collect();
    let mut sorted = e.clone();
    sorted.sort_by(f64::total_cmp);
    let k = (((1.0 - coverage) * sorted.len() as f64) as usize).min(sorted.len() - 1);
    let q = sorted[k];
    let mean = e.iter().sum::<f64>() / e.len() as f64;
    let sd = (e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / e.len() as f64).sqrt();
    let width = (p.edge_softness * sd).max(1e-9);
    e.iter().map(|&v| smoothstep((v - q) / width + 0.5)).collect()
}

/// Oriented filament texture in `[0, 1]`.
fn wisps(rng: &mut ChaCha8Rng, size: usize, p: &SynthParams) -> Vec<f64> {
    let noise = Perlin::new(rng);
    let warp = Perlin::new(rng);
    let theta = rng.gen_range(0.0..std::f64::consts::PI);
    let (c, sn) = (theta.cos(), theta.sin());
    let s = size as f64;
    let f = p.wisp_frequency;
    (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64 / s, (i / size) as f64 / s);
            let u = x * c + y * sn;
            let mut v = -x * sn + y * c;
            v += p.shear * warp.noise(u * 2.0, v * 2.0) / p.anisotropy.max(1.0);
            let w = noise.fbm(u * f, v * f * p.anisotropy, p.octaves, 0.55);
            ((w + 1.0) * 0.5).clamp(0.0, 1.0).powf(p.wisp_gamma)
        })
        .collect()
}

fn background(rng: &mut ChaCha8Rng, size: usize, p: &SynthParams) -> Vec<f64> {
    let noise = Perlin::new(rng);
    let level = uniform(rng, p.background_level);
    let gx = rng.gen_range(-1.0..1.0) * p.background_slope;
    let gy = rng.gen_range(-1.0..1.0) * p.background_slope;
    let var = rng.gen_range(0.0..=1.0) * p.background_variation;
    let s = size as f64;
    (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64 / s, (i / size) as f64 / s);
            level + gx * (x - 0.5) + gy * (y - 0.5) + var * (noise.fbm(x * 1.5, y * 1.5, 2, 0.5) + 1.0) * 0.5
        })
        .collect()
}

fn add_stars(rng: &mut ChaCha8Rng, size: usize, p: &SynthParams, img: &mut [f64]) {
    let scale = size as f64 / 128.0;
    let count = (uniform(rng, p.star_density) * scale * scale).round() as usize;
    let (lo, hi) = p.star_amplitude;
    for _ in 0..count {
        let cx = rng.gen_range(0.0..size as f64);
        let cy = rng.gen_range(0.0..size as f64);
        let amp = (rng.gen_range(lo.ln()..hi.ln())).exp();
        let sigma = uniform(rng, p.star_sigma) * scale;
        let r = (4.0 * sigma).ceil() as i64;
        let (px, py) = (cx as i64, cy as i64);
        for y in (py - r).max(0)..=(py + r).min(size as i64 - 1) {
            for x in (px - r).max(0)..=(px + r).min(size as i64 - 1) {
                let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                img[y as usize * size + x as usize] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
}

/// Generates one `size × size` sample.
pub fn generate_cirrus_sample(seed: u64, size: usize, params: &SynthParams) -> Result<CirrusSample> {
    if size < MIN_SIZE {
        return Err(Error::invalid(format!("sample size must be >= {MIN_SIZE}, got {size}")));
    }
    params.validate()?;
    let present = match params.cirrus_present {
        Some(p) => p,
        None => stream(seed, 0).gen_bool(params.prevalence),
    };
    let n = size * size;
    let mut rng = stream(seed, 1);
    let (intensity, cirrus_layer) = if present {
        let cov = Normal::new(params.coverage, params.coverage_spread.max(0.0))
            .map_err(|e| Error::invalid(e.to_string()))?
            .sample(&mut rng)
            .clamp(0.15, 0.95);
        let strength = uniform(&mut rng, params.cirrus_strength);
        let amp = uniform(&mut rng, params.cirrus_amplitude);
        let env = cirrus_envelope(&mut rng, size, cov, params);
        let tex = wisps(&mut rng, size, params);
        let intensity: Vec<f64> = env.iter().map(|e| (strength * e).clamp(0.0, 1.0)).collect();
        let layer = intensity
            .iter()
            .zip(&tex)
            .map(|(i, w)| amp * i * (0.25 + 0.75 * w))
            .collect();
        (intensity, layer)
    } else {
        (vec![0.0; n], vec![0.0; n])
    };
    let mut img = background(&mut stream(seed, 2), size, params);
    add_stars(&mut stream(seed, 3), size, params, &mut img);
    let mut noise_rng = stream(seed, 4);
    let sigma = uniform(&mut noise_rng, params.read_noise);
    let read = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    for (v, c) in img.iter_mut().zip(&cirrus_layer) {
        *v = (*v + c + read.sample(&mut noise_rng)).clamp(0.0, 1.0);
    }
    let mut image = Tensor::new(&[size, size], img)?;
    let mut intensity = Tensor::new(&[size, size], intensity)?;
    round_f32(&mut image);
    round_f32(&mut intensity);
    let consensus = simulate_consensus(&intensity, &params.annotators, seed)?;
    Ok(CirrusSample {
        image,
        intensity,
        consensus,
        seed,
        cirrus_present: present,
    })
}

fn sample_bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Each annotator thresholds the intensity sampled through its own smooth random
/// displacement field; the consensus is the weight-normalised average of the masks.
pub fn simulate_consensus(intensity: &Tensor, annotators: &AnnotatorModel, seed: u64) -> Result<ConsensusMask> {
    annotators.validate()?;
    let &[h, w] = intensity.shape() else {
        return Err(Error::invalid("intensity must be [H, W]"));
    };
    if intensity.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("intensity must lie in [0, 1]"));
    }
    let side = h.max(w) as f64;
    let plane = intensity.data();
    let masks = annotators
        .annotators
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let mut rng = stream(seed, 16 + k as u64);
            let fx = Perlin::new(&mut rng);
            let fy = Perlin::new(&mut rng);
            let amp = a.jitter * side;
            let data = (0..h * w)
                .map(|i| {
                    let (x, y) = ((i % w) as f64, (i / w) as f64);
                    let (u, v) = (x / side * 3.0, y / side * 3.0);
                    let dx = amp * fx.fbm(u, v, 2, 0.5);
                    let dy = amp * fy.fbm(u, v, 2, 0.5);
                    let s = sample_bilinear(plane, h, w, y + dy, x + dx);
                    (s > a.threshold) as u8 as f64
                })
                .collect();
            Tensor::new(&[h, w], data)
        })
        .collect::<Result<Vec<_>>>()?;
    let weights = annotators.annotators.iter().map(|a| a.weight).collect();
    ConsensusMask::from_annotations(masks, weights)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flips: bool,
    pub rotations: bool,
    /// Largest translation as a fraction of the image side.
    pub max_shift: f64,
    /// Variance of the Gaussian noise added to the image; zero disables it.
    pub noise_variance: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flips: true,
            rotations: true,
            max_shift: 0.1,
            noise_variance: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            flips: false,
            rotations: false,
            max_shift: 0.0,
            noise_variance: 0.0,
        }
    }
}

/// A geometric transform of the last two axes: flips, then counter-clockwise quarter
/// turns, then an integer translation with reflect padding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Transform {
    pub flip_x: bool,
    pub flip_y: bool,
    pub quarter_turns: u8,
    pub shift: (isize, isize),
}

impl Transform {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn sample(rng: &mut impl Rng, cfg: &AugmentConfig, side: usize) -> Self {
        let max = (cfg.max_shift * side as f64).floor() as isize;
        Transform {
            flip_x: cfg.flips && rng.gen_bool(0.5),
            flip_y: cfg.flips && rng.gen_bool(0.5),
            quarter_turns: if cfg.rotations { rng.gen_range(0..4) } else { 0 },
            shift: if max > 0 {
                (rng.gen_range(-max..=max), rng.gen_range(-max..=max))
            } else {
                (0, 0)
            },
        }
    }

    /// Inverse of the flip and rotation part.
    pub fn inverse_orientation(&self) -> Transform {
        // A single flip conjugates a turn into its inverse.
        let k = self.quarter_turns % 4;
        let flips_odd = self.flip_x ^ self.flip_y;
        Transform {
            flip_x: self.flip_x,
            flip_y: self.flip_y,
            quarter_turns: if flips_odd { k } else { (4 - k) % 4 },
            shift: (0, 0),
        }
    }

    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        let n = t.ndim();
        if n < 2 {
            return Err(Error::invalid("transform needs at least two axes"));
        }
        let (h, w) = (t.dim(n - 2), t.dim(n - 1));
        let k = self.quarter_turns % 4;
        if k % 2 == 1 && h != w {
            return Err(Error::invalid("odd quarter turns need square planes"));
        }
        let planes = t.numel() / (h * w).max(1);
        let (dy, dx) = self.shift;
        let reflect = |i: isize, n: usize| -> usize {
            let n = n as isize;
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let m = i.rem_euclid(period);
            (if m < n { m } else { period - m }) as usize
        };
        let mut out = vec![0.0; t.numel()];
        for p in 0..planes {
            let src = &t.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    // Pull back through the translation, then the rotation, then the flips.
                    let ty = reflect(y as isize - dy, h);
                    let tx = reflect(x as isize - dx, w);
                    let (mut sy, mut sx) = (ty, tx);
                    for _ in 0..k {
                        // Inverse of one counter-clockwise turn: (y, x) <- (x, w-1-y).
                        let (ny, nx) = (sx, w - 1 - sy);
                        sy = ny;
                        sx = nx;
                    }
                    if self.flip_y {
                        sy = h - 1 - sy;
                    }
                    if self.flip_x {
                        sx = w - 1 - sx;
                    }
                    dst[y * w + x] = src[sy * w + sx];
                }
            }
        }
        Tensor::new(t.shape(), out)
    }
}

/// Adds `N(0, variance)` to every element.
pub fn add_noise(image: &Tensor, variance: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if variance == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0, variance.sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = image.clone();
    out.data_mut().iter_mut().for_each(|v| *v += normal.sample(rng));
    Ok(out)
}

/// Applies one random geometric transform to both tensors and noise to the image only.
pub fn augment(image: &Tensor, mask: &Tensor, rng: &mut impl Rng, cfg: &AugmentConfig) -> Result<(Tensor, Tensor)> {
    if image.ndim() < 2 || mask.ndim() < 2 || image.shape()[image.ndim() - 2..] != mask.shape()[mask.ndim() - 2..] {
        return Err(Error::shape("augment", image.shape(), mask.shape()));
    }
    let side = image.dim(image.ndim() - 1);
    let tr = Transform::sample(rng, cfg, side);
    let img = add_noise(&tr.apply(image)?, cfg.noise_variance, rng)?;
    Ok((img, tr.apply(mask)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitFractions {
    /// `train = round(n·train)`, `val = round(n·val)`, `test` takes the remainder.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize)> {
        let total = self.train + self.val + self.test;
        if [self.train, self.val, self.test].iter().any(|f| *f < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("split fractions must be non-negative and sum to 1"));
        }
        let train = ((n as f64 * self.train).round() as usize).min(n);
        let val = ((n as f64 * self.val).round() as usize).min(n - train);
        Ok((train, val, n - train - val))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
    pub split: SplitFractions,
    pub params: SynthParams,
}

impl DatasetSpec {
    pub fn new(n: usize, size: usize, seed: u64) -> Self {
        DatasetSpec {
            n,
            size,
            seed,
            split: SplitFractions::default(),
            params: SynthParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub id: usize,
    pub seed: u64,
    pub split: Split,
    pub coverage: f64,
    pub cirrus: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

/// SplitMix64 of the dataset seed and sample index.
pub fn sample_seed(dataset_seed: u64, id: usize) -> u64 {
    let mut z = dataset_seed ^ (id as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_path(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("sample_{id:05}.gsa"))
}

/// Split assignment for every index: a seeded shuffle cut by [`SplitFractions::sizes`].
pub fn assign_splits(spec: &DatasetSpec) -> Result<Vec<Split>> {
    let (train, val, _) = spec.split.sizes(spec.n)?;
    let mut order: Vec<usize> = (0..spec.n).collect();
    order.shuffle(&mut stream(spec.seed, 99));
    let mut out = vec![Split::Test; spec.n];
    for (rank, &id) in order.iter().enumerate() {
        out[id] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

pub fn sample_to_container(s: &CirrusSample) -> ArrayFile {
    let mut f = ArrayFile::new();
    f.insert("image", Array::f32(&s.image));
    f.insert("intensity", Array::f32(&s.intensity));
    f.insert("consensus", Array::f64(&s.consensus.y));
    let c = &s.consensus;
    if !c.annotations.is_empty() {
        let mut shape = vec![c.annotations.len()];
        shape.extend_from_slice(c.y.shape());
        let bytes = c.annotations.iter().flat_map(|m| m.data().iter().map(|&v| (v >= 0.5) as u8)).collect();
        f.insert("annotations", Array { shape, data: ArrayData::U8(bytes) });
        let w = Tensor::new(&[c.weights.len()], c.weights.clone()).expect("weights");
        f.insert("annotator_weights", Array::f64(&w));
    }
    let meta = serde_json::json!({ "seed": s.seed, "cirrus_present": s.cirrus_present });
    f.insert("meta", Array::bytes(meta.to_string().as_bytes()));
    f
}

pub fn sample_from_container(f: &ArrayFile) -> Result<CirrusSample> {
    let meta: serde_json::Value = serde_json::from_slice(
        f.get("meta")
            .and_then(|a| a.as_bytes())
            .ok_or_else(|| Error::invalid("sample has no metadata"))?,
    )?;
    let mut consensus = ConsensusMask::from_probabilities(f.tensor("consensus")?)?;
    if let (Some(a), Ok(w)) = (f.get("annotations"), f.tensor("annotator_weights")) {
        let bytes = a.as_bytes().ok_or_else(|| Error::invalid("annotations must be bytes"))?;
        let plane = consensus.y.numel();
        if a.shape.len() < 2 || a.shape[0] != w.numel() || bytes.len() != plane * w.numel() {
            return Err(Error::invalid("annotations do not match the consensus map"));
        }
        consensus.annotations = bytes
            .chunks(plane)
            .map(|m| Tensor::new(consensus.y.shape(), m.iter().map(|&b| b as f64).collect()))
            .collect::<Result<_>>()?;
        consensus.weights = w.into_data();
    }
    Ok(CirrusSample {
        image: f.tensor("image")?,
        intensity: f.tensor("intensity")?,
        consensus,
        seed: meta["seed"].as_u64().ok_or_else(|| Error::invalid("bad sample seed"))?,
        cirrus_present: meta["cirrus_present"].as_bool().unwrap_or(false),
    })
}

/// Generates every sample of `spec` in index order, using all available cores.
pub fn generate_samples(spec: &DatasetSpec) -> Result<Vec<CirrusSample>> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(spec.n.max(1));
    let ids: Vec<usize> = (0..spec.n).collect();
    let chunk = spec.n.div_ceil(threads).max(1);
    let parts: Vec<Result<Vec<CirrusSample>>> = std::thread::scope(|s| {
        let handles: Vec<_> = ids
            .chunks(chunk)
            .map(|c| {
                s.spawn(move || {
                    c.iter()
                        .map(|&id| generate_cirrus_sample(sample_seed(spec.seed, id), spec.size, &spec.params))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("generator thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(spec.n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Writes `spec.n` samples and a manifest into `dir`.
pub fn make_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Manifest> {
    if spec.n == 0 {
        return Err(Error::invalid("dataset needs at least one sample"));
    }
    spec.params.validate()?;
    if spec.size < MIN_SIZE {
        return Err(Error::invalid(format!("sample size must be >= {MIN_SIZE}")));
    }
    let splits = assign_splits(spec)?;
    fs::create_dir_all(dir)?;
    let samples = generate_samples(spec)?;
    let mut records = Vec::with_capacity(spec.n);
    for (id, s) in samples.iter().enumerate() {
        sample_to_container(s).write(&sample_path(dir, id))?;
        records.push(ManifestRecord {
            id,
            seed: s.seed,
            split: splits[id],
            coverage: s.coverage(),
            cirrus: s.cirrus_present,
        });
    }
    let manifest = Manifest {
        spec: spec.clone(),
        records,
    };
    fs::write(dir.join(MANIFEST_FILE), manifest.render()?)?;
    Ok(manifest)
}

impl Manifest {
    pub fn render(&self) -> Result<String> {
        let s = &self.spec;
        let (tr, va, te) = s.split.sizes(s.n)?;
        let contaminated: Vec<&ManifestRecord> = self.records.iter().filter(|r| r.cirrus).collect();
        let mean_cov = if contaminated.is_empty() {
            0.0
        } else {
            contaminated.iter().map(|r| r.coverage).sum::<f64>() / contaminated.len() as f64
        };
        let mut out = String::new();
        out.push_str("# gridseg synthetic cirrus dataset\n");
        out.push_str(&format!("# spec={}\n", serde_json::to_string(s)?));
        out.push_str(&format!(
            "# split rounding: train=round(n*{}) val=round(n*{}) test=n-train-val -> {tr}/{va}/{te}\n",
            s.split.train, s.split.val
        ));
        out.push_str(&format!(
            "# prevalence={:.4} contaminated_coverage_mean={:.4}\n",
            contaminated.len() as f64 / self.records.len().max(1) as f64,
            mean_cov
        ));
        out.push_str("id\tseed\tsplit\tcoverage\tcirrus\n");
        for r in &self.records {
            out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", r.id, r.seed, r.split, r.coverage, r.cirrus as u8));
        }
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::invalid(format!("manifest: {m}"));
        let mut spec = None;
        let mut records = Vec::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("# spec=") {
                spec = Some(serde_json::from_str::<DatasetSpec>(rest)?);
                continue;
            }
            if line.starts_with('#') || line.starts_with("id\t") || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad(format!("expected 5 fields in {line:?}")));
            }
            records.push(ManifestRecord {
                id: f[0].parse().map_err(|_| bad(format!("bad id {:?}", f[0])))?,
                seed: f[1].parse().map_err(|_| bad(format!("bad seed {:?}", f[1])))?,
                split: f[2].parse()?,
                coverage: f[3].parse().map_err(|_| bad(format!("bad coverage {:?}", f[3])))?,
                cirrus: f[4] == "1",
            });
        }
        Ok(Manifest {
            spec: spec.ok_or_else(|| bad("missing spec line".into()))?,
            records,
        })
    }

    pub fn ids(&self, split: Split) -> Vec<usize> {
        self.records.iter().filter(|r| r.split == split).map(|r| r.id).collect()
    }
}

/// A dataset directory written by [`make_dataset`].
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| {
            Error::invalid(format!("cannot read dataset manifest {}: {e}", path.display()))
        })?;
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest: Manifest::parse(&text)?,
        })
    }

    pub fn load(&self, id: usize) -> Result<CirrusSample> {
        sample_from_container(&ArrayFile::read(&sample_path(&self.dir, id))?)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<CirrusSample>> {
        self.manifest.ids(split).into_iter().map(|id| self.load(id)).collect()
    }
}
