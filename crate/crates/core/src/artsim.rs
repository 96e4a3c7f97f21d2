//! Seeded simulation of MR-style artifacts on 2-D slices.
//!
//! Every operation is a pure function of its inputs and seed. Severity 0 is
//! the identity (up to DFT round-off for motion).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volio::{nearest_rank, sorted_copy, SliceImage, Volume, VolError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("severity {0} outside [0, 1]")]
    SeverityOutOfRange(f64),
    #[error("compose needs at least one child")]
    EmptyCompose,
    #[error("{0:?} takes no children")]
    UnexpectedChildren(CorruptionKind),
    #[error(transparent)]
    Volume(#[from] VolError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionKind {
    Noise,
    Motion,
    Bias,
    Wraparound,
    Compose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: f64,
    pub seed: u64,
    #[serde(default)]
    pub children: Vec<CorruptionSpec>,
}

impl CorruptionSpec {
    pub fn leaf(kind: CorruptionKind, severity: f64, seed: u64) -> Self {
        Self {
            kind,
            severity,
            seed,
            children: Vec::new(),
        }
    }

    /// A compose node. Its own severity is the maximum over its children.
    pub fn compose(children: Vec<CorruptionSpec>) -> Self {
        let severity = children.iter().map(|c| c.severity).fold(0.0, f64::max);
        Self {
            kind: CorruptionKind::Compose,
            severity,
            seed: 0,
            children,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.severity) {
            return Err(SimError::SeverityOutOfRange(self.severity));
        }
        match self.kind {
            CorruptionKind::Compose if self.children.is_empty() => Err(SimError::EmptyCompose),
            CorruptionKind::Compose => self.children.iter().try_for_each(|c| c.validate()),
            kind if !self.children.is_empty() => Err(SimError::UnexpectedChildren(kind)),
            _ => Ok(()),
        }
    }

    /// Copy with every noise/motion leaf re-seeded from `salt`. Bias and
    /// wrap-around keep their seeds so the field stays consistent across a
    /// stack of slices.
    pub fn reseeded(&self, salt: u64) -> Self {
        let mut out = self.clone();
        match out.kind {
            CorruptionKind::Noise | CorruptionKind::Motion => {
                out.seed = mix_seed(self.seed, salt);
            }
            CorruptionKind::Compose => {
                out.children = self.children.iter().map(|c| c.reseeded(salt)).collect();
            }
            _ => {}
        }
        out
    }
}

/// SplitMix64 finalizer over `seed ^ salt`.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_severity(severity: f64) -> Result<(), SimError> {
    if (0.0..=1.0).contains(&severity) {
        Ok(())
    } else {
        Err(SimError::SeverityOutOfRange(severity))
    }
}

/// Additive Gaussian noise with sigma = 0.25 * severity * (p99 - p1).
pub fn add_noise(image: &SliceImage, severity: f64, seed: u64) -> Result<SliceImage, SimError> {
    check_severity(severity)?;
    let sigma = noise_sigma(image, severity);
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let (min, max) = min_max(image.pixels());
    let (lo, hi) = (min - 3.0 * sigma, max + 3.0 * sigma);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    let pixels = image
        .pixels()
        .iter()
        .map(|&p| (p as f64 + normal.sample(&mut rng)).clamp(lo, hi) as f32)
        .collect();
    Ok(image.with_pixels(pixels))
}

pub fn noise_sigma(image: &SliceImage, severity: f64) -> f64 {
    let sorted = sorted_copy(image.pixels());
    let range = (nearest_rank(&sorted, 0.99) - nearest_rank(&sorted, 0.01)) as f64;
    0.25 * severity * range
}

fn min_max(px: &[f32]) -> (f64, f64) {
    px.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| {
        (lo.min(p as f64), hi.max(p as f64))
    })
}

/// Signed frequency of DFT bin `k` out of `n`.
fn signed_freq(k: usize, n: usize) -> f64 {
    if k < n.div_ceil(2) {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

struct Fft2 {
    h: usize,
    w: usize,
    planner: FftPlanner<f64>,
}

impl Fft2 {
    fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            planner: FftPlanner::new(),
        }
    }

    fn transform(&mut self, data: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.h, self.w);
        let row = if inverse {
            self.planner.plan_fft_inverse(w)
        } else {
            self.planner.plan_fft_forward(w)
        };
        row.process(data);
        let col = if inverse {
            self.planner.plan_fft_inverse(h)
        } else {
            self.planner.plan_fft_forward(h)
        };
        let mut buf = vec![Complex64::default(); h];
        for c in 0..w {
            for r in 0..h {
                buf[r] = data[r * w + c];
            }
            col.process(&mut buf);
            for r in 0..h {
                data[r * w + c] = buf[r];
            }
        }
        if inverse {
            let scale = 1.0 / (h * w) as f64;
            data.iter_mut().for_each(|v| *v *= scale);
        }
    }
}

/// Rows of k-space that motion never touches: |ky| <= floor(0.04 * H),
/// i.e. the central ~8% including DC.
pub fn protected_rows(height: usize) -> impl Fn(usize) -> bool {
    let half = (0.04 * height as f64).floor();
    move |row| signed_freq(row, height).abs() <= half
}

/// In-plane rigid motion as per-line k-space phase errors. Selects
/// round(0.3 * severity * H) phase-encode lines outside the protected
/// center and shifts each by an independent random translation of at most
/// 5 * severity pixels per axis. Returns the real part of the inverse
/// transform, which keeps the DC term and hence the mean exactly.
pub fn add_motion(image: &SliceImage, severity: f64, seed: u64) -> Result<SliceImage, SimError> {
    check_severity(severity)?;
    let (h, w) = (image.height(), image.width());
    let mut k: Vec<Complex64> = image
        .pixels()
        .iter()
        .map(|&p| Complex64::new(p as f64, 0.0))
        .collect();
    let mut fft = Fft2::new(h, w);
    fft.transform(&mut k, false);

    let protected = protected_rows(h);
    let mut eligible: Vec<usize> = (0..h).filter(|&r| !protected(r)).collect();
    let n_corrupt = ((0.3 * severity * h as f64).round() as usize).min(eligible.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    let max_shift = 5.0 * severity;
    for &row in &eligible[..n_corrupt] {
        let dx = rng.random_range(-1.0..=1.0) * max_shift;
        let dy = rng.random_range(-1.0..=1.0) * max_shift;
        let ky = signed_freq(row, h);
        for col in 0..w {
            let kx = signed_freq(col, w);
            let phase = -2.0 * std::f64::consts::PI * (kx * dx / w as f64 + ky * dy / h as f64);
            k[row * w + col] *= Complex64::from_polar(1.0, phase);
        }
    }

    fft.transform(&mut k, true);
    Ok(image.with_pixels(k.iter().map(|c| c.re as f32).collect()))
}

/// The multiplicative field 1 + severity * g(x, y) with g a seeded random
/// quadratic over normalized coordinates, rescaled to [-0.5, 0.5].
pub fn bias_field(height: usize, width: usize, severity: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c: [f64; 5] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
    let norm = |i: usize, n: usize| {
        if n > 1 {
            2.0 * i as f64 / (n - 1) as f64 - 1.0
        } else {
            0.0
        }
    };
    let mut g = Vec::with_capacity(height * width);
    for r in 0..height {
        let y = norm(r, height);
        for col in 0..width {
            let x = norm(col, width);
            g.push(c[0] * x + c[1] * y + c[2] * x * x + c[3] * x * y + c[4] * y * y);
        }
    }
    let (lo, hi) = g
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    g.iter()
        .map(|&v| {
            let unit = if span > 0.0 { (v - lo) / span - 0.5 } else { 0.0 };
            1.0 + severity * unit
        })
        .collect()
}

pub fn add_bias_field(image: &SliceImage, severity: f64, seed: u64) -> Result<SliceImage, SimError> {
    check_severity(severity)?;
    if severity == 0.0 {
        return Ok(image.clone());
    }
    let field = bias_field(image.height(), image.width(), severity, seed);
    let pixels = image
        .pixels()
        .iter()
        .zip(&field)
        .map(|(&p, &f)| (p as f64 * f) as f32)
        .collect();
    Ok(image.with_pixels(pixels))
}

/// Number of rows folded by wrap-around: round(0.25 * severity * H).
pub fn wrap_rows(height: usize, severity: f64) -> usize {
    (severity * 0.25 * height as f64).round() as usize
}

/// Aliasing along the phase-encode (row) direction: the top k rows are
/// added, at half weight, onto the bottom k rows and vice versa.
pub fn add_wraparound(image: &SliceImage, severity: f64) -> Result<SliceImage, SimError> {
    check_severity(severity)?;
    let (h, w) = (image.height(), image.width());
    let k = wrap_rows(h, severity).min(h);
    let src = image.pixels();
    let mut out = src.to_vec();
    for r in 0..k {
        let bottom = h - k + r;
        for c in 0..w {
            out[bottom * w + c] += 0.5 * src[r * w + c];
            out[r * w + c] += 0.5 * src[bottom * w + c];
        }
    }
    Ok(image.with_pixels(out))
}

pub fn corrupt(image: &SliceImage, spec: &CorruptionSpec) -> Result<SliceImage, SimError> {
    spec.validate()?;
    apply(image, spec)
}

fn apply(image: &SliceImage, spec: &CorruptionSpec) -> Result<SliceImage, SimError> {
    match spec.kind {
        CorruptionKind::Noise => add_noise(image, spec.severity, spec.seed),
        CorruptionKind::Motion => add_motion(image, spec.severity, spec.seed),
        CorruptionKind::Bias => add_bias_field(image, spec.severity, spec.seed),
        CorruptionKind::Wraparound => add_wraparound(image, spec.severity),
        CorruptionKind::Compose => spec
            .children
            .iter()
            .try_fold(image.clone(), |img, child| apply(&img, child)),
    }
}

/// Applies `spec` to every axial plane, re-seeding noise and motion per
/// plane so the stack is not a copy of one realization.
pub fn corrupt_volume(volume: &Volume, spec: &CorruptionSpec) -> Result<Volume, SimError> {
    spec.validate()?;
    let mut err = None;
    let out = volume.map_axial(|z, plane| match apply(&plane, &spec.reseeded(z as u64)) {
        Ok(p) => p,
        Err(e) => {
            err.get_or_insert(e);
            plane
        }
    })?;
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}
