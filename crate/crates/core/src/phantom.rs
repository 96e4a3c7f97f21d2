//! Synthetic head-like phantoms: an outer shell, a tissue interior and a
//! handful of internal ellipsoids, drawn in one of several cohort styles
//! that vary contrast and size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::volio::{Result, Volume};

/// Intensity and geometry profile shared by a group of phantoms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortStyle {
    pub shell: f32,
    pub tissue: f32,
    /// Range the internal structure intensities are drawn from.
    pub structures: (f32, f32),
    pub size: f64,
    /// Baseline acquisition noise as a fraction of the brightest tissue.
    pub noise: f64,
}

pub const COHORTS: [CohortStyle; 4] = [
    CohortStyle { shell: 0.9, tissue: 0.55, structures: (0.2, 0.45), size: 1.0, noise: 0.01 },
    CohortStyle { shell: 0.35, tissue: 0.6, structures: (0.75, 1.0), size: 0.92, noise: 0.015 },
    CohortStyle { shell: 1.0, tissue: 0.7, structures: (0.3, 0.9), size: 0.85, noise: 0.01 },
    CohortStyle { shell: 0.6, tissue: 0.45, structures: (0.1, 0.3), size: 1.05, noise: 0.02 },
];

#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: Volume,
    pub cohort: usize,
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
}

impl Ellipsoid {
    fn radius2(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|i| ((p[i] - self.center[i]) / self.axes[i]).powi(2)).sum()
    }
}

/// Draws one phantom. Deterministic given `seed`.
pub fn generate(dims: [usize; 3], seed: u64) -> Result<Phantom> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cohort = rng.random_range(0..COHORTS.len());
    let style = COHORTS[cohort];

    let jitter = |rng: &mut ChaCha8Rng, spread: f64| 1.0 + rng.random_range(-spread..spread);
    let head = Ellipsoid {
        center: [0.5 + rng.random_range(-0.04..0.04), 0.5 + rng.random_range(-0.04..0.04), 0.5],
        axes: [
            0.38 * style.size * jitter(&mut rng, 0.08),
            0.44 * style.size * jitter(&mut rng, 0.08),
            0.46 * style.size * jitter(&mut rng, 0.05),
        ],
    };
    let shell_inner = 0.86f64.powi(2);

    let n_structures = rng.random_range(3..=6);
    let structures: Vec<(Ellipsoid, f32)> = (0..n_structures)
        .map(|_| {
            let offset: [f64; 3] = std::array::from_fn(|i| rng.random_range(-0.45..0.45) * head.axes[i]);
            let e = Ellipsoid {
                center: std::array::from_fn(|i| head.center[i] + offset[i]),
                axes: std::array::from_fn(|i| rng.random_range(0.1..0.3) * head.axes[i]),
            };
            (e, rng.random_range(style.structures.0..style.structures.1))
        })
        .collect();

    let peak = style.shell.max(style.tissue).max(style.structures.1) as f64;
    let noise = Normal::new(0.0, style.noise * peak).expect("noise scale is finite");
    let norm = |i: usize, n: usize| (i as f64 + 0.5) / n as f64;
    let volume = Volume::from_fn(dims, [1.0; 3], |x, y, z| {
        let p = [norm(x, dims[0]), norm(y, dims[1]), norm(z, dims[2])];
        let r2 = head.radius2(p);
        let clean = if r2 >= 1.0 {
            0.0
        } else if r2 >= shell_inner {
            style.shell
        } else {
            structures
                .iter()
                .rev()
                .find(|(e, _)| e.radius2(p) < 1.0)
                .map_or(style.tissue, |&(_, v)| v)
        };
        ((clean as f64 + noise.sample(&mut rng)) as f32).max(0.0)
    })?;
    Ok(Phantom { volume, cohort })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_bounded() {
        let a = generate([32, 32, 16], 4).unwrap();
        let b = generate([32, 32, 16], 4).unwrap();
        assert_eq!(a.volume, b.volume);
        let c = generate([32, 32, 16], 5).unwrap();
        assert_ne!(a.volume, c.volume);
        assert!(a.volume.voxels().iter().all(|v| v.is_finite() && *v >= 0.0 && *v < 1.2));
    }

    #[test]
    fn head_is_centered_and_background_dark() {
        let p = generate([48, 48, 24], 1).unwrap();
        let v = &p.volume;
        assert!(v.get(24, 24, 12) > 0.05);
        let corner = [v.get(0, 0, 0), v.get(47, 47, 23), v.get(0, 47, 12)];
        assert!(corner.iter().all(|&c| c < 0.15), "{corner:?}");
    }

    #[test]
    fn all_cohorts_appear() {
        let mut seen = [false; COHORTS.len()];
        for seed in 0..40 {
            seen[generate([8, 8, 4], seed).unwrap().cohort] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
