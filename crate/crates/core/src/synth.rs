//! Seeded synthetic scenes for tests, benchmarks and demos.
//!
//! A [`Scene`] is a smooth RGB radiance defined on the unit sphere of view
//! directions: a sum of plane waves in direction space plus a few angular
//! blobs, squashed into `[0, 255]`. Rendering it through a pinhole camera at
//! any orientation gives views related exactly by rotation homographies, up
//! to bilinear interpolation error, which makes it an oracle for the
//! rotation solver, the basin sweeps and the mosaic tracker.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::par;
use crate::tensor::{FeatureVolume, Image};
use crate::warp::{so3_exp, Intrinsics};

/// Gamma, gain and bias of the standard illumination perturbation.
pub const ILLUMINATION_GAMMA: f64 = 1.8;
pub const ILLUMINATION_GAIN: f64 = 0.7;
pub const ILLUMINATION_BIAS: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneConfig {
    pub waves: usize,
    pub blobs: usize,
    /// Spatial frequency range of the waves, in radians of phase per unit
    /// of direction-vector change.
    pub min_frequency: f64,
    pub max_frequency: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            waves: 48,
            blobs: 24,
            min_frequency: 3.0,
            max_frequency: 60.0,
        }
    }
}

#[derive(Clone, Debug)]
struct Wave {
    k: Vector3<f64>,
    phase: f64,
    amp: [f64; 3],
}

#[derive(Clone, Debug)]
struct Blob {
    centre: Vector3<f64>,
    /// `1 / (2 sigma^2)` in units of `1 - cos(angle)`.
    sharpness: f64,
    amp: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct Scene {
    waves: Vec<Wave>,
    blobs: Vec<Blob>,
    scale: f64,
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

impl Scene {
    pub fn new(seed: u64) -> Self {
        Self::with_config(seed, SceneConfig::default())
    }

    pub fn with_config(seed: u64, cfg: SceneConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = (cfg.min_frequency.ln(), cfg.max_frequency.ln());
        let waves: Vec<Wave> = (0..cfg.waves)
            .map(|_| {
                let f = rng.random_range(lo..hi).exp();
                let k = unit_vector(&mut rng) * f;
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let base = 1.0 / f.sqrt();
                let amp = [0; 3].map(|_| base * rng.random_range(-1.0..1.0));
                Wave { k, phase, amp }
            })
            .collect();
        let blobs: Vec<Blob> = (0..cfg.blobs)
            .map(|_| {
                let centre = unit_vector(&mut rng);
                let sigma: f64 = rng.random_range(0.05..0.25);
                let amp = [0; 3].map(|_| rng.random_range(-1.0..1.0) * 0.4);
                Blob {
                    centre,
                    sharpness: 1.0 / (sigma * sigma),
                    amp,
                }
            })
            .collect();
        // Normalize by the RMS of the wave sum so the squashing keeps most
        // values away from saturation.
        let power: f64 = waves
            .iter()
            .map(|w| w.amp.iter().map(|a| a * a).sum::<f64>() / 6.0)
            .sum();
        let scale = 1.0 / power.sqrt().max(1e-9);
        Self { waves, blobs, scale }
    }

    /// RGB radiance in `[0, 255]` seen along direction `d` (any length).
    pub fn radiance(&self, d: &Vector3<f64>) -> [f64; 3] {
        let d = d.normalize();
        let mut v = [0.0f64; 3];
        for w in &self.waves {
            let s = (w.k.dot(&d) + w.phase).sin();
            for c in 0..3 {
                v[c] += w.amp[c] * s;
            }
        }
        for b in &self.blobs {
            let g = (-(1.0 - b.centre.dot(&d)) * b.sharpness).exp();
            for c in 0..3 {
                v[c] += b.amp[c] * g * 2.0;
            }
        }
        v.map(|x| 255.0 / (1.0 + (-0.9 * x * self.scale).exp()))
    }

    /// Renders the view of a camera with world-from-camera rotation `r_wc`.
    pub fn render(&self, r_wc: &Matrix3<f64>, k: &Intrinsics, width: usize, height: usize) -> Image {
        let rows = par::map_range(height, |y| {
            let mut row = vec![[0.0f32; 3]; width];
            for (x, px) in row.iter_mut().enumerate() {
                let d = r_wc * k.unproject([x as f64, y as f64]);
                let v = self.radiance(&d);
                *px = v.map(|c| c as f32);
            }
            row
        });
        FeatureVolume::from_fn(width, height, 3, |c, x, y| rows[y][x][c])
    }
}

/// `clamp(gain * 255 * (v / 255)^gamma + bias, 0, 255)` per sample.
pub fn illumination(img: &Image, gamma: f64, gain: f64, bias: f64) -> Image {
    img.map(|v| {
        let n = (v as f64 / 255.0).max(0.0);
        (gain * 255.0 * n.powf(gamma) + bias).clamp(0.0, 255.0) as f32
    })
}

/// The standard gamma 1.8, gain 0.7, bias +20 perturbation.
pub fn standard_illumination(img: &Image) -> Image {
    illumination(img, ILLUMINATION_GAMMA, ILLUMINATION_GAIN, ILLUMINATION_BIAS)
}

/// Rotation vector with uniformly random axis and magnitude uniform in
/// `[0, max_angle]`.
pub fn random_rotation(rng: &mut impl Rng, max_angle: f64) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n: f64 = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n * rng.random_range(0.0..=max_angle);
        }
    }
}

/// A rotation about the camera's vertical axis (pan) by `angle` radians.
pub fn pan(angle: f64) -> Matrix3<f64> {
    so3_exp(&Vector3::new(0.0, angle, 0.0))
}

/// Smooth random image in pixel coordinates: a handful of low-frequency
/// sinusoids per channel with wavelengths of roughly 10-60 pixels.
pub fn smooth_image(seed: u64, width: usize, height: usize, channels: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let terms: Vec<Vec<(f64, f64, f64, f64)>> = (0..channels)
        .map(|_| {
            (0..6)
                .map(|_| {
                    let wl = rng.random_range(10.0..60.0);
                    let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    let f = std::f64::consts::TAU / wl;
                    (
                        f * th.cos(),
                        f * th.sin(),
                        rng.random_range(0.0..std::f64::consts::TAU),
                        rng.random_range(10.0..40.0),
                    )
                })
                .collect()
        })
        .collect();
    FeatureVolume::from_fn(width, height, channels, |c, x, y| {
        let v: f64 = terms[c]
            .iter()
            .map(|(kx, ky, ph, a)| a * (kx * x as f64 + ky * y as f64 + ph).sin())
            .sum();
        (128.0 + v) as f32
    })
}
