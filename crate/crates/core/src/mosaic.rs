//! Rotation-only tracking against a keyframe map, and equirectangular
//! panorama rendering.
//!
//! Each keyframe keeps its absolute rotation `R_wk` (world from keyframe),
//! the working RGB image and a prepared [`Aligner`] for its pyramid. A new
//! frame is aligned against the keyframe closest to the current estimate.
//! With the keyframe as template, the solved warp is `R = R_wc^T R_wk`, so
//! the frame's rotation is recovered as `R_wc = R_wk R^T`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::featext::PyramidKind;
use crate::lk::{mean_cost, Aligner, Schedule, SolverConfig, SolverError, Termination};
use crate::par;
use crate::tensor::{BilinearTap, FeatureVolume, Image};
use crate::warp::{angular_distance, Intrinsics, RotationWarp, TranslationWarp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    /// Spawn a keyframe once the camera is this far (radians) from every
    /// existing keyframe.
    pub spawn_threshold: f64,
    /// Tracking is lost when the final cost exceeds this multiple of the
    /// keyframe's noise floor.
    pub lost_cost_ratio: f64,
    /// Pyramid levels to align, coarse to fine; `None` runs all of them.
    pub levels: Option<Vec<usize>>,
    pub iterations_per_level: usize,
    pub convergence_epsilon: f64,
    pub min_valid_fraction: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            spawn_threshold: 0.35,
            lost_cost_ratio: 10.0,
            levels: None,
            iterations_per_level: crate::lk::DEFAULT_ITERATIONS_PER_LEVEL,
            convergence_epsilon: 1e-7,
            min_valid_fraction: 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackStatus {
    Tracking,
    Lost,
}

#[derive(Clone, Debug)]
pub struct Keyframe {
    pub id: usize,
    pub rotation: Matrix3<f64>,
    pub image: Image,
    /// Mean squared difference between the finest tracked level and itself
    /// shifted by half a pixel in x and y.
    pub noise_floor: f64,
    aligner: Aligner<RotationWarp>,
}

impl Keyframe {
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation * Vector3::z()
    }
}

/// One line of the trajectory log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub rotation_axis_angle: [f64; 3],
    pub reference_keyframe: usize,
    pub status: TrackStatus,
    /// Final cost per valid pixel; absent for the bootstrap frame and for
    /// frames that failed to align.
    pub cost: Option<f64>,
}

pub struct Tracker {
    kind: PyramidKind,
    k: Intrinsics,
    config: TrackerConfig,
    keyframes: Vec<Keyframe>,
    r_wc: Matrix3<f64>,
    reference: usize,
    status: TrackStatus,
    frames: usize,
}

impl Tracker {
    /// `k` describes the camera at the working resolution of `kind`.
    pub fn new(kind: PyramidKind, k: Intrinsics, config: TrackerConfig) -> Self {
        Self {
            kind,
            k,
            config,
            keyframes: Vec::new(),
            r_wc: Matrix3::identity(),
            reference: 0,
            status: TrackStatus::Tracking,
            frames: 0,
        }
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.r_wc
    }

    pub fn status(&self) -> TrackStatus {
        self.status
    }

    pub fn reference_keyframe(&self) -> usize {
        self.reference
    }

    fn nearest_keyframe(&self, r: &Matrix3<f64>) -> (usize, f64) {
        self.keyframes
            .iter()
            .map(|kf| (kf.id, angular_distance(&kf.rotation, r)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .expect("tracker has a keyframe")
    }

    fn add_keyframe(&mut self, image: Image, rotation: Matrix3<f64>) -> Result<()> {
        let pyr = self.kind.build(&image)?;
        let schedule = match &self.config.levels {
            Some(l) => Schedule { levels: l.clone() },
            None => Schedule::all(&pyr),
        };
        let finest = *schedule
            .levels
            .last()
            .ok_or_else(|| SolverError::InvalidSchedule("empty".into()))?;
        let solver = SolverConfig {
            convergence_epsilon: self.config.convergence_epsilon,
            min_valid_fraction: self.config.min_valid_fraction,
            ..SolverConfig::uniform(schedule.len(), self.config.iterations_per_level)
        };
        let aligner = Aligner::new(&pyr, &RotationWarp::identity(self.k), schedule, solver)?;
        let level = pyr.level(finest);
        let (noise_floor, _) = mean_cost(level, level, &TranslationWarp::new(0.5, 0.5))?;
        self.keyframes.push(Keyframe {
            id: self.keyframes.len(),
            rotation,
            image,
            noise_floor,
            aligner,
        });
        Ok(())
    }

    fn record(&self, cost: Option<f64>) -> FrameRecord {
        let w = crate::warp::so3_log(&self.r_wc);
        FrameRecord {
            frame: self.frames - 1,
            rotation_axis_angle: [w.x, w.y, w.z],
            reference_keyframe: self.reference,
            status: self.status,
            cost,
        }
    }

    /// Tracks one RGB frame. The first frame becomes the bootstrap keyframe
    /// at identity. Once lost, the tracker stays lost and keeps its last
    /// pose.
    pub fn track(&mut self, frame: &Image) -> Result<FrameRecord> {
        self.frames += 1;
        let working = self.kind.working_image(frame);
        if self.keyframes.is_empty() {
            self.add_keyframe(working, Matrix3::identity())?;
            self.reference = 0;
            return Ok(self.record(None));
        }
        if self.status == TrackStatus::Lost {
            return Ok(self.record(None));
        }
        let (kid, _) = self.nearest_keyframe(&self.r_wc);
        self.reference = kid;
        let pyr = self.kind.build(&working)?;
        let kf = &self.keyframes[kid];
        let init = RotationWarp::new(self.r_wc.transpose() * kf.rotation, self.k);
        let result = match kf.aligner.align(&pyr, &init) {
            Ok(r) => r,
            Err(SolverError::InsufficientOverlap { .. }) => {
                self.status = TrackStatus::Lost;
                return Ok(self.record(None));
            }
            Err(e) => return Err(e.into()),
        };
        let cost = result.final_cost();
        let too_costly = cost.is_none_or(|c| !(c <= self.config.lost_cost_ratio * kf.noise_floor));
        if result.termination == Termination::Degenerate || too_costly {
            self.status = TrackStatus::Lost;
            return Ok(self.record(cost));
        }
        self.r_wc = kf.rotation * result.warp.rotation().transpose();
        let (_, dist) = self.nearest_keyframe(&self.r_wc);
        if dist > self.config.spawn_threshold {
            self.add_keyframe(working, self.r_wc)?;
        }
        Ok(self.record(cost))
    }

    pub fn render_panorama(&self, width: usize) -> Image {
        render_panorama(&self.keyframes, &self.k, width)
    }
}

/// Unit ray of equirectangular pixel `(u, v)` in a `width x width/2`
/// panorama. Longitude 0, latitude 0 is the world +z axis; image rows grow
/// downwards like the camera's y axis.
pub fn panorama_ray(u: usize, v: usize, width: usize) -> Vector3<f64> {
    let height = width / 2;
    let lon = (u as f64 + 0.5) / width as f64 * std::f64::consts::TAU - std::f64::consts::PI;
    let lat = std::f64::consts::FRAC_PI_2 - (v as f64 + 0.5) / height as f64 * std::f64::consts::PI;
    Vector3::new(lat.cos() * lon.sin(), -lat.sin(), lat.cos() * lon.cos())
}

/// Samples keyframe `kf` along world ray `d`, if the ray lands in its image.
pub fn sample_keyframe(kf: &Keyframe, k: &Intrinsics, d: &Vector3<f64>) -> Option<[f32; 3]> {
    let p = k.project(&(kf.rotation.transpose() * d))?;
    let img = &kf.image;
    let tap = BilinearTap::new(img.width(), img.height(), p[0], p[1])?;
    let mut out = [0.0f32; 3];
    for (c, o) in out.iter_mut().enumerate().take(img.channels().min(3)) {
        *o = tap.apply(img.channel(c)) as f32;
    }
    Some(out)
}

/// Keyframe whose optical axis is closest to `d` (lowest id on ties).
pub fn nearest_axis_keyframe<'a>(keyframes: &'a [Keyframe], d: &Vector3<f64>) -> Option<&'a Keyframe> {
    keyframes.iter().max_by(|a, b| {
        a.optical_axis()
            .dot(d)
            .total_cmp(&b.optical_axis().dot(d))
            .then(b.id.cmp(&a.id))
    })
}

/// Equirectangular `width x width/2` panorama of the keyframe images. Every
/// pixel takes the keyframe whose optical axis is nearest its ray; pixels
/// that keyframe does not see stay black.
pub fn render_panorama(keyframes: &[Keyframe], k: &Intrinsics, width: usize) -> Image {
    let height = (width / 2).max(1);
    let rows = par::map_range(height, |v| {
        (0..width)
            .map(|u| {
                let d = panorama_ray(u, v, width);
                nearest_axis_keyframe(keyframes, &d)
                    .and_then(|kf| sample_keyframe(kf, k, &d))
                    .unwrap_or([0.0; 3])
            })
            .collect::<Vec<_>>()
    });
    FeatureVolume::from_fn(width, height, 3, |c, x, y| rows[y][x][c])
}

/// Per-channel absolute differences between keyframes that observe the
/// same panorama pixel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapStats {
    /// Panorama pixels seen by at least two keyframes.
    pub pixels: usize,
    pub mean_abs_diff: f64,
    pub mean_abs_diff_per_channel: [f64; 3],
    pub p99_abs_diff: f64,
    pub max_abs_diff: f64,
}

/// Compares, for every panorama pixel seen by two or more keyframes, the
/// samples of the two keyframes whose optical axes are nearest the ray.
pub fn overlap_stats(keyframes: &[Keyframe], k: &Intrinsics, width: usize) -> OverlapStats {
    let height = (width / 2).max(1);
    let rows = par::map_range(height, |v| {
        let mut diffs = Vec::new();
        for u in 0..width {
            let d = panorama_ray(u, v, width);
            let mut seen: Vec<(f64, [f32; 3])> = keyframes
                .iter()
                .filter_map(|kf| sample_keyframe(kf, k, &d).map(|s| (kf.optical_axis().dot(&d), s)))
                .collect();
            if seen.len() < 2 {
                continue;
            }
            seen.sort_by(|a, b| b.0.total_cmp(&a.0));
            for c in 0..3 {
                diffs.push((seen[0].1[c] - seen[1].1[c]).abs() as f64);
            }
        }
        diffs
    });
    let mut all: Vec<f64> = rows.into_iter().flatten().collect();
    if all.is_empty() {
        return OverlapStats {
            pixels: 0,
            mean_abs_diff: 0.0,
            mean_abs_diff_per_channel: [0.0; 3],
            p99_abs_diff: 0.0,
            max_abs_diff: 0.0,
        };
    }
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let mut per_channel = [0.0; 3];
    for (c, m) in per_channel.iter_mut().enumerate() {
        *m = all.iter().skip(c).step_by(3).sum::<f64>() / (all.len() / 3) as f64;
    }
    all.sort_by(f64::total_cmp);
    let p99 = all[((all.len() - 1) as f64 * 0.99).round() as usize];
    OverlapStats {
        pixels: all.len() / 3,
        mean_abs_diff: mean,
        mean_abs_diff_per_channel: per_channel,
        p99_abs_diff: p99,
        max_abs_diff: *all.last().unwrap(),
    }
}
