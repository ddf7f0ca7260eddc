//! Inverse-compositional Lucas-Kanade over multi-channel feature pyramids.
//!
//! The template's gradients and steepest-descent structure are computed once
//! per level ([`precompute_level`]). Each iteration samples the reference at
//! the warped template grid, accumulates the normal equations over the valid
//! pixels ([`accumulate_residual`]), solves for an increment
//! ([`solve_update`]) and composes its inverse into the current warp.
//!
//! Sign convention: steepest-descent rows are `J = -grad(V_t) dW/dp` and the
//! residual is `e = V_t(x) - V_r(W(x; p))`. With `b = sum J^T e` the
//! increment `dp = H^-1 b` is the Gauss-Newton step that moves the warp
//! towards the reference, which is the convention that makes a single step
//! exact on a linear ramp.
//!
//! Every reduction runs per image row and folds the row partials in row
//! order, so results are bit-identical for any thread count.

mod surface;

pub use surface::{cost_surface, grid_values, mean_cost, CostSurface, SurfaceAxis};

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;
use crate::tensor::{gradient_central, BilinearTap, FeaturePyramid, FeatureVolume, TensorError};
use crate::warp::{Warp, WarpError, WarpParams, WarpRecord, MIN_DEPTH};

/// Default per-level iteration cap.
pub const DEFAULT_ITERATIONS_PER_LEVEL: usize = 50;
/// Iteration budget of one basin-sweep alignment, split across levels.
pub const BASIN_ITERATION_BUDGET: usize = 1000;
/// A Hessian is degenerate when `lambda_min < DEGENERACY_RATIO * lambda_max`.
pub const DEGENERACY_RATIO: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("only {valid} of {total} pixels overlap the reference")]
    InsufficientOverlap { valid: usize, total: usize },
    #[error("normal equations are singular even with damping")]
    SingularSystem,
    #[error("template has {expected} channels, reference has {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("pyramid mismatch: {0}")]
    PyramidMismatch(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid solver config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Iteration cap for each scheduled level, coarse to fine.
    pub iterations_per_level: Vec<usize>,
    /// Stop a level once `|dp|` falls below this.
    pub convergence_epsilon: f64,
    /// Relative Tikhonov damping: `damping_lambda * trace(H) / dof` is added
    /// to the diagonal.
    pub damping_lambda: f64,
    /// Minimum fraction of template pixels that must land on the reference.
    pub min_valid_fraction: f64,
}

impl SolverConfig {
    /// The same cap on each of `levels` levels.
    pub fn uniform(levels: usize, iterations: usize) -> Self {
        Self {
            iterations_per_level: vec![iterations; levels],
            convergence_epsilon: 1e-7,
            damping_lambda: 1e-8,
            min_valid_fraction: 0.25,
        }
    }

    /// Interactive default: 50 iterations on each level.
    pub fn interactive(levels: usize) -> Self {
        Self::uniform(levels, DEFAULT_ITERATIONS_PER_LEVEL)
    }

    /// Splits `total` iterations evenly across `levels` levels, giving the
    /// remainder to the coarsest ones.
    pub fn with_budget(levels: usize, total: usize) -> Self {
        let mut c = Self::uniform(levels, 0);
        for (i, it) in c.iterations_per_level.iter_mut().enumerate() {
            *it = (total / levels.max(1) + usize::from(i < total % levels.max(1))).max(1);
        }
        c
    }

    pub fn validate(&self, scheduled_levels: usize) -> Result<(), SolverError> {
        if self.iterations_per_level.len() != scheduled_levels {
            return Err(SolverError::InvalidConfig(format!(
                "{} iteration caps for {} scheduled levels",
                self.iterations_per_level.len(),
                scheduled_levels
            )));
        }
        if self.iterations_per_level.contains(&0) {
            return Err(SolverError::InvalidConfig("iteration caps must be at least 1".into()));
        }
        if !(self.min_valid_fraction > 0.0 && self.min_valid_fraction <= 1.0) {
            return Err(SolverError::InvalidConfig(
                "min_valid_fraction must lie in (0, 1]".into(),
            ));
        }
        if !(self.convergence_epsilon >= 0.0) || !(self.damping_lambda >= 0.0) {
            return Err(SolverError::InvalidConfig(
                "epsilon and damping must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Pyramid levels to run, coarse to fine.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub levels: Vec<usize>,
}

impl Schedule {
    /// Every level, deepest first.
    pub fn all(pyramid: &FeaturePyramid) -> Self {
        Self {
            levels: (0..pyramid.num_levels()).rev().collect(),
        }
    }

    pub fn single(level: usize) -> Self {
        Self { levels: vec![level] }
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn validate(&self, pyramid: &FeaturePyramid) -> Result<(), SolverError> {
        if self.levels.is_empty() {
            return Err(SolverError::InvalidSchedule("no levels scheduled".into()));
        }
        for &l in &self.levels {
            if l >= pyramid.num_levels() {
                return Err(SolverError::InvalidSchedule(format!(
                    "level {l} does not exist in a {}-level pyramid",
                    pyramid.num_levels()
                )));
            }
        }
        for w in self.levels.windows(2) {
            if pyramid.scale(w[1]) > pyramid.scale(w[0]) {
                return Err(SolverError::InvalidSchedule(format!(
                    "level {} is coarser than the preceding level {}",
                    w[1], w[0]
                )));
            }
        }
        Ok(())
    }
}

/// Accumulated normal equations. Only the leading `dof x dof` block of `h`
/// and the first `dof` entries of `b` are used.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalEquations {
    pub dof: usize,
    pub h: Matrix3<f64>,
    pub b: [f64; 3],
    pub valid_pixels: usize,
    pub total_pixels: usize,
    /// Sum of squared residuals over valid pixels and all channels.
    pub cost: f64,
}

impl NormalEquations {
    /// Cost per valid pixel.
    pub fn mean_cost(&self) -> f64 {
        if self.valid_pixels == 0 {
            f64::NAN
        } else {
            self.cost / self.valid_pixels as f64
        }
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid_pixels as f64 / self.total_pixels.max(1) as f64
    }
}

/// Template-side quantities of one pyramid level.
#[derive(Clone, Debug)]
pub struct LevelPrecompute {
    dof: usize,
    template: FeatureVolume,
    grad_x: FeatureVolume,
    grad_y: FeatureVolume,
    /// Warp Jacobian at identity, per pixel.
    warp_jacobian: Vec<[[f64; 3]; 2]>,
    /// Channel-summed `J^T J` per pixel, upper triangle `00 01 02 11 12 22`.
    pixel_hessian: Vec<[f64; 6]>,
    hessian: Matrix3<f64>,
    degenerate: bool,
}

fn unpack_sym(u: &[f64; 6]) -> Matrix3<f64> {
    Matrix3::new(u[0], u[1], u[2], u[1], u[3], u[4], u[2], u[4], u[5])
}

/// Computes gradients, steepest-descent structure and the full-domain
/// Hessian for a template level. `warp_model` supplies the camera model at
/// this level's resolution; its motion is ignored.
pub fn precompute_level<W: Warp>(template: &FeatureVolume, warp_model: &W) -> Result<LevelPrecompute, SolverError> {
    let (gx, gy) = gradient_central(template)?;
    let ident = warp_model.identity_like();
    let (w, h) = (template.width(), template.height());
    let dof = W::DOF;
    let jac: Vec<[[f64; 3]; 2]> = par::map_range(w * h, |i| ident.jacobian_at_zero([(i % w) as f64, (i / w) as f64]))
        .into_iter()
        .collect::<Result<_, _>>()?;
    let channels = template.channels();
    let pixel_hessian = par::map_range(w * h, |i| {
        let (mut sxx, mut sxy, mut syy) = (0.0f64, 0.0f64, 0.0f64);
        for c in 0..channels {
            let a = gx.channel(c)[i] as f64;
            let b = gy.channel(c)[i] as f64;
            sxx += a * a;
            sxy += a * b;
            syy += b * b;
        }
        let j = &jac[i];
        let mut u = [0.0; 6];
        let mut k = 0;
        for r in 0..3 {
            for s in r..3 {
                u[k] = j[0][r] * (sxx * j[0][s] + sxy * j[1][s]) + j[1][r] * (sxy * j[0][s] + syy * j[1][s]);
                k += 1;
            }
        }
        u
    });
    let row_sums = par::map_range(h, |y| {
        let mut acc = [0.0; 6];
        for u in &pixel_hessian[y * w..(y + 1) * w] {
            for k in 0..6 {
                acc[k] += u[k];
            }
        }
        acc
    });
    let mut total = [0.0; 6];
    for r in &row_sums {
        for k in 0..6 {
            total[k] += r[k];
        }
    }
    let hessian = unpack_sym(&total);
    let degenerate = is_degenerate(&hessian, dof);
    Ok(LevelPrecompute {
        dof,
        template: template.clone(),
        grad_x: gx,
        grad_y: gy,
        warp_jacobian: jac,
        pixel_hessian,
        hessian,
        degenerate,
    })
}

fn is_degenerate(h: &Matrix3<f64>, dof: usize) -> bool {
    let m = DMatrix::from_fn(dof, dof, |i, j| h[(i, j)]);
    let eig = SymmetricEigen::new(m).eigenvalues;
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    !(max > 0.0) || min < DEGENERACY_RATIO * max
}

impl LevelPrecompute {
    pub fn dof(&self) -> usize {
        self.dof
    }

    pub fn template(&self) -> &FeatureVolume {
        &self.template
    }

    pub fn gradients(&self) -> (&FeatureVolume, &FeatureVolume) {
        (&self.grad_x, &self.grad_y)
    }

    /// Full-domain Hessian `sum_x sum_c J^T J`.
    pub fn hessian(&self) -> &Matrix3<f64> {
        &self.hessian
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// Steepest-descent row `J_{x,c} = -grad(V_t,c)(x) dW/dp` at pixel `(x, y)`.
    pub fn steepest_descent_row(&self, x: usize, y: usize, c: usize) -> [f64; 3] {
        let w = self.template.width();
        let i = y * w + x;
        let gx = self.grad_x.channel(c)[i] as f64;
        let gy = self.grad_y.channel(c)[i] as f64;
        let j = &self.warp_jacobian[i];
        [
            -(gx * j[0][0] + gy * j[1][0]),
            -(gx * j[0][1] + gy * j[1][1]),
            -(gx * j[0][2] + gy * j[1][2]),
        ]
    }
}

#[derive(Clone, Copy, Default)]
struct RowPartial {
    h: [f64; 6],
    b: [f64; 3],
    cost: f64,
    valid: usize,
}

/// Bilinear taps of the warped positions of one template row.
pub(crate) fn row_taps(
    hom: &Matrix3<f64>,
    y: usize,
    width: usize,
    ref_w: usize,
    ref_h: usize,
) -> Vec<Option<BilinearTap>> {
    (0..width)
        .map(|x| {
            let (xf, yf) = (x as f64, y as f64);
            let qz = hom[(2, 0)] * xf + hom[(2, 1)] * yf + hom[(2, 2)];
            if qz <= MIN_DEPTH {
                return None;
            }
            let qx = hom[(0, 0)] * xf + hom[(0, 1)] * yf + hom[(0, 2)];
            let qy = hom[(1, 0)] * xf + hom[(1, 1)] * yf + hom[(1, 2)];
            BilinearTap::new(ref_w, ref_h, qx / qz, qy / qz)
        })
        .collect()
}

/// Per-pixel squared residual of one template row summed over channels.
/// Shared by the solver and the cost-surface evaluator so both report
/// identical costs.
pub(crate) fn row_costs(
    template: &FeatureVolume,
    reference: &FeatureVolume,
    taps: &[Option<BilinearTap>],
    y: usize,
    mut grads: Option<(&FeatureVolume, &FeatureVolume, &mut [f64], &mut [f64])>,
) -> Vec<f64> {
    let w = template.width();
    let mut cost = vec![0.0f64; w];
    for c in 0..template.channels() {
        let t = &template.channel(c)[y * w..(y + 1) * w];
        let r = reference.channel(c);
        match grads.as_mut() {
            Some((gx, gy, sx, sy)) => {
                let gx = &gx.channel(c)[y * w..(y + 1) * w];
                let gy = &gy.channel(c)[y * w..(y + 1) * w];
                for x in 0..w {
                    if let Some(tap) = &taps[x] {
                        let e = t[x] as f64 - tap.apply(r);
                        cost[x] += e * e;
                        sx[x] += gx[x] as f64 * e;
                        sy[x] += gy[x] as f64 * e;
                    }
                }
            }
            None => {
                for x in 0..w {
                    if let Some(tap) = &taps[x] {
                        let e = t[x] as f64 - tap.apply(r);
                        cost[x] += e * e;
                    }
                }
            }
        }
    }
    cost
}

pub(crate) fn check_channels(t: &FeatureVolume, r: &FeatureVolume) -> Result<(), SolverError> {
    if t.channels() != r.channels() {
        return Err(SolverError::ChannelMismatch {
            expected: t.channels(),
            actual: r.channels(),
        });
    }
    Ok(())
}

/// Normal equations of the current level-local `warp` over the pixels whose
/// warped position lands inside `reference`.
pub fn accumulate_residual<W: Warp>(
    reference: &FeatureVolume,
    pre: &LevelPrecompute,
    warp: &W,
    min_valid_fraction: f64,
) -> Result<NormalEquations, SolverError> {
    let template = &pre.template;
    check_channels(template, reference)?;
    let (w, h) = (template.width(), template.height());
    let hom = warp.homography();
    let rows = par::map_range(h, |y| {
        let taps = row_taps(&hom, y, w, reference.width(), reference.height());
        let mut sx = vec![0.0; w];
        let mut sy = vec![0.0; w];
        let cost = row_costs(
            template,
            reference,
            &taps,
            y,
            Some((&pre.grad_x, &pre.grad_y, &mut sx, &mut sy)),
        );
        let mut p = RowPartial::default();
        for x in 0..w {
            if taps[x].is_none() {
                continue;
            }
            let i = y * w + x;
            p.valid += 1;
            p.cost += cost[x];
            let j = &pre.warp_jacobian[i];
            for k in 0..3 {
                p.b[k] -= j[0][k] * sx[x] + j[1][k] * sy[x];
            }
            for (acc, v) in p.h.iter_mut().zip(&pre.pixel_hessian[i]) {
                *acc += v;
            }
        }
        p
    });
    let mut total = RowPartial::default();
    for r in &rows {
        for k in 0..6 {
            total.h[k] += r.h[k];
        }
        for k in 0..3 {
            total.b[k] += r.b[k];
        }
        total.cost += r.cost;
        total.valid += r.valid;
    }
    let total_pixels = w * h;
    if total.valid == 0 || (total.valid as f64) < min_valid_fraction * total_pixels as f64 {
        return Err(SolverError::InsufficientOverlap {
            valid: total.valid,
            total: total_pixels,
        });
    }
    Ok(NormalEquations {
        dof: pre.dof,
        h: unpack_sym(&total.h),
        b: total.b,
        valid_pixels: total.valid,
        total_pixels,
        cost: total.cost,
    })
}

/// Solves `(H + lambda trace(H)/dof I) dp = b` by Cholesky factorization.
pub fn solve_update(ne: &NormalEquations, config: &SolverConfig) -> Result<WarpParams, SolverError> {
    if ne.valid_pixels == 0 {
        return Err(SolverError::InsufficientOverlap {
            valid: 0,
            total: ne.total_pixels,
        });
    }
    let d = ne.dof;
    if ne.b[..d].iter().all(|&v| v == 0.0) {
        return Ok(WarpParams::zeros(d));
    }
    let mut a = DMatrix::from_fn(d, d, |i, j| ne.h[(i, j)]);
    let damping = config.damping_lambda * a.trace() / d as f64;
    for i in 0..d {
        a[(i, i)] += damping;
    }
    let chol = a.cholesky().ok_or(SolverError::SingularSystem)?;
    let x = chol.solve(&DVector::from_column_slice(&ne.b[..d]));
    if x.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::SingularSystem);
    }
    Ok(WarpParams(x.iter().copied().collect()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// `|dp|` fell below the convergence threshold.
    Epsilon,
    /// The level's iteration cap was reached.
    MaxIters,
    /// The level's Hessian is rank deficient; the level was skipped.
    Degenerate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: usize,
    pub iterations: usize,
    pub termination: Termination,
}

#[derive(Clone, Debug)]
pub struct AlignResult<W> {
    pub warp: W,
    pub levels: Vec<LevelReport>,
    /// Cost per valid pixel before each update, in iteration order.
    pub cost_trace: Vec<f64>,
    /// Reason the finest scheduled level stopped.
    pub termination: Termination,
    /// Valid fraction of the last accumulated system.
    pub valid_fraction: f64,
}

impl<W: Warp> AlignResult<W> {
    pub fn total_iterations(&self) -> usize {
        self.levels.iter().map(|l| l.iterations).sum()
    }

    /// Cost per valid pixel at the last iteration, if any ran.
    pub fn final_cost(&self) -> Option<f64> {
        self.cost_trace.last().copied()
    }

    pub fn report(&self, config: &SolverConfig) -> AlignReport {
        AlignReport {
            warp: self.warp.record(),
            levels: self.levels.clone(),
            cost_trace: self.cost_trace.clone(),
            termination: self.termination,
            valid_fraction: self.valid_fraction,
            config: config.clone(),
        }
    }
}

/// Serializable summary of an alignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    pub warp: WarpRecord,
    pub levels: Vec<LevelReport>,
    pub cost_trace: Vec<f64>,
    pub termination: Termination,
    pub valid_fraction: f64,
    pub config: SolverConfig,
}

/// A template pyramid prepared for repeated alignment.
#[derive(Clone, Debug)]
pub struct Aligner<W: Warp> {
    schedule: Schedule,
    config: SolverConfig,
    scales: Vec<u32>,
    shapes: Vec<(usize, usize, usize)>,
    levels: Vec<LevelPrecompute>,
    model: W,
}

impl<W: Warp> Aligner<W> {
    /// Precomputes every scheduled level of `template`. `model` carries the
    /// camera model at input resolution.
    pub fn new(
        template: &FeaturePyramid,
        model: &W,
        schedule: Schedule,
        config: SolverConfig,
    ) -> Result<Self, SolverError> {
        schedule.validate(template)?;
        config.validate(schedule.len())?;
        let levels = schedule
            .levels
            .iter()
            .map(|&l| precompute_level(template.level(l), &model.at_scale(template.scale(l) as f64)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            scales: template.scales().to_vec(),
            shapes: template
                .levels()
                .iter()
                .map(|v| (v.width(), v.height(), v.channels()))
                .collect(),
            schedule,
            config,
            levels,
            model: model.clone(),
        })
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn model(&self) -> &W {
        &self.model
    }

    pub fn precomputed(&self) -> &[LevelPrecompute] {
        &self.levels
    }

    fn check_reference(&self, reference: &FeaturePyramid) -> Result<(), SolverError> {
        if reference.scales() != self.scales.as_slice() {
            return Err(SolverError::PyramidMismatch("level scales differ".into()));
        }
        for &l in &self.schedule.levels {
            let r = reference.level(l);
            let (_, _, c) = self.shapes[l];
            if r.channels() != c {
                return Err(SolverError::ChannelMismatch {
                    expected: c,
                    actual: r.channels(),
                });
            }
        }
        Ok(())
    }

    /// Runs the schedule from `initial`, which must share the model's camera.
    pub fn align(&self, reference: &FeaturePyramid, initial: &W) -> Result<AlignResult<W>, SolverError> {
        self.check_reference(reference)?;
        let mut warp = initial.clone();
        let mut reports = Vec::with_capacity(self.levels.len());
        let mut trace = Vec::new();
        let mut termination = Termination::MaxIters;
        let mut valid_fraction = 0.0;
        for (k, &level) in self.schedule.levels.iter().enumerate() {
            let pre = &self.levels[k];
            let scale = self.scales[level] as f64;
            if pre.degenerate {
                termination = Termination::Degenerate;
                reports.push(LevelReport {
                    level,
                    iterations: 0,
                    termination,
                });
                continue;
            }
            let refv = reference.level(level);
            let mut local = warp.at_scale(scale);
            let cap = self.config.iterations_per_level[k];
            let mut iterations = 0;
            termination = Termination::MaxIters;
            while iterations < cap {
                let ne = accumulate_residual(refv, pre, &local, self.config.min_valid_fraction)?;
                trace.push(ne.mean_cost());
                valid_fraction = ne.valid_fraction();
                let dp = solve_update(&ne, &self.config)?;
                local.compose_with_inverse_update(dp.as_slice());
                iterations += 1;
                if dp.norm() < self.config.convergence_epsilon {
                    termination = Termination::Epsilon;
                    break;
                }
            }
            warp.adopt_from_scale(&local, scale);
            reports.push(LevelReport {
                level,
                iterations,
                termination,
            });
        }
        Ok(AlignResult {
            warp,
            levels: reports,
            cost_trace: trace,
            termination,
            valid_fraction,
        })
    }
}

/// One-shot alignment of `reference` against `template`.
pub fn align<W: Warp>(
    template: &FeaturePyramid,
    reference: &FeaturePyramid,
    initial: &W,
    schedule: Schedule,
    config: SolverConfig,
) -> Result<AlignResult<W>, SolverError> {
    Aligner::new(template, initial, schedule, config)?.align(reference, initial)
}
