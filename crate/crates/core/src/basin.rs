//! Convergence-basin sweeps.
//!
//! A sweep perturbs the ground-truth rotation by every offset of a regular
//! 2-D grid over two rotation-vector components, runs the solver from each
//! perturbed start and counts the starts that end within a success
//! threshold of the truth. The basin area is that count times the area of
//! one grid cell.

use std::fmt::Write as _;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::lk::{grid_values, Aligner, Schedule, SolverConfig, SolverError, BASIN_ITERATION_BUDGET};
use crate::par;
use crate::tensor::FeaturePyramid;
use crate::warp::{angular_distance, so3_exp, RotationWarp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasinConfig {
    /// Rotation-vector components swept on the two grid axes (0 tilt about
    /// x, 1 pan about y, 2 roll about z).
    pub axes: [usize; 2],
    /// `[min, max]` offset per axis, radians.
    pub range: [[f64; 2]; 2],
    /// Grid step per axis, radians.
    pub step: [f64; 2],
    pub success_threshold: f64,
    /// Iteration budget per cell, split across scheduled levels.
    pub max_iterations: usize,
    /// Offsets of the component not on either axis.
    pub fixed: [f64; 3],
    pub convergence_epsilon: f64,
    pub min_valid_fraction: f64,
}

impl Default for BasinConfig {
    /// Pan/tilt offsets of +-0.5 rad at 0.04 rad spacing (26 x 26 cells).
    fn default() -> Self {
        Self {
            axes: [1, 0],
            range: [[-0.5, 0.5], [-0.5, 0.5]],
            step: [0.04, 0.04],
            success_threshold: 0.07,
            max_iterations: BASIN_ITERATION_BUDGET,
            fixed: [0.0; 3],
            convergence_epsilon: 1e-7,
            min_valid_fraction: 0.25,
        }
    }
}

impl BasinConfig {
    /// Symmetric square grid on the default axes.
    pub fn square(extent: f64, step: f64) -> Self {
        Self {
            range: [[-extent, extent], [-extent, extent]],
            step: [step, step],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::InvalidConfig(m.into()));
        if self.axes[0] == self.axes[1] || self.axes.iter().any(|&a| a > 2) {
            return bad("basin axes must be two distinct components in 0..3");
        }
        for i in 0..2 {
            if !(self.step[i] > 0.0) || !(self.range[i][0] < self.range[i][1]) {
                return bad("basin grid needs step > 0 and min < max");
            }
            if self.range[i][0].abs().max(self.range[i][1].abs()) >= std::f64::consts::PI {
                return bad("basin offsets must stay below pi");
            }
        }
        if !(self.success_threshold > 0.0) {
            return bad("success threshold must be positive");
        }
        if self.max_iterations == 0 {
            return bad("iteration budget must be positive");
        }
        Ok(())
    }

    pub fn axis_values(&self, axis: usize) -> Vec<f64> {
        grid_values(self.range[axis][0], self.range[axis][1], self.step[axis])
    }

    /// Solver configuration for a schedule of `levels` levels.
    pub fn solver_config(&self, levels: usize) -> SolverConfig {
        SolverConfig {
            convergence_epsilon: self.convergence_epsilon,
            min_valid_fraction: self.min_valid_fraction,
            ..SolverConfig::with_budget(levels, self.max_iterations)
        }
    }

    /// Rotation-vector offset of grid cell `(a, b)`.
    pub fn offset(&self, a: f64, b: f64) -> Vector3<f64> {
        let mut o = Vector3::from(self.fixed);
        o[self.axes[0]] = a;
        o[self.axes[1]] = b;
        o
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub p0_offset: f64,
    pub p1_offset: f64,
    pub converged: bool,
    /// Angular distance between the final and true rotation; NaN when the
    /// solver failed.
    pub final_error_rad: f64,
    pub iterations: usize,
    /// Solver error that ended the cell, if any.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reason: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasinResult {
    pub config: BasinConfig,
    pub schedule: Vec<usize>,
    pub p0: Vec<f64>,
    pub p1: Vec<f64>,
    /// Row-major over `(p0, p1)`.
    pub cells: Vec<CellOutcome>,
    pub converged_count: usize,
    /// `converged_count * step0 * step1`, square radians.
    pub basin_area: f64,
}

impl BasinResult {
    pub fn cell(&self, i: usize, j: usize) -> &CellOutcome {
        &self.cells[i * self.p1.len() + j]
    }

    /// Index of the cell closest to zero offset.
    pub fn origin_index(&self) -> (usize, usize) {
        let nearest = |v: &[f64]| {
            (0..v.len())
                .min_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()))
                .unwrap_or(0)
        };
        (nearest(&self.p0), nearest(&self.p1))
    }

    pub fn origin_cell(&self) -> &CellOutcome {
        let (i, j) = self.origin_index();
        self.cell(i, j)
    }

    /// Area that would count as converged under a tighter threshold.
    pub fn area_at_threshold(&self, threshold: f64) -> f64 {
        let n = self.cells.iter().filter(|c| c.final_error_rad <= threshold).count();
        n as f64 * self.config.step[0] * self.config.step[1]
    }

    /// `p0_offset,p1_offset,converged,final_error_rad,iterations`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("p0_offset,p1_offset,converged,final_error_rad,iterations\n");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                c.p0_offset,
                c.p1_offset,
                u8::from(c.converged),
                c.final_error_rad,
                c.iterations
            );
        }
        s
    }

    /// Matrix of final errors: header row of `p0` values, then one row per
    /// `p1` value led by that value. Suitable for heat-map plotting.
    pub fn heat_grid(&self) -> String {
        let mut s = String::from("p1\\p0");
        for a in &self.p0 {
            let _ = write!(s, ",{a}");
        }
        s.push('\n');
        for (j, b) in self.p1.iter().enumerate() {
            let _ = write!(s, "{b}");
            for i in 0..self.p0.len() {
                let _ = write!(s, ",{}", self.cell(i, j).final_error_rad);
            }
            s.push('\n');
        }
        s
    }
}

/// Runs one cell: start from `truth * exp(offset)` and classify.
pub fn evaluate_cell(
    aligner: &Aligner<RotationWarp>,
    reference: &FeaturePyramid,
    truth: &RotationWarp,
    config: &BasinConfig,
    a: f64,
    b: f64,
) -> CellOutcome {
    let init = truth.with_rotation(truth.rotation() * so3_exp(&config.offset(a, b)));
    match aligner.align(reference, &init) {
        Ok(res) => {
            let err = angular_distance(res.warp.rotation(), truth.rotation());
            CellOutcome {
                p0_offset: a,
                p1_offset: b,
                converged: err <= config.success_threshold,
                final_error_rad: err,
                iterations: res.total_iterations(),
                reason: None,
            }
        }
        Err(e) => CellOutcome {
            p0_offset: a,
            p1_offset: b,
            converged: false,
            final_error_rad: f64::NAN,
            iterations: 0,
            reason: Some(e.to_string()),
        },
    }
}

/// Sweeps the grid with a prepared aligner.
pub fn sweep_with(
    aligner: &Aligner<RotationWarp>,
    reference: &FeaturePyramid,
    truth: &RotationWarp,
    config: &BasinConfig,
) -> Result<BasinResult, SolverError> {
    config.validate()?;
    let p0 = config.axis_values(0);
    let p1 = config.axis_values(1);
    let grid: Vec<(f64, f64)> = p0.iter().flat_map(|&a| p1.iter().map(move |&b| (a, b))).collect();
    let cells = par::map_slice(&grid, |&(a, b)| evaluate_cell(aligner, reference, truth, config, a, b));
    let converged_count = cells.iter().filter(|c| c.converged).count();
    Ok(BasinResult {
        config: config.clone(),
        schedule: aligner.schedule().levels.clone(),
        p0,
        p1,
        converged_count,
        basin_area: converged_count as f64 * config.step[0] * config.step[1],
        cells,
    })
}

/// Sweeps the grid. `truth` maps template pixels to reference pixels at
/// input resolution.
pub fn sweep(
    template: &FeaturePyramid,
    reference: &FeaturePyramid,
    truth: &RotationWarp,
    config: &BasinConfig,
    schedule: Schedule,
) -> Result<BasinResult, SolverError> {
    config.validate()?;
    let solver = config.solver_config(schedule.len());
    let aligner = Aligner::new(template, truth, schedule, solver)?;
    sweep_with(&aligner, reference, truth, config)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSweep {
    pub level: usize,
    /// Index of the resolution band the level belongs to.
    pub band: usize,
    pub resolution: [usize; 2],
    pub result: BasinResult,
}

/// One single-level sweep per pyramid level, tagged with resolution bands
/// so that levels sharing a resolution can be compared as a group.
pub fn per_level_sweep(
    template: &FeaturePyramid,
    reference: &FeaturePyramid,
    truth: &RotationWarp,
    config: &BasinConfig,
) -> Result<Vec<LevelSweep>, SolverError> {
    let bands = template.bands();
    let mut out = Vec::with_capacity(template.num_levels());
    for (band, levels) in bands.iter().enumerate() {
        for &level in levels {
            let v = template.level(level);
            out.push(LevelSweep {
                level,
                band,
                resolution: [v.width(), v.height()],
                result: sweep(template, reference, truth, config, Schedule::single(level))?,
            });
        }
    }
    Ok(out)
}

/// Mean basin area of each resolution band.
pub fn band_areas(sweeps: &[LevelSweep]) -> Vec<f64> {
    let bands = sweeps.iter().map(|s| s.band + 1).max().unwrap_or(0);
    (0..bands)
        .map(|b| {
            let areas: Vec<f64> = sweeps
                .iter()
                .filter(|s| s.band == b)
                .map(|s| s.result.basin_area)
                .collect();
            areas.iter().sum::<f64>() / areas.len().max(1) as f64
        })
        .collect()
}
