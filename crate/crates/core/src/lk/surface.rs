//! Exhaustive evaluation of the alignment cost over a 2-D parameter grid.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{check_channels, row_costs, row_taps, SolverError};
use crate::par;
use crate::tensor::FeatureVolume;
use crate::warp::Warp;

/// Values `min + i * step` for `i = 0..=floor((max - min) / step)`. A value
/// within rounding distance of zero is stored as exactly zero.
pub fn grid_values(min: f64, max: f64, step: f64) -> Vec<f64> {
    if !(step > 0.0) || !(max >= min) {
        return vec![min];
    }
    let n = ((max - min) / step + 1e-9).floor() as usize;
    (0..=n)
        .map(|i| {
            let v = min + i as f64 * step;
            if v.abs() < 1e-9 * step {
                0.0
            } else {
                v
            }
        })
        .collect()
}

/// One swept parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceAxis {
    pub param: usize,
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl SurfaceAxis {
    pub fn symmetric(param: usize, extent: f64, step: f64) -> Self {
        Self {
            param,
            min: -extent,
            max: extent,
            step,
        }
    }

    pub fn values(&self) -> Vec<f64> {
        grid_values(self.min, self.max, self.step)
    }
}

/// Sum of squared residuals and valid pixel count of `warp` (level-local).
pub(crate) fn cost_sum<W: Warp>(template: &FeatureVolume, reference: &FeatureVolume, warp: &W) -> (f64, usize) {
    let w = template.width();
    let hom = warp.homography();
    let rows = par::map_range(template.height(), |y| {
        let taps = row_taps(&hom, y, w, reference.width(), reference.height());
        let cost = row_costs(template, reference, &taps, y, None);
        let mut sum = 0.0;
        let mut valid = 0;
        for x in 0..w {
            if taps[x].is_some() {
                sum += cost[x];
                valid += 1;
            }
        }
        (sum, valid)
    });
    rows.iter().fold((0.0, 0), |(s, n), (rs, rn)| (s + rs, n + rn))
}

/// Cost per valid pixel and valid fraction of a single warp, the same
/// quantity the solver records in its cost trace.
pub fn mean_cost<W: Warp>(
    template: &FeatureVolume,
    reference: &FeatureVolume,
    warp: &W,
) -> Result<(f64, f64), SolverError> {
    check_channels(template, reference)?;
    let (sum, valid) = cost_sum(template, reference, warp);
    let frac = valid as f64 / template.pixel_count() as f64;
    Ok((if valid == 0 { f64::NAN } else { sum / valid as f64 }, frac))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostSurface {
    pub axes: [SurfaceAxis; 2],
    pub p0: Vec<f64>,
    pub p1: Vec<f64>,
    /// Row-major over `(p0, p1)`: `cost[i * p1.len() + j]`. `None` marks
    /// cells below the overlap threshold.
    pub cost: Vec<Option<f64>>,
    pub valid_fraction: Vec<f64>,
}

impl CostSurface {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.cost[i * self.p1.len() + j]
    }

    /// Grid index and value of the smallest present cost.
    pub fn argmin(&self) -> Option<((usize, usize), f64)> {
        let n1 = self.p1.len();
        self.cost
            .iter()
            .enumerate()
            .filter_map(|(k, c)| c.map(|c| (k, c)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, c)| ((k / n1, k % n1), c))
    }

    /// `p0,p1,cost,valid_fraction`; absent cells have an empty cost field.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("p0,p1,cost,valid_fraction\n");
        for (i, a) in self.p0.iter().enumerate() {
            for (j, b) in self.p1.iter().enumerate() {
                let k = i * self.p1.len() + j;
                let cost = self.cost[k].map(|c| c.to_string()).unwrap_or_default();
                let _ = writeln!(s, "{a},{b},{cost},{}", self.valid_fraction[k]);
            }
        }
        s
    }
}

/// Evaluates the mean cost of every grid cell. Parameters not on either
/// axis keep their values from `base`, whose camera model must match the
/// template's resolution.
pub fn cost_surface<W: Warp>(
    template: &FeatureVolume,
    reference: &FeatureVolume,
    base: &W,
    axes: [SurfaceAxis; 2],
    min_valid_fraction: f64,
) -> Result<CostSurface, SolverError> {
    check_channels(template, reference)?;
    for a in &axes {
        if a.param >= W::DOF {
            return Err(SolverError::InvalidConfig(format!(
                "parameter {} out of range for a {}-DOF warp",
                a.param,
                W::DOF
            )));
        }
    }
    if axes[0].param == axes[1].param {
        return Err(SolverError::InvalidConfig("surface axes must differ".into()));
    }
    let p0 = axes[0].values();
    let p1 = axes[1].values();
    let base_params = base.params();
    let total = template.pixel_count() as f64;
    let cells: Vec<(Option<f64>, f64)> = p0
        .iter()
        .flat_map(|&a| p1.iter().map(move |&b| (a, b)))
        .map(|(a, b)| {
            let mut p = base_params.clone();
            p[axes[0].param] = a;
            p[axes[1].param] = b;
            let (sum, valid) = cost_sum(template, reference, &base.with_params(&p));
            let frac = valid as f64 / total;
            let present = valid > 0 && frac >= min_valid_fraction;
            (present.then(|| sum / valid as f64), frac)
        })
        .collect();
    let (cost, valid_fraction) = cells.into_iter().unzip();
    Ok(CostSurface {
        axes,
        p0,
        p1,
        cost,
        valid_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lk::{accumulate_residual, precompute_level};
    use crate::warp::TranslationWarp;

    fn smooth(shift: f64) -> FeatureVolume {
        FeatureVolume::from_fn(40, 32, 2, |c, x, y| {
            let xf = x as f64 - shift;
            (80.0 * (-((xf - 20.0).powi(2) + (y as f64 - 16.0).powi(2)) / (60.0 + 20.0 * c as f64)).exp()
                + 10.0 * (0.3 * xf).sin()) as f32
        })
    }

    #[test]
    fn grid_values_cover_the_range() {
        assert_eq!(grid_values(-1.0, 1.0, 0.5), vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert_eq!(grid_values(-0.3, 0.3, 0.05).len(), 13);
        assert_eq!(grid_values(-0.3, 0.3, 0.05)[6], 0.0);
        assert_eq!(grid_values(-0.5, 0.5, 0.04).len(), 26);
        assert_eq!(grid_values(2.0, 2.0, 1.0), vec![2.0]);
    }

    #[test]
    fn self_surface_minimum_is_origin() {
        let t = smooth(0.0);
        let axes = [SurfaceAxis::symmetric(0, 4.0, 1.0), SurfaceAxis::symmetric(1, 4.0, 1.0)];
        let s = cost_surface(&t, &t, &TranslationWarp::default(), axes, 0.25).unwrap();
        let ((i, j), c) = s.argmin().unwrap();
        assert_eq!((s.p0[i], s.p1[j]), (0.0, 0.0));
        assert_eq!(c, 0.0);
    }

    #[test]
    fn surface_origin_matches_solver_cost() {
        let t = smooth(0.0);
        let r = smooth(1.5);
        let axes = [SurfaceAxis::symmetric(0, 2.0, 1.0), SurfaceAxis::symmetric(1, 2.0, 1.0)];
        let s = cost_surface(&t, &r, &TranslationWarp::default(), axes, 0.25).unwrap();
        let pre = precompute_level(&t, &TranslationWarp::default()).unwrap();
        let ne = accumulate_residual(&r, &pre, &TranslationWarp::default(), 0.25).unwrap();
        assert_eq!(s.get(2, 2).unwrap(), ne.mean_cost());
    }

    #[test]
    fn shifted_reference_minimum() {
        let t = smooth(0.0);
        let r = smooth(5.0);
        let axes = [SurfaceAxis::symmetric(0, 8.0, 1.0), SurfaceAxis::symmetric(1, 3.0, 1.0)];
        let s = cost_surface(&t, &r, &TranslationWarp::default(), axes, 0.25).unwrap();
        let ((i, j), _) = s.argmin().unwrap();
        assert_eq!((s.p0[i], s.p1[j]), (5.0, 0.0));
    }

    #[test]
    fn self_surface_is_symmetric_under_negation() {
        // A field symmetric about the image centre makes boundary effects cancel too.
        let t = FeatureVolume::from_fn(33, 33, 1, |_, x, y| {
            let (dx, dy) = (x as f64 - 16.0, y as f64 - 16.0);
            (100.0 * (-(dx * dx + dy * dy) / 80.0).exp()) as f32
        });
        let axes = [SurfaceAxis::symmetric(0, 3.0, 0.5), SurfaceAxis::symmetric(1, 3.0, 0.5)];
        let s = cost_surface(&t, &t, &TranslationWarp::default(), axes, 0.25).unwrap();
        let (n0, n1) = (s.p0.len(), s.p1.len());
        for i in 0..n0 {
            for j in 0..n1 {
                let a = s.get(i, j).unwrap();
                let b = s.get(n0 - 1 - i, n1 - 1 - j).unwrap();
                assert!((a - b).abs() <= 1e-6 * a.max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn far_cells_are_absent_and_csv_has_all_rows() {
        let t = smooth(0.0);
        let axes = [
            SurfaceAxis::symmetric(0, 36.0, 12.0),
            SurfaceAxis::symmetric(1, 0.0, 1.0),
        ];
        let s = cost_surface(&t, &t, &TranslationWarp::default(), axes, 0.25).unwrap();
        assert_eq!(s.get(0, 0), None);
        assert!(s.get(3, 0).is_some());
        let csv = s.to_csv();
        assert_eq!(csv.lines().count(), 1 + 7);
        assert!(csv.lines().nth(1).unwrap().starts_with("-36,0,,"));
    }

    #[test]
    fn bad_axes_are_rejected() {
        let t = smooth(0.0);
        let same = [SurfaceAxis::symmetric(0, 1.0, 1.0), SurfaceAxis::symmetric(0, 1.0, 1.0)];
        assert!(cost_surface(&t, &t, &TranslationWarp::default(), same, 0.25).is_err());
        let oob = [SurfaceAxis::symmetric(0, 1.0, 1.0), SurfaceAxis::symmetric(2, 1.0, 1.0)];
        assert!(cost_surface(&t, &t, &TranslationWarp::default(), oob, 0.25).is_err());
    }
}
