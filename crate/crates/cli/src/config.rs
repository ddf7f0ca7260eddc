//! Layered settings: command-line flags over a JSON config file over
//! built-in defaults.
//!
//! Each settings group is parsed from flags and from the file into the same
//! all-optional struct; `or` merges two layers field by field and the
//! `resolve` methods fill what is still unset with defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use semtex::basin::BasinConfig;
use semtex::lk::{SolverConfig, BASIN_ITERATION_BUDGET, DEFAULT_ITERATIONS_PER_LEVEL};
use semtex::mosaic::TrackerConfig;

/// Seed used by randomized steps when none is given.
pub const DEFAULT_SEED: u64 = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Rgb,
    Conv,
}

/// Declares a settings group whose fields are all optional, deriving both
/// the clap flags and the config-file keys, plus a field-wise `or`.
macro_rules! settings {
    ($(#[$m:meta])* pub struct $name:ident { $($(#[$fm:meta])* pub $field:ident: $ty:ty,)* }) => {
        $(#[$m])*
        #[derive(Args, Clone, Debug, Default, Deserialize)]
        #[serde(default)]
        pub struct $name {
            $($(#[$fm])* pub $field: Option<$ty>,)*
        }

        impl $name {
            /// Takes each field from `self`, falling back to `other`.
            pub fn or(self, other: Self) -> Self {
                Self { $($field: self.$field.or(other.$field),)* }
            }
        }
    };
}

settings! {
    pub struct PyramidSettings {
        /// Pyramid type [default: rgb]
        #[arg(long, value_enum)]
        pub mode: Mode,
        /// CWTS weight file for conv mode [env: SEMTEX_WEIGHTS]
        #[arg(long)]
        pub weights: PathBuf,
        /// Gaussian pyramid depth in rgb mode [default: 5]
        #[arg(long)]
        pub rgb_levels: usize,
        /// Comma-separated pyramid levels to run, coarse to fine [default: all]
        #[arg(long, value_delimiter = ',')]
        pub levels: Vec<usize>,
        /// Focal length in input pixels [default: image width]
        #[arg(long)]
        pub focal: f64,
    }
}

settings! {
    pub struct SolverSettings {
        /// Iteration cap per level [default: 50]
        #[arg(long)]
        pub iters_per_level: usize,
        /// Stop a level once |dp| falls below this [default: 1e-7]
        #[arg(long)]
        pub epsilon: f64,
        /// Relative diagonal damping of the normal equations [default: 1e-8]
        #[arg(long)]
        pub damping: f64,
        /// Minimum fraction of pixels that must overlap [default: 0.25]
        #[arg(long)]
        pub min_valid_fraction: f64,
    }
}

settings! {
    pub struct BasinSettings {
        /// Half-width of the offset grid in radians [default: 0.5]
        #[arg(long)]
        pub extent: f64,
        /// Grid spacing in radians [default: 0.04]
        #[arg(long)]
        pub step: f64,
        /// Final error counted as converged, radians [default: 0.07]
        #[arg(long)]
        pub threshold: f64,
        /// Total iterations per cell, split evenly across levels [default: 1000]
        #[arg(long)]
        pub budget: usize,
        /// Rotation components swept on the two grid axes [default: 1,0]
        #[arg(long, value_delimiter = ',')]
        pub axes: Vec<usize>,
        /// Ground-truth template-to-reference rotation `x,y,z` [default: 0,0,0]
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        pub truth: Vec<f64>,
    }
}

settings! {
    pub struct SelectSettings {
        /// Fraction of channels kept per level [default: 0.25]
        #[arg(long)]
        pub fraction: f64,
        /// Weight of the texturedness rank [default: 1]
        #[arg(long)]
        pub texturedness_weight: f64,
        /// Weight of the stability rank [default: 1]
        #[arg(long)]
        pub stability_weight: f64,
    }
}

settings! {
    pub struct MosaicSettings {
        /// Distance from every keyframe, radians, that spawns a new one [default: 0.35]
        #[arg(long)]
        pub spawn_threshold: f64,
        /// Lost when the final cost exceeds this multiple of the noise floor [default: 10]
        #[arg(long)]
        pub lost_ratio: f64,
        /// Panorama width in pixels; the height is half of it [default: 1024]
        #[arg(long)]
        pub panorama_width: usize,
    }
}

/// Contents of a `--config` file. Keys are the long flag names with
/// underscores, e.g. `{"mode": "conv", "iters_per_level": 30}`.
#[derive(Debug, Default, Deserialize)]
pub struct FileConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(flatten)]
    pub pyramid: PyramidSettings,
    #[serde(flatten)]
    pub solver: SolverSettings,
    #[serde(flatten)]
    pub basin: BasinSettings,
    #[serde(flatten)]
    pub select: SelectSettings,
    #[serde(flatten)]
    pub mosaic: MosaicSettings,
    #[serde(flatten)]
    unknown: BTreeMap<String, serde_json::Value>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let Some(key) = cfg.unknown.keys().next() {
            bail!("{}: unknown setting `{key}`", path.display());
        }
        Ok(cfg)
    }
}

impl SolverSettings {
    /// Solver configuration for `levels` scheduled levels.
    pub fn resolve(self, levels: usize, default_iterations: Option<usize>) -> Result<SolverConfig> {
        let iters = self
            .iters_per_level
            .or(default_iterations)
            .unwrap_or(DEFAULT_ITERATIONS_PER_LEVEL);
        let base = SolverConfig::uniform(levels, iters);
        let cfg = SolverConfig {
            convergence_epsilon: self.epsilon.unwrap_or(base.convergence_epsilon),
            damping_lambda: self.damping.unwrap_or(base.damping_lambda),
            min_valid_fraction: self.min_valid_fraction.unwrap_or(base.min_valid_fraction),
            ..base
        };
        cfg.validate(levels)?;
        Ok(cfg)
    }

    /// Carries the stopping and overlap settings into a basin sweep; the
    /// iteration budget comes from the basin settings.
    pub fn apply_to_basin(&self, cfg: &mut BasinConfig) {
        if let Some(e) = self.epsilon {
            cfg.convergence_epsilon = e;
        }
        if let Some(f) = self.min_valid_fraction {
            cfg.min_valid_fraction = f;
        }
    }
}

impl BasinSettings {
    pub fn resolve(self) -> Result<BasinConfig> {
        let d = BasinConfig::default();
        let extent = self.extent.unwrap_or(d.range[0][1]);
        let step = self.step.unwrap_or(d.step[0]);
        let axes = match self.axes {
            None => d.axes,
            Some(a) if a.len() == 2 => [a[0], a[1]],
            Some(a) => bail!("--axes takes two components, got {}", a.len()),
        };
        let fixed = match self.truth {
            Some(ref t) if t.len() != 3 => bail!("--truth takes three components, got {}", t.len()),
            _ => d.fixed,
        };
        let cfg = BasinConfig {
            axes,
            range: [[-extent, extent], [-extent, extent]],
            step: [step, step],
            success_threshold: self.threshold.unwrap_or(d.success_threshold),
            max_iterations: self.budget.unwrap_or(BASIN_ITERATION_BUDGET),
            fixed,
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl MosaicSettings {
    pub fn resolve(self, solver: &SolverSettings, levels: Option<Vec<usize>>) -> TrackerConfig {
        let d = TrackerConfig::default();
        TrackerConfig {
            spawn_threshold: self.spawn_threshold.unwrap_or(d.spawn_threshold),
            lost_cost_ratio: self.lost_ratio.unwrap_or(d.lost_cost_ratio),
            levels,
            iterations_per_level: solver.iters_per_level.unwrap_or(d.iterations_per_level),
            convergence_epsilon: solver.epsilon.unwrap_or(d.convergence_epsilon),
            min_valid_fraction: solver.min_valid_fraction.unwrap_or(d.min_valid_fraction),
        }
    }
}
