//! `semtex`: command-line experiments over RGB and conv feature pyramids.
//!
//! Every subcommand resolves its settings from command-line flags, then an
//! optional JSON file given with `--config`, then built-in defaults, and
//! writes the resolved settings next to its results.

mod config;
mod sequence;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::{Matrix3, Vector3};
use serde::Serialize;

use semtex::basin::{self, BasinConfig};
use semtex::featext::{self, PyramidKind};
use semtex::featsel::{self, FeatureMask, FeatureScore, RankWeights, RankedScore};
use semtex::image_io::{load_rgb, save_image};
use semtex::lk::{self, cost_surface, Schedule, SurfaceAxis, Termination};
use semtex::mosaic::{self, Tracker};
use semtex::synth::{self, Scene};
use semtex::tensor::write_tensor;
use semtex::warp::{so3_exp, so3_log};
use semtex::{FeaturePyramid, Image, Intrinsics, RotationWarp};

use config::{
    BasinSettings, FileConfig, Mode, MosaicSettings, PyramidSettings, SelectSettings, SolverSettings, DEFAULT_SEED,
};
use sequence::Sequence;

#[derive(Parser)]
#[command(
    name = "semtex",
    version,
    about = "Dense rotation alignment over RGB and conv feature pyramids"
)]
struct Cli {
    /// Worker threads; results do not depend on it [default: number of CPUs]
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write every pyramid level of an image as an FTNS file
    Extract(ExtractArgs),
    /// Align a reference image to a template; exit 0 converged, 2 not converged, 1 error
    Align(AlignArgs),
    /// Evaluate the alignment cost over a grid of two rotation components
    Costsurf(CostsurfArgs),
    /// Measure the convergence basin over a grid of initial offsets
    Basin(BasinArgs),
    /// Score channels on a sequence with known rotations and write a channel mask
    Select(SelectArgs),
    /// Track a frame sequence and render an equirectangular panorama
    Mosaic(MosaicArgs),
    /// Render synthetic test images and sequences
    Synth(SynthArgs),
}

#[derive(Args)]
struct Common {
    /// JSON file with default settings; command-line flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for randomized steps [default: 7]
    #[arg(long)]
    seed: Option<u64>,
    /// Output path
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractArgs {
    image: PathBuf,
    #[command(flatten)]
    pyramid: PyramidSettings,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct AlignArgs {
    template: PathBuf,
    reference: PathBuf,
    /// Initial template-to-reference rotation as an axis-angle `x,y,z` [default: 0,0,0]
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    init: Option<Vec<f64>>,
    /// Channel mask JSON written by `select`
    #[arg(long)]
    mask: Option<PathBuf>,
    #[command(flatten)]
    pyramid: PyramidSettings,
    #[command(flatten)]
    solver: SolverSettings,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct CostsurfArgs {
    template: PathBuf,
    reference: PathBuf,
    /// Pyramid level to evaluate [default: 0]
    #[arg(long)]
    level: Option<usize>,
    /// Grid centre as an axis-angle `x,y,z` [default: 0,0,0]
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    center: Option<Vec<f64>>,
    #[command(flatten)]
    pyramid: PyramidSettings,
    #[command(flatten)]
    basin: BasinSettings,
    #[command(flatten)]
    solver: SolverSettings,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct BasinArgs {
    template: PathBuf,
    reference: PathBuf,
    /// Sweep every level separately and report per-band areas
    #[arg(long)]
    per_level: bool,
    /// Channel mask JSON written by `select`
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Compare ranked and random channel subsets at these fractions (needs --scores)
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    /// Channel scores JSON written by `select`
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Random subsets per fraction [default: 20]
    #[arg(long)]
    random_subsets: Option<usize>,
    #[command(flatten)]
    pyramid: PyramidSettings,
    #[command(flatten)]
    basin: BasinSettings,
    #[command(flatten)]
    solver: SolverSettings,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SelectArgs {
    /// Sequence JSON files; scores are averaged over all of them
    #[arg(long = "sequence", required = true)]
    sequences: Vec<PathBuf>,
    /// Write a seeded random mask instead of the ranked one
    #[arg(long)]
    random: bool,
    #[command(flatten)]
    pyramid: PyramidSettings,
    #[command(flatten)]
    select: SelectSettings,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct MosaicArgs {
    /// Sequence JSON listing the frames in order
    #[arg(long)]
    sequence: Option<PathBuf>,
    /// Frame images in order (alternative to --sequence)
    frames: Vec<PathBuf>,
    #[command(flatten)]
    pyramid: PyramidSettings,
    #[command(flatten)]
    solver: SolverSettings,
    #[command(flatten)]
    mosaic: MosaicSettings,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SynthArgs {
    /// Image width [default: 224]
    #[arg(long)]
    width: Option<usize>,
    /// Image height [default: 224]
    #[arg(long)]
    height: Option<usize>,
    /// Focal length in pixels [default: image width]
    #[arg(long)]
    focal: Option<f64>,
    /// Camera rotation of a single rendered view as an axis-angle `x,y,z`
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    rotation: Option<Vec<f64>>,
    /// Apply the standard gamma/gain/bias perturbation
    #[arg(long)]
    illumination: bool,
    /// Gaussian blur sigma in pixels
    #[arg(long)]
    blur: Option<f64>,
    /// Render a panning sequence of this many frames instead of one view
    #[arg(long)]
    frames: Option<usize>,
    /// Pan per frame in radians [default: 0.01]
    #[arg(long)]
    pan_step: Option<f64>,
    #[command(flatten)]
    common: Common,
}

/// Settings echoed into every output so results describe themselves.
#[derive(Serialize)]
struct Echo<'a> {
    command: &'a str,
    inputs: Vec<String>,
    mode: Mode,
    #[serde(skip_serializing_if = "Option::is_none")]
    weights: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rgb_levels: Option<usize>,
    schedule: Vec<usize>,
    intrinsics: Intrinsics,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    solver: Option<lk::SolverConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    basin: Option<BasinConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    extra: Option<serde_json::Value>,
}

/// Pyramid construction resolved for one run.
struct Setup {
    kind: PyramidKind,
    mode: Mode,
    weights: Option<PathBuf>,
    rgb_levels: usize,
    levels: Option<Vec<usize>>,
    focal: Option<f64>,
}

impl Setup {
    fn resolve(cli: &PyramidSettings, file: &FileConfig) -> Result<Self> {
        let p = cli.clone().or(file.pyramid.clone());
        let mode = p.mode.unwrap_or(Mode::Rgb);
        let rgb_levels = p.rgb_levels.unwrap_or(featext::DEFAULT_RGB_LEVELS);
        let (kind, weights) = match mode {
            Mode::Rgb => {
                ensure!(p.weights.is_none(), "rgb mode takes no --weights");
                (PyramidKind::RgbGaussian { levels: rgb_levels }, None)
            }
            Mode::Conv => {
                let path = p
                    .weights
                    .or_else(|| std::env::var_os("SEMTEX_WEIGHTS").map(PathBuf::from))
                    .context("conv mode needs --weights or SEMTEX_WEIGHTS")?;
                let w = featext::load_weights(&path).with_context(|| format!("loading {}", path.display()))?;
                (PyramidKind::Conv(Arc::new(w)), Some(path))
            }
        };
        Ok(Self {
            kind,
            mode,
            weights,
            rgb_levels,
            levels: p.levels,
            focal: p.focal,
        })
    }

    /// Working image, its intrinsics and its pyramid.
    fn load(&self, path: &Path) -> Result<(Image, Intrinsics, FeaturePyramid)> {
        let img = load_rgb(path).with_context(|| format!("reading {}", path.display()))?;
        let (w, h) = (img.width(), img.height());
        let k = match self.focal {
            Some(f) => Intrinsics::new(f, f, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)?,
            None => Intrinsics::default_for(w, h),
        };
        let working = self.kind.working_image(&img);
        let pyr = self
            .kind
            .build(&working)
            .with_context(|| format!("building pyramid of {}", path.display()))?;
        Ok((working, self.kind.working_intrinsics(&k, w, h), pyr))
    }

    fn load_pair(&self, t: &Path, r: &Path) -> Result<(Intrinsics, FeaturePyramid, FeaturePyramid)> {
        let (ti, k, tp) = self.load(t)?;
        let (ri, _, rp) = self.load(r)?;
        ensure!(
            (ti.width(), ti.height()) == (ri.width(), ri.height()),
            "template and reference sizes differ"
        );
        Ok((k, tp, rp))
    }

    fn schedule(&self, pyr: &FeaturePyramid) -> Result<Schedule> {
        let s = match &self.levels {
            Some(l) => Schedule { levels: l.clone() },
            None => Schedule::all(pyr),
        };
        s.validate(pyr)?;
        Ok(s)
    }

    fn echo<'a>(&self, command: &'a str, inputs: &[&Path], schedule: &Schedule, k: Intrinsics, seed: u64) -> Echo<'a> {
        Echo {
            command,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            mode: self.mode,
            weights: self.weights.as_ref().map(|p| p.display().to_string()),
            rgb_levels: (self.mode == Mode::Rgb).then_some(self.rgb_levels),
            schedule: schedule.levels.clone(),
            intrinsics: k,
            seed,
            solver: None,
            basin: None,
            extra: None,
        }
    }
}

fn parse_rotation(v: Option<Vec<f64>>) -> Result<Vector3<f64>> {
    match v {
        None => Ok(Vector3::zeros()),
        Some(v) if v.len() == 3 => Ok(Vector3::new(v[0], v[1], v[2])),
        Some(v) => bail!("expected three comma-separated values, got {}", v.len()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn out_dir(common: &Common, file: &FileConfig) -> Result<PathBuf> {
    let dir = common.out.clone().or(file.out.clone()).context("--out is required")?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_mask(path: &Path) -> Result<FeatureMask> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn apply_mask(mask: Option<&Path>, t: FeaturePyramid, r: FeaturePyramid) -> Result<(FeaturePyramid, FeaturePyramid)> {
    match mask {
        None => Ok((t, r)),
        Some(p) => {
            let m = load_mask(p)?;
            Ok((m.apply(&t)?, m.apply(&r)?))
        }
    }
}

fn cmd_extract(a: ExtractArgs) -> Result<ExitCode> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let setup = Setup::resolve(&a.pyramid, &file)?;
    let dir = out_dir(&a.common, &file)?;
    let (_, k, pyr) = setup.load(&a.image)?;
    let mut levels = Vec::new();
    for (i, v) in pyr.levels().iter().enumerate() {
        let name = format!("level_{i:02}.ftns");
        write_tensor(v, dir.join(&name))?;
        levels.push(serde_json::json!({
            "file": name,
            "channels": v.channels(),
            "height": v.height(),
            "width": v.width(),
            "scale": pyr.scale(i),
        }));
    }
    let seed = a.common.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
    let mut echo = setup.echo("extract", &[&a.image], &Schedule::all(&pyr), k, seed);
    echo.extra = Some(serde_json::json!({
        "mean_rgb": featext::VGG_MEAN_RGB,
        "conv_input_size": featext::CONV_INPUT_SIZE,
        "bands": pyr.bands(),
    }));
    write_json(
        &dir.join("manifest.json"),
        &serde_json::json!({ "levels": levels, "config": echo }),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_align(a: AlignArgs) -> Result<ExitCode> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let setup = Setup::resolve(&a.pyramid, &file)?;
    let (k, t, r) = setup.load_pair(&a.template, &a.reference)?;
    let (t, r) = apply_mask(a.mask.as_deref(), t, r)?;
    let schedule = setup.schedule(&t)?;
    let solver = a.solver.clone().or(file.solver.clone()).resolve(schedule.len(), None)?;
    let init = RotationWarp::from_axis_angle(parse_rotation(a.init.clone())?, k);
    let res = lk::align(&t, &r, &init, schedule.clone(), solver.clone())?;
    let converged = res.termination == Termination::Epsilon;
    let seed = a.common.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
    let mut echo = setup.echo("align", &[&a.template, &a.reference], &schedule, k, seed);
    echo.solver = Some(solver.clone());
    echo.extra = Some(serde_json::json!({ "init": a.init.unwrap_or(vec![0.0; 3]), "mask": a.mask }));
    let out = serde_json::json!({
        "converged": converged,
        "result": res.report(&solver),
        "config": echo,
    });
    match a.common.out.or(file.out) {
        Some(p) => write_json(&p, &out)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{}", serde_json::to_string_pretty(&out)?).context("writing to stdout")?;
        }
    }
    Ok(if converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn cmd_costsurf(a: CostsurfArgs) -> Result<ExitCode> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let setup = Setup::resolve(&a.pyramid, &file)?;
    let dir = out_dir(&a.common, &file)?;
    let (k, t, r) = setup.load_pair(&a.template, &a.reference)?;
    let level = a.level.unwrap_or(0);
    ensure!(
        level < t.num_levels(),
        "level {level} out of range (pyramid has {})",
        t.num_levels()
    );
    let bcfg = a.basin.clone().or(file.basin.clone()).resolve()?;
    let solver = a.solver.clone().or(file.solver.clone()).resolve(1, None)?;
    let axes = [0, 1].map(|i| SurfaceAxis {
        param: bcfg.axes[i],
        min: bcfg.range[i][0],
        max: bcfg.range[i][1],
        step: bcfg.step[i],
    });
    let scale = t.scale(level) as f64;
    let base = RotationWarp::from_axis_angle(parse_rotation(a.center.clone())?, k.scaled_to(scale));
    let surf = cost_surface(t.level(level), r.level(level), &base, axes, solver.min_valid_fraction)?;
    write_text(&dir.join("surface.csv"), &surf.to_csv())?;
    let seed = a.common.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
    let mut echo = setup.echo(
        "costsurf",
        &[&a.template, &a.reference],
        &Schedule::single(level),
        k,
        seed,
    );
    echo.extra = Some(serde_json::json!({
        "axes": axes,
        "center": a.center.unwrap_or(vec![0.0; 3]),
        "min_valid_fraction": solver.min_valid_fraction,
        "argmin": surf.argmin().map(|((i, j), c)| serde_json::json!({"p0": surf.p0[i], "p1": surf.p1[j], "cost": c})),
    }));
    write_json(&dir.join("config.json"), &echo)?;
    Ok(ExitCode::SUCCESS)
}

fn basin_files(dir: &Path, stem: &str, res: &basin::BasinResult) -> Result<()> {
    write_text(&dir.join(format!("{stem}.csv")), &res.to_csv())?;
    write_text(
        &dir.join(format!("heat{}.csv", stem.strip_prefix("basin").unwrap_or(""))),
        &res.heat_grid(),
    )
}

fn cmd_basin(a: BasinArgs) -> Result<ExitCode> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let setup = Setup::resolve(&a.pyramid, &file)?;
    let dir = out_dir(&a.common, &file)?;
    let (k, t, r) = setup.load_pair(&a.template, &a.reference)?;
    let (t, r) = apply_mask(a.mask.as_deref(), t, r)?;
    let mut bcfg = a.basin.clone().or(file.basin.clone()).resolve()?;
    let solver_settings = a.solver.clone().or(file.solver.clone());
    solver_settings.apply_to_basin(&mut bcfg);
    let truth = RotationWarp::from_axis_angle(bcfg_truth(&a.basin, &file)?, k);
    let schedule = setup.schedule(&t)?;
    let seed = a.common.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
    let mut echo = setup.echo("basin", &[&a.template, &a.reference], &schedule, k, seed);
    echo.basin = Some(bcfg.clone());

    if let Some(fractions) = a.fractions.clone() {
        let scores_path = a.scores.as_deref().context("--fractions needs --scores")?;
        let text = fs::read_to_string(scores_path).with_context(|| format!("reading {}", scores_path.display()))?;
        let ranked: Vec<RankedScore> = serde_json::from_str(&text)?;
        let scores: Vec<FeatureScore> = ranked
            .iter()
            .map(|s| FeatureScore {
                level: s.level,
                channel: s.channel,
                texturedness: s.texturedness,
                instability: s.instability,
            })
            .collect();
        let subsets = a.random_subsets.unwrap_or(20);
        let weights = RankWeights::default();
        let aligner_area = |m: &FeatureMask| -> Result<f64> {
            let (mt, mr) = (m.apply(&t)?, m.apply(&r)?);
            Ok(basin::sweep(&mt, &mr, &truth, &bcfg, schedule.clone())?.basin_area)
        };
        let mut csv = String::from("fraction,selected_area,random_mean_area,random_min_area,random_max_area\n");
        for &f in &fractions {
            let (mask, _) = featsel::rank_and_select(&scores, f, weights)?;
            let selected = aligner_area(&mask)?;
            let mut random = Vec::with_capacity(subsets);
            for i in 0..subsets {
                random.push(aligner_area(&featsel::random_mask(&t.shape(), f, seed + i as u64)?)?);
            }
            let mean = random.iter().sum::<f64>() / random.len().max(1) as f64;
            let min = random.iter().copied().fold(f64::INFINITY, f64::min);
            let max = random.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            csv.push_str(&format!("{f},{selected},{mean},{min},{max}\n"));
        }
        write_text(&dir.join("fractions.csv"), &csv)?;
        echo.extra =
            Some(serde_json::json!({ "fractions": fractions, "random_subsets": subsets, "scores": scores_path }));
        write_json(&dir.join("config.json"), &echo)?;
    } else if a.per_level {
        let sweeps = basin::per_level_sweep(&t, &r, &truth, &bcfg)?;
        for s in &sweeps {
            basin_files(&dir, &format!("basin_level_{:02}", s.level), &s.result)?;
        }
        let bands = basin::band_areas(&sweeps);
        write_json(
            &dir.join("basin.json"),
            &serde_json::json!({ "levels": sweeps, "band_areas": bands, "config": echo }),
        )?;
    } else {
        let res = basin::sweep(&t, &r, &truth, &bcfg, schedule)?;
        basin_files(&dir, "basin", &res)?;
        write_json(
            &dir.join("basin.json"),
            &serde_json::json!({ "result": res, "config": echo }),
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

fn bcfg_truth(cli: &BasinSettings, file: &FileConfig) -> Result<Vector3<f64>> {
    parse_rotation(cli.truth.clone().or(file.basin.truth.clone()))
}

fn cmd_select(a: SelectArgs) -> Result<ExitCode> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let setup = Setup::resolve(&a.pyramid, &file)?;
    let dir = out_dir(&a.common, &file)?;
    let sel = a.select.clone().or(file.select.clone());
    let fraction = sel.fraction.unwrap_or(0.25);
    let weights = RankWeights {
        texturedness: sel.texturedness_weight.unwrap_or(1.0),
        stability: sel.stability_weight.unwrap_or(1.0),
    };
    let seed = a.common.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
    let mut runs = Vec::new();
    let mut k0 = None;
    let mut shape = Vec::new();
    for path in &a.sequences {
        let seq = Sequence::load(path)?;
        ensure!(
            seq.frames.len() >= 2,
            "{}: a sequence needs at least two frames",
            path.display()
        );
        let r0 = so3_exp(&seq.frames[0].rotation_vector());
        let mut frames = Vec::new();
        for f in &seq.frames {
            let (_, k, pyr) = setup.load(&f.image)?;
            k0.get_or_insert(k);
            shape = pyr.shape();
            // Frame pixels map into frame 0 through R_0^T R_i.
            let rel = r0.transpose() * so3_exp(&f.rotation_vector());
            frames.push((pyr, RotationWarp::new(rel, k)));
        }
        runs.push(featsel::score_sequence(&frames)?);
    }
    let scores = featsel::average_scores(&runs)?;
    let (mask, ranked) = featsel::rank_and_select(&scores, fraction, weights)?;
    let mask = if a.random {
        featsel::random_mask(&shape, fraction, seed)?
    } else {
        mask
    };
    write_json(&dir.join("scores.json"), &ranked)?;
    write_json(&dir.join("mask.json"), &mask)?;
    let inputs: Vec<&Path> = a.sequences.iter().map(PathBuf::as_path).collect();
    let k = k0.context("no frames")?;
    let mut echo = setup.echo(
        "select",
        &inputs,
        &Schedule {
            levels: (0..shape.len()).rev().collect(),
        },
        k,
        seed,
    );
    echo.extra = Some(serde_json::json!({ "fraction": fraction, "rank_weights": weights, "random": a.random }));
    write_json(&dir.join("config.json"), &echo)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_mosaic(a: MosaicArgs) -> Result<ExitCode> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let setup = Setup::resolve(&a.pyramid, &file)?;
    let dir = out_dir(&a.common, &file)?;
    let frames: Vec<PathBuf> = match &a.sequence {
        Some(p) => Sequence::load(p)?.frames.into_iter().map(|f| f.image).collect(),
        None => a.frames.clone(),
    };
    ensure!(!frames.is_empty(), "no frames given");
    let first = load_rgb(&frames[0]).with_context(|| format!("reading {}", frames[0].display()))?;
    let (w, h) = (first.width(), first.height());
    let k = match setup.focal {
        Some(f) => Intrinsics::new(f, f, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)?,
        None => Intrinsics::default_for(w, h),
    };
    let k = setup.kind.working_intrinsics(&k, w, h);
    let solver = a.solver.clone().or(file.solver.clone());
    let tcfg = a
        .mosaic
        .clone()
        .or(file.mosaic.clone())
        .resolve(&solver, setup.levels.clone());
    let mut tracker = Tracker::new(setup.kind.clone(), k, tcfg.clone());
    let mut lines = String::new();
    for (i, path) in frames.iter().enumerate() {
        let img = if i == 0 {
            first.clone()
        } else {
            load_rgb(path).with_context(|| format!("reading {}", path.display()))?
        };
        ensure!(
            (img.width(), img.height()) == (w, h),
            "{}: frame size differs from the first frame",
            path.display()
        );
        let rec = tracker.track(&img)?;
        lines.push_str(&serde_json::to_string(&rec)?);
        lines.push('\n');
    }
    write_text(&dir.join("trajectory.jsonl"), &lines)?;
    let width = a.mosaic.panorama_width.or(file.mosaic.panorama_width).unwrap_or(1024);
    save_image(&tracker.render_panorama(width), dir.join("panorama.png"))?;
    let stats = mosaic::overlap_stats(tracker.keyframes(), &k, width);
    let keyframes: Vec<_> = tracker
        .keyframes()
        .iter()
        .map(|kf| {
            let w = so3_log(&kf.rotation);
            serde_json::json!({ "id": kf.id, "rotation_axis_angle": [w.x, w.y, w.z], "noise_floor": kf.noise_floor })
        })
        .collect();
    let seed = a.common.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
    let inputs: Vec<&Path> = frames.iter().map(PathBuf::as_path).collect();
    let schedule = Schedule {
        levels: tcfg.levels.clone().unwrap_or_default(),
    };
    let mut echo = setup.echo("mosaic", &inputs, &schedule, k, seed);
    echo.extra = Some(serde_json::json!({ "tracker": tcfg, "panorama_width": width }));
    write_json(
        &dir.join("mosaic.json"),
        &serde_json::json!({ "keyframes": keyframes, "overlap": stats, "status": tracker.status(), "config": echo }),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(a: SynthArgs) -> Result<ExitCode> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let dir = out_dir(&a.common, &file)?;
    let seed = a.common.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
    let (w, h) = (a.width.unwrap_or(224), a.height.unwrap_or(224));
    ensure!(w > 0 && h > 0, "image size must be positive");
    let k = match a.focal {
        Some(f) => Intrinsics::new(f, f, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)?,
        None => Intrinsics::default_for(w, h),
    };
    let scene = Scene::new(seed);
    let finish = |img: Image| -> Image {
        let img = if a.illumination {
            synth::standard_illumination(&img)
        } else {
            img
        };
        match a.blur {
            Some(s) if s > 0.0 => semtex::tensor::gaussian_blur(&img, s),
            _ => img,
        }
    };
    match a.frames {
        Some(n) => {
            let step = a.pan_step.unwrap_or(0.01);
            let mut seq = Sequence { frames: Vec::new() };
            for i in 0..n {
                let r: Matrix3<f64> = synth::pan(step * i as f64);
                let name = format!("frame_{i:04}.png");
                save_image(&finish(scene.render(&r, &k, w, h)), dir.join(&name))?;
                seq.frames.push(sequence::Frame::new(PathBuf::from(name), &r));
            }
            write_json(&dir.join("sequence.json"), &seq)?;
        }
        None => {
            let r = so3_exp(&parse_rotation(a.rotation)?);
            save_image(&finish(scene.render(&r, &k, w, h)), dir.join("view.png"))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        ensure!(n > 0, "--threads must be positive");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Extract(a) => cmd_extract(a),
        Command::Align(a) => cmd_align(a),
        Command::Costsurf(a) => cmd_costsurf(a),
        Command::Basin(a) => cmd_basin(a),
        Command::Select(a) => cmd_select(a),
        Command::Mosaic(a) => cmd_mosaic(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
