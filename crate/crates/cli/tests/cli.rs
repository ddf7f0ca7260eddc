//! End-to-end runs of the `semtex` binary on synthetic images.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn semtex() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_semtex"));
    c.env_remove("SEMTEX_WEIGHTS");
    c
}

fn run(args: &[&str]) -> Output {
    semtex().args(args).output().expect("spawn semtex")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "semtex {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn fixture_weights() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/fixture.cwts")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Renders one view of the default scene into `dir/name.png`.
fn view(dir: &Path, name: &str, size: usize, rotation: &str) -> PathBuf {
    let sub = dir.join(name);
    let size = size.to_string();
    ok(&[
        "synth",
        "--width",
        &size,
        "--height",
        &size,
        "--rotation",
        rotation,
        "--out",
        s(&sub),
    ]);
    sub.join("view.png")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn axis_angle(report: &Value) -> [f64; 3] {
    let a = &report["result"]["warp"]["axis_angle"];
    [0, 1, 2].map(|i| a[i].as_f64().unwrap())
}

#[test]
fn align_identical_images_converges_to_identity() {
    let dir = tempfile::tempdir().unwrap();
    let img = view(dir.path(), "a", 96, "0,0,0");
    let out = ok(&["align", s(&img), s(&img)]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["converged"], true);
    assert!(axis_angle(&v).iter().all(|c| c.abs() < 1e-9));
    assert_eq!(v["config"]["command"], "align");
    assert_eq!(v["config"]["schedule"], serde_json::json!([4, 3, 2, 1, 0]));
}

#[test]
fn align_recovers_known_rotation() {
    let dir = tempfile::tempdir().unwrap();
    let t = view(dir.path(), "t", 160, "0,0,0");
    let r = view(dir.path(), "r", 160, "0.01,-0.02,0.005");
    let out_path = dir.path().join("align.json");
    ok(&["align", s(&t), s(&r), "--out", s(&out_path)]);
    let w = axis_angle(&read_json(&out_path));
    // The warp takes template pixels into the reference: R_ref^T.
    let expected = [-0.01, 0.02, -0.005];
    for i in 0..3 {
        assert!((w[i] - expected[i]).abs() < 1e-3, "{w:?}");
    }
}

#[test]
fn align_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let t = view(dir.path(), "t", 64, "0,0,0");
    let r = view(dir.path(), "r", 64, "0,0.05,0");
    let out = run(&["align", s(&t), s(&r), "--iters-per-level", "1", "--levels", "0"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["align", s(&t), "/nonexistent/x.png"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/x.png"));
}

#[test]
fn weights_rules() {
    let dir = tempfile::tempdir().unwrap();
    let img = view(dir.path(), "a", 32, "0,0,0");
    let out = run(&["extract", s(&img), "--mode", "conv", "--out", s(&dir.path().join("e"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("SEMTEX_WEIGHTS"));
    let w = fixture_weights();
    let out = run(&[
        "extract",
        s(&img),
        "--weights",
        s(&w),
        "--out",
        s(&dir.path().join("e")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    // The environment variable stands in for --weights.
    let out = semtex()
        .env("SEMTEX_WEIGHTS", &w)
        .args([
            "extract",
            s(&img),
            "--mode",
            "conv",
            "--out",
            s(&dir.path().join("env")),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
}

#[test]
fn extract_writes_one_file_per_level() {
    let dir = tempfile::tempdir().unwrap();
    let img = view(dir.path(), "a", 64, "0,0,0");
    let rgb = dir.path().join("rgb");
    ok(&["extract", s(&img), "--out", s(&rgb)]);
    let m = read_json(&rgb.join("manifest.json"));
    let levels = m["levels"].as_array().unwrap();
    assert_eq!(levels.len(), 5);
    for (i, l) in levels.iter().enumerate() {
        assert_eq!(l["width"], 64 >> i);
        assert!(rgb.join(format!("level_{i:02}.ftns")).exists());
    }
    let conv = dir.path().join("conv");
    ok(&[
        "extract",
        s(&img),
        "--mode",
        "conv",
        "--weights",
        s(&fixture_weights()),
        "--out",
        s(&conv),
    ]);
    let m = read_json(&conv.join("manifest.json"));
    assert_eq!(m["levels"][0]["width"], 224);
    assert_eq!(m["levels"][1]["width"], 112);
    assert_eq!(m["levels"][1]["channels"], 6);
    let v = semtex::tensor::read_tensor(conv.join("level_01.ftns")).unwrap();
    assert_eq!((v.width(), v.height(), v.channels()), (112, 112, 6));
}

#[test]
fn basin_on_identical_images_contains_origin() {
    let dir = tempfile::tempdir().unwrap();
    let img = view(dir.path(), "a", 64, "0,0,0");
    let out = dir.path().join("basin");
    ok(&[
        "basin",
        s(&img),
        s(&img),
        "--extent",
        "0.1",
        "--step",
        "0.05",
        "--levels",
        "2",
        "--out",
        s(&out),
    ]);
    let v = read_json(&out.join("basin.json"));
    assert!(v["result"]["basin_area"].as_f64().unwrap() > 0.0);
    let csv = std::fs::read_to_string(out.join("basin.csv")).unwrap();
    assert!(csv.starts_with("p0_offset,p1_offset,converged,final_error_rad,iterations\n"));
    assert!(csv.lines().any(|l| l.starts_with("0,0,1,")), "{csv}");
    assert!(out.join("heat.csv").exists());
}

#[test]
fn full_mask_leaves_alignment_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let seq_dir = dir.path().join("seq");
    ok(&[
        "synth",
        "--width",
        "64",
        "--height",
        "64",
        "--frames",
        "3",
        "--pan-step",
        "0.02",
        "--out",
        s(&seq_dir),
    ]);
    let sel = dir.path().join("sel");
    let w = fixture_weights();
    let conv = ["--mode", "conv", "--weights", s(&w)];
    let seq = seq_dir.join("sequence.json");
    let mut args = vec!["select", "--sequence", s(&seq), "--fraction", "1", "--out", s(&sel)];
    args.extend(conv);
    ok(&args);
    let scores = read_json(&sel.join("scores.json"));
    assert_eq!(scores.as_array().unwrap().len(), 4 + 6);
    assert!(scores.as_array().unwrap().iter().all(|s| s["selected"] == true));

    let t = seq_dir.join("frame_0000.png");
    let r = seq_dir.join("frame_0001.png");
    let mut base = vec!["align", s(&t), s(&r), "--iters-per-level", "5"];
    base.extend(conv);
    let plain = run(&base);
    let plain_json: Value = serde_json::from_slice(&plain.stdout).unwrap();
    let mask = sel.join("mask.json");
    let mut masked_args = base.clone();
    masked_args.extend(["--mask", s(&mask)]);
    let masked = run(&masked_args);
    let masked_json: Value = serde_json::from_slice(&masked.stdout).unwrap();
    assert_eq!(plain.status.code(), masked.status.code());
    assert_eq!(plain_json["result"], masked_json["result"]);
}

#[test]
fn select_random_mask_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let seq_dir = dir.path().join("seq");
    ok(&[
        "synth",
        "--width",
        "48",
        "--height",
        "48",
        "--frames",
        "2",
        "--out",
        s(&seq_dir),
    ]);
    let seq = seq_dir.join("sequence.json");
    let w = fixture_weights();
    let masks: Vec<Value> = ["a", "b"]
        .iter()
        .map(|n| {
            let out = dir.path().join(n);
            ok(&[
                "select",
                "--sequence",
                s(&seq),
                "--mode",
                "conv",
                "--weights",
                s(&w),
                "--random",
                "--seed",
                "5",
                "--out",
                s(&out),
            ]);
            read_json(&out.join("mask.json"))
        })
        .collect();
    assert_eq!(masks[0], masks[1]);
    assert_eq!(masks[0]["levels"][1].as_array().unwrap().len(), 2);
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let img = view(dir.path(), "a", 64, "0,0,0");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"iters_per_level": 3, "epsilon": 0.001, "levels": [1, 0]}"#).unwrap();
    let v: Value = serde_json::from_slice(&ok(&["align", s(&img), s(&img), "--config", s(&cfg)]).stdout).unwrap();
    assert_eq!(v["result"]["config"]["iterations_per_level"], serde_json::json!([3, 3]));
    assert_eq!(v["result"]["config"]["convergence_epsilon"], 0.001);
    let v: Value =
        serde_json::from_slice(&ok(&["align", s(&img), s(&img), "--config", s(&cfg), "--iters-per-level", "7"]).stdout)
            .unwrap();
    assert_eq!(v["result"]["config"]["iterations_per_level"], serde_json::json!([7, 7]));
    assert_eq!(v["result"]["config"]["damping_lambda"], 1e-8);
    std::fs::write(&cfg, r#"{"iters_per_levl": 3}"#).unwrap();
    assert_eq!(
        run(&["align", s(&img), s(&img), "--config", s(&cfg)]).status.code(),
        Some(1)
    );
}

#[test]
fn costsurf_writes_csv_grid() {
    let dir = tempfile::tempdir().unwrap();
    let img = view(dir.path(), "a", 64, "0,0,0");
    let out = dir.path().join("cs");
    ok(&[
        "costsurf",
        s(&img),
        s(&img),
        "--extent",
        "0.1",
        "--step",
        "0.05",
        "--level",
        "1",
        "--out",
        s(&out),
    ]);
    let csv = std::fs::read_to_string(out.join("surface.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("p0,p1,cost,valid_fraction"));
    assert_eq!(lines.count(), 25);
    assert!(csv.contains("\n0,0,0,1\n"), "{csv}");
    let cfg = read_json(&out.join("config.json"));
    assert_eq!(cfg["extra"]["argmin"]["cost"], 0.0);
}

#[test]
fn mosaic_writes_trajectory_and_panorama() {
    let dir = tempfile::tempdir().unwrap();
    let seq_dir = dir.path().join("seq");
    ok(&[
        "synth",
        "--width",
        "64",
        "--height",
        "48",
        "--frames",
        "12",
        "--pan-step",
        "0.05",
        "--out",
        s(&seq_dir),
    ]);
    let out = dir.path().join("mosaic");
    ok(&[
        "mosaic",
        "--sequence",
        s(&seq_dir.join("sequence.json")),
        "--rgb-levels",
        "3",
        "--panorama-width",
        "256",
        "--out",
        s(&out),
    ]);
    let traj = std::fs::read_to_string(out.join("trajectory.jsonl")).unwrap();
    let recs: Vec<Value> = traj.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 12);
    assert!(recs.iter().all(|r| r["status"] == "tracking"));
    let last = recs[11]["rotation_axis_angle"][1].as_f64().unwrap();
    assert!((last - 0.55).abs() < 1e-3, "{last}");
    let pano = semtex::image_io::load_image(out.join("panorama.png")).unwrap();
    assert_eq!((pano.width(), pano.height()), (256, 128));
    let m = read_json(&out.join("mosaic.json"));
    assert!(m["keyframes"].as_array().unwrap().len() >= 2);
}

fn outputs_with_threads(threads: &str, dir: &Path) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let t = view(dir, "t", 64, "0,0,0");
    let r = view(dir, "r", 64, "0.01,0.02,0");
    let align = ok(&["--threads", threads, "align", s(&t), s(&r)]).stdout;
    let basin = dir.join(format!("basin{threads}"));
    ok(&[
        "--threads",
        threads,
        "basin",
        s(&t),
        s(&r),
        "--extent",
        "0.1",
        "--step",
        "0.1",
        "--truth",
        "-0.01,-0.02,0",
        "--out",
        s(&basin),
    ]);
    let seq = dir.join("seq");
    ok(&[
        "synth",
        "--width",
        "64",
        "--height",
        "48",
        "--frames",
        "6",
        "--pan-step",
        "0.05",
        "--out",
        s(&seq),
    ]);
    let mosaic = dir.join(format!("mosaic{threads}"));
    ok(&[
        "--threads",
        threads,
        "mosaic",
        "--sequence",
        s(&seq.join("sequence.json")),
        "--rgb-levels",
        "3",
        "--panorama-width",
        "128",
        "--out",
        s(&mosaic),
    ]);
    (
        align,
        std::fs::read(basin.join("basin.json")).unwrap(),
        std::fs::read(mosaic.join("panorama.png")).unwrap(),
    )
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let one = outputs_with_threads("1", dir.path());
    let eight = outputs_with_threads("8", dir.path());
    assert_eq!(one.0, eight.0);
    assert_eq!(one.1, eight.1);
    assert_eq!(one.2, eight.2);
}

#[test]
fn help_lists_defaults() {
    let out = ok(&["basin", "--help"]);
    let help = String::from_utf8_lossy(&out.stdout);
    for needle in [
        "[default: 0.04]",
        "[default: 1000]",
        "[default: 0.07]",
        "[default: 1e-7]",
        "SEMTEX_WEIGHTS",
    ] {
        assert!(help.contains(needle), "missing {needle} in\n{help}");
    }
}
