//! End-to-end runs of the `advmetric` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use advmetric_core::image::{read_pgm, write_pgm};
use advmetric_core::synth::{natural_scene, SceneParams};
use advmetric_core::ImagePlane;
use serde_json::Value;
use tempfile::TempDir;

fn advmetric(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advmetric"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn save(dir: &Path, name: &str, img: &ImagePlane) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, write_pgm(img)).unwrap();
    path
}

fn scene(seed: u64, size: usize) -> ImagePlane {
    natural_scene(352, 288, seed, &SceneParams::default())
        .crop(100, 80, size, size)
        .unwrap()
}

fn manifest(out: &Path) -> Value {
    serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn identity_pair_scores_the_intercept_plus_weights() {
    let tmp = TempDir::new().unwrap();
    let r = save(
        tmp.path(),
        "r.pgm",
        &natural_scene(352, 288, 3, &SceneParams::default()),
    );
    let out = tmp.path().join("out");
    let run = advmetric(&["--out", s(&out), "score", "--ref", s(&r), "--dist", s(&r)]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let report: Value = serde_json::from_slice(&fs::read(out.join("score.json")).unwrap()).unwrap();
    assert!((report["fused_unclipped"].as_f64().unwrap() - 97.4).abs() < 1e-9);
    assert_eq!(report["psnr"], "inf");
    let printed: Value = serde_json::from_slice(&run.stdout).unwrap();
    assert_eq!(printed, report);
}

#[test]
fn shift_of_rms_25_5_gives_twenty_db() {
    // 8-bit files cannot carry +25.5, but a 103:101 mix of +25 and +26 has a
    // mean squared error of exactly 25.5^2
    let tmp = TempDir::new().unwrap();
    let r = ImagePlane::from_fn(68, 48, |x, y| 40.0 + ((x * 7 + y * 3) % 150) as f64);
    let d = ImagePlane::from_fn(68, 48, |x, y| {
        r.get(x, y) + if y * 68 + x < 16 * 103 { 25.0 } else { 26.0 }
    });
    let (rp, dp) = (save(tmp.path(), "r.pgm", &r), save(tmp.path(), "d.pgm", &d));
    let out = tmp.path().join("out");
    let run = advmetric(&["--out", s(&out), "score", "--ref", s(&rp), "--dist", s(&dp)]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let psnr = manifest(&out)["results"]["psnr"].as_f64().unwrap();
    assert!((psnr - 20.0).abs() < 1e-9, "{psnr}");
}

#[test]
fn missing_input_is_an_io_error_naming_the_path() {
    let tmp = TempDir::new().unwrap();
    let gone = tmp.path().join("nope.pgm");
    let run = advmetric(&[
        "--out",
        s(&tmp.path().join("o")),
        "score",
        "--ref",
        s(&gone),
        "--dist",
        s(&gone),
    ]);
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("nope.pgm"));
}

#[test]
fn malformed_image_is_a_format_error() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.pgm");
    fs::write(&bad, b"P5\n4 4\n255\nxx").unwrap();
    let run = advmetric(&[
        "--out",
        s(&tmp.path().join("o")),
        "score",
        "--ref",
        s(&bad),
        "--dist",
        s(&bad),
    ]);
    assert_eq!(run.status.code(), Some(3));
}

#[test]
fn usage_errors_exit_four() {
    let tmp = TempDir::new().unwrap();
    let r = save(tmp.path(), "r.pgm", &scene(0, 32));
    let out = tmp.path().join("o");
    let both = advmetric(&[
        "--out",
        s(&out),
        "attack",
        "--ref",
        s(&r),
        "--epsilon",
        "1",
        "--target-psnr",
        "40",
    ]);
    assert_eq!(both.status.code(), Some(4));
    let negative = advmetric(&["--out", s(&out), "attack", "--ref", s(&r), "--epsilon", "-1"]);
    assert_eq!(negative.status.code(), Some(4));
    let linf_psnr = advmetric(&["--out", s(&out), "attack", "--ref", s(&r), "--target-psnr", "40"]);
    assert_eq!(linf_psnr.status.code(), Some(4));
    assert_eq!(advmetric(&["bogus"]).status.code(), Some(4));
    assert_eq!(advmetric(&["--help"]).status.code(), Some(0));
}

#[test]
fn attack_then_rerun_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    fs::create_dir(&data).unwrap();
    save(&data, "a.pgm", &scene(0, 48));
    save(&data, "b.pgm", &scene(1, 48));
    let first = tmp.path().join("first");
    let run = advmetric(&[
        "--out",
        s(&first),
        "--seed",
        "7",
        "attack",
        "--dataset",
        s(&data),
        "--norm",
        "l2",
        "--target-psnr",
        "40",
        "--steps",
        "15",
        "--random-start",
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let csv = fs::read_to_string(first.join("attack.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    for line in csv.lines().skip(1) {
        let psnr_after: f64 = line.split(',').nth(5).unwrap().parse().unwrap();
        assert!(psnr_after >= 40.0 - 1e-9, "{line}");
    }

    let second = tmp.path().join("second");
    let rerun = advmetric(&["rerun", s(&first.join("manifest.json")), "--out", s(&second)]);
    assert!(rerun.status.success(), "{}", String::from_utf8_lossy(&rerun.stderr));
    for name in [
        "attack.csv",
        "trace_a.csv",
        "trace_b.csv",
        "a_perturbed.pgm",
        "b_delta.pgm",
    ] {
        assert_eq!(
            fs::read(first.join(name)).unwrap(),
            fs::read(second.join(name)).unwrap(),
            "{name}"
        );
    }
    assert_eq!(manifest(&first)["results"], manifest(&second)["results"]);
}

#[test]
fn psnr_restoration_recovers_the_reference() {
    let tmp = TempDir::new().unwrap();
    let r = scene(2, 32);
    let rp = save(tmp.path(), "r.pgm", &r);
    let out = tmp.path().join("o");
    let run = advmetric(&["--out", s(&out), "restore", "--ref", s(&rp), "--target", "psnr"]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let results = &manifest(&out)["results"];
    assert!(results["mse"].as_f64().unwrap() < 1.0);
    assert_eq!(results["reached_threshold"], true);
    let restored = read_pgm(&fs::read(out.join("restored.pgm")).unwrap()).unwrap();
    let diff = r
        .data()
        .iter()
        .zip(restored.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff <= 3.0, "max pixel error {diff}");
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count() - 1, results["steps"].as_u64().unwrap() as usize);
}

#[test]
fn sweep_writes_one_row_per_radius_and_a_fit() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    fs::create_dir(&data).unwrap();
    save(&data, "a.pgm", &scene(4, 48));
    let out = tmp.path().join("o");
    let run = advmetric(&[
        "--out",
        s(&out),
        "--svg",
        "sweep",
        "--dataset",
        s(&data),
        "--eps",
        "0.5,1,2,4",
        "--steps",
        "8",
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let gains = fs::read_to_string(out.join("gains.csv")).unwrap();
    assert_eq!(gains.lines().count(), 5);
    let fit = &manifest(&out)["results"]["fit"];
    assert!(fit["exponent"].as_f64().is_some() || fit["error"].is_string(), "{fit}");
    assert!(out.join("gains.svg").exists());
}

#[test]
fn gradcheck_gate_passes_with_a_table() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    let run = advmetric(&["--out", s(&out), "gradcheck", "--pairs", "2", "--metrics", "vif0,adm"]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stdout));
    let table = String::from_utf8_lossy(&run.stdout);
    assert!(table.lines().filter(|l| l.ends_with("ok")).count() == 2, "{table}");
    assert_eq!(
        fs::read_to_string(out.join("gradcheck.csv")).unwrap().lines().count(),
        5
    );
}

#[test]
fn synth_then_spectrum_on_the_written_scenes() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let run = advmetric(&["--out", s(&data), "synth", "--count", "2"]);
    assert!(run.status.success());
    assert!(data.join("scene_00.pgm").exists() && data.join("scene_01.pgm").exists());
    let out = tmp.path().join("o");
    let run = advmetric(&["--out", s(&out), "spectrum", "--dataset", s(&data), "--patches", "20"]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let slope = manifest(&out)["results"]["slope"].as_f64().unwrap();
    assert!((-3.5..=-1.0).contains(&slope), "{slope}");
}
