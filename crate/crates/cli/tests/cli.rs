use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use handle_engine::config::EditConfig;
use handle_engine::pipeline::{load_inputs, run_edit};
use handle_engine::config::Needs;
use handles_core::metrics::EvalReport;
use handles_core::scenes::{check_edit, BenchmarkConfig, EditSample};
use tempfile::TempDir;

fn engine() -> Command {
    Command::new(env!("CARGO_BIN_EXE_handle-engine"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn handle-engine")
}

fn ok(cmd: &mut Command) -> String {
    let out = run(cmd);
    assert!(out.status.success(), "{:?}: {}", cmd, String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Two small benchmark samples at 64x64.
fn small_benchmark(dir: &Path) -> PathBuf {
    let gt = dir.join("gt");
    ok(engine().args(["bench", "generate", "-n", "2", "--seed", "3", "--resolution", "64", "--out"]).arg(&gt));
    gt
}

fn sample_args(cmd: &mut Command, s: &Path) {
    cmd.arg("--depth").arg(s.join("depth.pfm"));
    cmd.arg("--image").arg(s.join("image.png"));
    cmd.arg("--mask").arg(s.join("mask.png"));
    cmd.args(["--resolution", "32", "--steps", "20", "--cutoff", "15"]);
}

#[test]
fn generated_samples_pass_constraints_on_recheck() {
    let tmp = TempDir::new().unwrap();
    let gt = tmp.path().join("gt");
    ok(engine().args(["bench", "generate", "-n", "50", "--seed", "7", "--out"]).arg(&gt));
    let cfg = BenchmarkConfig::default();
    let mut dirs = 0;
    for entry in fs::read_dir(&gt).unwrap() {
        let p = entry.unwrap().path();
        if !p.is_dir() {
            continue;
        }
        dirs += 1;
        for f in ["depth.pfm", "image.png", "mask.png", "edit.json", "gt_depth.pfm", "gt_mask.png"] {
            assert!(p.join(f).is_file(), "{} lacks {}", p.display(), f);
        }
        let s: EditSample = serde_json::from_str(&fs::read_to_string(p.join("sample.json")).unwrap()).unwrap();
        let frac = check_edit(&s.scene, &s.transform().unwrap(), &cfg).unwrap();
        assert!(frac.is_some_and(|f| f <= cfg.delta), "{} fails re-check", p.display());
    }
    assert_eq!(dirs, 50);
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let tmp = TempDir::new().unwrap();
    let gt = small_benchmark(tmp.path());
    let report_dir = tmp.path().join("report");
    ok(engine().arg("eval").arg("--run").arg(&gt).arg("--gt").arg(&gt).arg("--out").arg(&report_dir));
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(report_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.count, 2);
    assert_eq!(report.mean_iou, 1.0);
    assert_eq!(report.mean_e_id_l1, 0.0);
    assert_eq!(report.lpips, "unavailable");
    assert!(fs::read_to_string(report_dir.join("report.txt")).unwrap().contains("mean"));
}

#[test]
fn eval_lists_missing_samples() {
    let tmp = TempDir::new().unwrap();
    let gt = small_benchmark(tmp.path());
    let run_dir = tmp.path().join("run");
    fs::create_dir_all(run_dir.join("000")).unwrap();
    let out = run(engine().arg("eval").arg("--run").arg(&run_dir).arg("--gt").arg(&gt));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("001"));
}

#[test]
fn missing_depth_file_exits_2_and_names_it() {
    let tmp = TempDir::new().unwrap();
    let gt = small_benchmark(tmp.path());
    let s = gt.join("000");
    let missing = tmp.path().join("no_such_depth.pfm");
    for cmd in ["invert", "edit", "edit-depth"] {
        let out = run(engine()
            .arg(cmd)
            .arg("--depth")
            .arg(&missing)
            .arg("--image")
            .arg(s.join("image.png"))
            .arg("--mask")
            .arg(s.join("mask.png"))
            .arg("--out")
            .arg(tmp.path().join("x")));
        assert_eq!(out.status.code(), Some(2), "{cmd}");
        assert!(String::from_utf8_lossy(&out.stderr).contains(&*missing.to_string_lossy()), "{cmd}");
    }
}

#[test]
fn unknown_config_keys_exit_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"schedule": {"cutoff": 38}}"#).unwrap();
    let out = run(engine().arg("edit").arg("--config").arg(&cfg));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cutoff"));
}

#[test]
fn edit_out_of_frame_exits_1() {
    let tmp = TempDir::new().unwrap();
    let gt = small_benchmark(tmp.path());
    let mut cmd = engine();
    cmd.arg("edit-depth");
    sample_args(&mut cmd, &gt.join("000"));
    cmd.args(["--translation", "50,0,0", "--out"]).arg(tmp.path().join("x"));
    let out = run(&mut cmd);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("out of frame"));
}

#[test]
fn trajectory_dump_has_one_snapshot_per_step() {
    let tmp = TempDir::new().unwrap();
    let gt = small_benchmark(tmp.path());
    let out = tmp.path().join("edit");
    let mut cmd = engine();
    cmd.arg("edit").arg("--dump-trajectory");
    sample_args(&mut cmd, &gt.join("000"));
    cmd.args(["--angle", "10", "--out"]).arg(&out);
    ok(&mut cmd);
    let snaps = fs::read_dir(out.join("trajectory"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("step_"))
        .count();
    assert_eq!(snaps, 20);
    assert!(out.join("trajectory/activations.dhar").is_file());
    let csv = fs::read_to_string(out.join("energies.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,g_o,g_b"));
    assert_eq!(csv.lines().count(), 21);
}

#[test]
fn invert_reports_small_reconstruction_error() {
    let tmp = TempDir::new().unwrap();
    let gt = small_benchmark(tmp.path());
    let out = tmp.path().join("inv");
    let mut cmd = engine();
    cmd.arg("invert").arg("--reconstruct");
    sample_args(&mut cmd, &gt.join("000"));
    cmd.arg("--out").arg(&out);
    ok(&mut cmd);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("reconstruction.json")).unwrap()).unwrap();
    assert!(v["max_abs_error"].as_f64().unwrap() < 1e-2);
    assert!(out.join("activations.dhar").is_file());
    assert!(out.join("xT.c3.pfm").is_file());
}

#[test]
fn stored_inversion_gives_the_same_edit_as_inline() {
    let tmp = TempDir::new().unwrap();
    let gt = small_benchmark(tmp.path());
    let s = gt.join("000");
    let inv = tmp.path().join("inv");
    let mut cmd = engine();
    cmd.arg("invert");
    sample_args(&mut cmd, &s);
    cmd.arg("--out").arg(&inv);
    ok(&mut cmd);
    for (name, stored) in [("inline", false), ("stored", true)] {
        let mut cmd = engine();
        cmd.arg("edit");
        sample_args(&mut cmd, &s);
        cmd.args(["--angle", "12", "--out"]).arg(tmp.path().join(name));
        if stored {
            cmd.arg("--inversion").arg(&inv);
        }
        ok(&mut cmd);
    }
    for f in ["result.pfm", "d_prime.pfm", "edited_mask.png", "energies.csv"] {
        assert_eq!(
            fs::read(tmp.path().join("inline").join(f)).unwrap(),
            fs::read(tmp.path().join("stored").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn echoed_config_reproduces_the_run() {
    let tmp = TempDir::new().unwrap();
    let gt = small_benchmark(tmp.path());
    let first = tmp.path().join("first");
    let mut cmd = engine();
    cmd.arg("edit");
    sample_args(&mut cmd, &gt.join("001"));
    cmd.args(["--translation", "0.1,0.05,0", "--guidance-mode", "epsilon", "--out"]).arg(&first);
    ok(&mut cmd);
    let echoed = EditConfig::load(&first.join("config.json")).unwrap();
    let second = tmp.path().join("second");
    let mut again = echoed.clone();
    again.paths.output = Some(second.clone());
    let cfg_path = tmp.path().join("again.json");
    fs::write(&cfg_path, again.to_json()).unwrap();
    ok(engine().arg("edit").arg("--config").arg(&cfg_path));
    for f in ["result.pfm", "result.png", "d_prime.pfm", "edited_mask.png", "energies.csv"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn identity_edit_stays_at_the_reconstruction() {
    let tmp = TempDir::new().unwrap();
    let gt = small_benchmark(tmp.path());
    let s = gt.join("000");
    let mut cfg = EditConfig::default();
    cfg.paths.depth = Some(s.join("depth.pfm"));
    cfg.paths.image = Some(s.join("image.png"));
    cfg.paths.mask = Some(s.join("mask.png"));
    cfg.denoiser.resolution = 32;
    let inputs = load_inputs(&cfg, Needs { depth: true, image: true, mask: true }).unwrap();
    let (image, depth, mask) = (inputs.image.unwrap(), inputs.depth.unwrap(), inputs.mask.unwrap());
    let out = run_edit(&cfg, &image, &depth, &mask, None, None, false).unwrap();
    let n = out.image.data().len() as f64;
    let mean_abs: f64 = out
        .image
        .data()
        .iter()
        .zip(out.reconstruction.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum::<f64>()
        / n;
    assert!(mean_abs < 1e-3, "mean-abs {mean_abs}");
    assert_eq!(out.depth.edited_depth, depth);
    assert_eq!(out.depth.warped_object_mask, mask);
}

#[test]
fn bench_run_records_failures_and_continues() {
    let tmp = TempDir::new().unwrap();
    let gt = small_benchmark(tmp.path());
    fs::remove_file(gt.join("001").join("depth.pfm")).unwrap();
    let run_dir = tmp.path().join("run");
    let stdout = ok(engine()
        .args(["bench", "run", "--resolution", "32", "--steps", "20", "--cutoff", "15", "--gt"])
        .arg(&gt)
        .arg("--out")
        .arg(&run_dir));
    assert!(stdout.contains("1 samples completed, 1 failed"), "{stdout}");
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(run_dir.join("run.json")).unwrap()).unwrap();
    assert_eq!(summary["completed"], serde_json::json!(["000"]));
    assert_eq!(summary["failures"][0]["id"], "001");
    assert!(run_dir.join("000").join("cycle.pfm").is_file());
}

#[test]
fn thread_cap_must_be_positive() {
    let out = run(engine().env("HANDLE_ENGINE_THREADS", "zero").args(["eval", "--run", ".", "--gt", "."]));
    assert_eq!(out.status.code(), Some(2));
}
