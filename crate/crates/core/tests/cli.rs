use std::path::Path;
use std::process::{Command, Output};

use progsplat::pipeline::RunConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_progsplat"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn synth(dir: &Path, preset: &str, frames: usize) {
    run_ok(bin().args(["synth", "--preset", preset, "--frames", &frames.to_string(), "--out"]).arg(dir));
}

fn count(dir: &Path, ext: &str) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == ext))
        .count()
}

/// A quick configuration file for a bundle.
fn fast_config(bundle: &Path, out: &Path) -> std::path::PathBuf {
    let mut cfg = RunConfig::for_bundle(bundle, out);
    cfg.optimizer.init_iterations = 30;
    cfg.optimizer.iterations_per_frame = 5;
    cfg.optimizer.pose_iterations = 20;
    let path = bundle.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn synth_writes_bundle_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, "corridor", 4);
    synth(&b, "corridor", 4);
    assert_eq!(count(&a.join("images"), "png"), 4);
    assert_eq!(count(&a.join("depth"), "pfm"), 4);
    assert_eq!(count(&a.join("matches"), "csv"), 3);
    assert!(a.join("intrinsics.json").is_file());
    let tum = std::fs::read_to_string(a.join("trajectory.tum")).unwrap();
    assert_eq!(tum.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()).count(), 4);
    for rel in ["trajectory.tum", "images/000003.png", "depth/000002.pfm", "matches/000000_000001.csv"] {
        assert_eq!(std::fs::read(a.join(rel)).unwrap(), std::fs::read(b.join(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn unknown_preset_is_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin().args(["synth", "--preset", "nope", "--out"]).arg(tmp.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ERROR[E_INPUT]"));
}

#[test]
fn missing_intrinsics_exits_with_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "plane", 2);
    std::fs::remove_file(tmp.path().join("intrinsics.json")).unwrap();
    let out = bin().args(["reconstruct", "--bundle"]).arg(tmp.path()).arg("--out").arg(tmp.path().join("out")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("ERROR[E_INPUT]"), "{err}");
    assert!(err.contains("intrinsics.json"), "{err}");
}

#[test]
fn single_frame_run_writes_identity_trajectory() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "plane", 3);
    let out_dir = tmp.path().join("out");
    let cfg = fast_config(tmp.path(), &out_dir);
    let out = run_ok(bin().args(["reconstruct", "--config"]).arg(&cfg).args(["--frames", "1"]));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["frames_processed"], 1);
    let tum = progsplat::io::read_tum(&out_dir.join("trajectory.tum")).unwrap();
    assert_eq!(tum.len(), 1);
    assert_eq!(tum[0].camera_to_world, progsplat::geometry::Pose::identity());
    for f in ["scene.ply", "report.csv", "report.json"] {
        assert!(out_dir.join(f).is_file(), "{f}");
    }
}

#[test]
fn print_config_resolves_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_ok(bin().args(["reconstruct", "--bundle"]).arg(tmp.path()).args(["--seed", "7", "--holdout", "2,4", "--print-config"]));
    let cfg: RunConfig = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.holdout, vec![2, 4]);
    assert_eq!(cfg.intrinsics, tmp.path().join("intrinsics.json"));
}

#[test]
fn evaluate_identical_trajectories() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "corridor", 5);
    let gt = tmp.path().join("trajectory.tum");
    let out = run_ok(bin().args(["evaluate", "--pred"]).arg(&gt).arg("--gt").arg(&gt));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["pairs"], 5);
    assert!(v["ate"].as_f64().unwrap() < 1e-12);
    assert!(v["rpe_trans"].as_f64().unwrap() < 1e-12);
    assert!(v["rpe_rot"].as_f64().unwrap() < 1e-6);

    let imgs = tmp.path().join("images");
    let out = run_ok(bin().args(["evaluate", "--pred-images"]).arg(&imgs).arg("--gt-images").arg(&imgs));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["images"], 5);
    assert_eq!(v["psnr"].as_f64().unwrap(), 100.0);
    assert!((v["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn evaluate_truncated_tum_is_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "plane", 3);
    let gt = tmp.path().join("trajectory.tum");
    let bad = tmp.path().join("bad.tum");
    std::fs::write(&bad, "0 0.0 0.0 0.0 0.0\n").unwrap();
    let out = bin().args(["evaluate", "--pred"]).arg(&bad).arg("--gt").arg(&gt).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ERROR[E_INPUT]"));
}

#[test]
fn render_corrupt_ply_is_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "plane", 2);
    let ply = tmp.path().join("bad.ply");
    std::fs::write(&ply, "ply\nformat binary_little_endian 1.0\nelement vertex 10\nproperty double x\nend_header\n\x01\x02").unwrap();
    let out = bin()
        .args(["render", "--scene"])
        .arg(&ply)
        .arg("--intrinsics")
        .arg(tmp.path().join("intrinsics.json"))
        .args(["--pose", "0 0 0 0 0 0 1", "--out"])
        .arg(tmp.path().join("r.png"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ERROR[E_INPUT]"));
}

#[test]
fn render_matches_library_render() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "plane", 3);
    let out_dir = tmp.path().join("out");
    let cfg = fast_config(tmp.path(), &out_dir);
    run_ok(bin().args(["reconstruct", "--config"]).arg(&cfg));

    let tum = progsplat::io::read_tum(&out_dir.join("trajectory.tum")).unwrap();
    let c2w = tum[2].camera_to_world;
    let (t, q) = (c2w.translation, c2w.rotation);
    let pose = format!("{:e} {:e} {:e} {:e} {:e} {:e} {:e}", t.x, t.y, t.z, q.x, q.y, q.z, q.w);
    let png = tmp.path().join("r.png");
    let pfm = tmp.path().join("r.pfm");
    run_ok(
        bin()
            .args(["render", "--scene"])
            .arg(out_dir.join("scene.ply"))
            .arg("--intrinsics")
            .arg(tmp.path().join("intrinsics.json"))
            .args(["--pose", &pose, "--out"])
            .arg(&png)
            .arg("--depth-out")
            .arg(&pfm),
    );

    let scene = progsplat::io::read_ply(&out_dir.join("scene.ply")).unwrap();
    let k = progsplat::io::read_intrinsics(&tmp.path().join("intrinsics.json")).unwrap();
    let same = progsplat::geometry::Pose::new(q.normalized(), t);
    let direct = progsplat::raster::render(&scene, &same.inverse(), &k);
    let expected = tmp.path().join("direct.png");
    progsplat::io::write_png(&expected, &direct.color).unwrap();
    assert_eq!(std::fs::read(&png).unwrap(), std::fs::read(&expected).unwrap());
    assert!(pfm.is_file());
}
