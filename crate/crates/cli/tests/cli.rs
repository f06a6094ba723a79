use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use riner_core::io;

const SMALL: &str = r#"
[geometry]
n_views = 90
n_detectors = 96
detector_spacing = 6.0
grid_shape = [48, 48]
voxel_size = [5.0, 5.0]

[training]
n_iterations = 30
views_per_batch = 10
progress_every = 10
checkpoint_every = 20
"#;

fn riner(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_riner")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = riner(args);
    assert!(
        out.status.success(),
        "riner {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, format!("{SMALL}\n{extra}")).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, cfg: &Path, name: &str) -> PathBuf {
    let out = dir.join(name);
    ok(&["simulate", "--config", s(cfg), "--output-dir", s(&out)]);
    out
}

#[test]
fn simulate_writes_a_corrupted_scan_with_two_dead_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    let out = simulate(tmp.path(), &cfg, "sim");
    for f in ["phantom.img", "phantom.png", "clean.sino", "corrupted.sino", "profile.csv", "config.toml", "VERSION"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let sino = io::read_sinogram(&out.join("corrupted.sino")).unwrap();
    assert_eq!(sino.invalid_detectors().len(), 2);
    let profile = io::read_profile(&out.join("profile.csv")).unwrap();
    assert_eq!(sino.invalid_detectors(), profile.defective_indices());
    let version = fs::read_to_string(out.join("VERSION")).unwrap();
    assert!(version.contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn identical_seeds_give_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    ok(&["simulate", "--config", s(&cfg), "--seed", "7", "--output-dir", s(&a)]);
    ok(&["simulate", "--config", s(&cfg), "--seed", "7", "--output-dir", s(&b)]);
    ok(&["simulate", "--config", s(&cfg), "--seed", "8", "--output-dir", s(&c)]);
    for f in ["phantom.img", "clean.sino", "corrupted.sino", "profile.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(fs::read(a.join("corrupted.sino")).unwrap(), fs::read(c.join("corrupted.sino")).unwrap());
}

#[test]
fn ideal_noiseless_simulation_is_the_identity_channel() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(
        tmp.path(),
        "[simulation]\nnoise = false\n[simulation.corruption]\nfraction_nonideal = 0.0\nalpha_range = [1.0, 1.0]\nn_defective = 0\n",
    );
    let out = simulate(tmp.path(), &cfg, "sim");
    let clean = io::read_sinogram(&out.join("clean.sino")).unwrap();
    let dirty = io::read_sinogram(&out.join("corrupted.sino")).unwrap();
    assert_eq!(clean, dirty);
}

fn report_value(text: &str, key: &str) -> Option<String> {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")).map(str::to_string))
}

#[test]
fn fbp_on_clean_data_beats_25_db() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("desk.toml");
    fs::write(&cfg, "[geometry]\npreset = \"fan2d-desk\"\n").unwrap();
    let sim = simulate(tmp.path(), &cfg, "sim");
    let rec = tmp.path().join("fbp");
    ok(&[
        "reconstruct",
        "--method",
        "fbp",
        "--input",
        s(&sim.join("clean.sino")),
        "--reference",
        s(&sim.join("phantom.img")),
        "--output-dir",
        s(&rec),
    ]);
    assert!(rec.join("reconstruction.png").exists());
    let out = ok(&[
        "evaluate",
        "--reconstruction",
        s(&rec.join("reconstruction.img")),
        "--reference",
        s(&sim.join("phantom.img")),
        "--method",
        "fbp",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    let psnr: f64 = report_value(&text, "psnr_db").unwrap().parse().unwrap();
    assert!(psnr >= 25.0, "fbp psnr {psnr}");
}

#[test]
fn riner_reconstruction_writes_all_artifacts_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    let sim = simulate(tmp.path(), &cfg, "sim");
    let run = |name: &str| {
        let dir = tmp.path().join(name);
        ok(&[
            "reconstruct",
            "--config",
            s(&cfg),
            "--input",
            s(&sim.join("corrupted.sino")),
            "--output-dir",
            s(&dir),
        ]);
        dir
    };
    let a = run("a");
    let b = run("b");
    for f in ["reconstruction.img", "loss.csv", "detectors.csv", "checkpoint-000020.ckpt", "checkpoint-000030.ckpt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let table = io::read_detectors(&a.join("detectors.csv")).unwrap();
    assert_eq!(table.alpha.len(), 96);
    let loss = fs::read_to_string(a.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 31);
    let ck = riner_core::checkpoint::load_checkpoint(&a.join("checkpoint-000030.ckpt")).unwrap();
    assert_eq!(ck.iteration, 30);

    let out = ok(&[
        "evaluate",
        "--reconstruction",
        s(&a.join("reconstruction.img")),
        "--reference",
        s(&sim.join("phantom.img")),
        "--profile",
        s(&sim.join("profile.csv")),
        "--detectors",
        s(&a.join("detectors.csv")),
        "--output-dir",
        s(&tmp.path().join("eval")),
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(report_value(&text, "alpha_mae").is_some());
    assert!(report_value(&text, "beta_accuracy").is_some());
    let csv = fs::read_to_string(tmp.path().join("eval/report.csv")).unwrap();
    assert!(csv.starts_with("method,psnr_db,ssim,data_range,alpha_mae,beta_accuracy\n"));
}

#[test]
fn both_ablation_flags_keep_the_detectors_ideal() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    let sim = simulate(tmp.path(), &cfg, "sim");
    let dir = tmp.path().join("plain");
    ok(&[
        "reconstruct",
        "--config",
        s(&cfg),
        "--input",
        s(&sim.join("corrupted.sino")),
        "--disable-alpha",
        "--disable-beta",
        "--output-dir",
        s(&dir),
    ]);
    let table = io::read_detectors(&dir.join("detectors.csv")).unwrap();
    assert!(table.alpha.iter().all(|&a| a == 1.0));
    assert!(table.beta.iter().all(|&b| b == 1.0));
    let resolved = fs::read_to_string(dir.join("config.toml")).unwrap();
    assert!(resolved.contains("disable_alpha = true"));
}

#[test]
fn evaluate_self_comparison_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    let sim = simulate(tmp.path(), &cfg, "sim");
    let phantom = sim.join("phantom.img");
    let out = ok(&["evaluate", "--reconstruction", s(&phantom), "--reference", s(&phantom)]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(report_value(&text, "psnr_db").as_deref(), Some("inf"));
    assert_eq!(report_value(&text, "ssim").as_deref(), Some("1.000000"));
    assert!(report_value(&text, "alpha_mae").is_none());

    let other = tmp.path().join("other.img");
    let small = riner_core::ImageGrid::zeros(vec![16, 16], vec![1.0, 1.0]);
    io::write_image(&other, &small).unwrap();
    let out = riner(&["evaluate", "--reconstruction", s(&other), "--reference", s(&phantom)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("shape"));
}

#[test]
fn ablate_emits_the_full_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    let cfg_text = fs::read_to_string(&cfg).unwrap().replace("n_iterations = 30", "n_iterations = 10");
    fs::write(&cfg, cfg_text).unwrap();
    let dir = tmp.path().join("ablate");
    ok(&["ablate", "--config", s(&cfg), "--output-dir", s(&dir)]);
    let csv = fs::read_to_string(dir.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.iter().filter(|r| r.starts_with("physical,")).count(), 4);
    assert_eq!(rows.iter().filter(|r| r.starts_with("lambda,")).count(), 3);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(riner(&["--version"]).status.code(), Some(0));
    assert_eq!(riner(&["frobnicate"]).status.code(), Some(1));

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[training]\nunknown_key = 1\n").unwrap();
    let out = riner(&["simulate", "--config", s(&bad), "--output-dir", s(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));

    let missing = riner(&["reconstruct", "--input", "/nonexistent.sino", "--output-dir", s(&tmp.path().join("y"))]);
    assert_eq!(missing.status.code(), Some(1));

    let cone = tmp.path().join("cone.toml");
    fs::write(&cone, "[geometry]\npreset = \"cone3d-desk\"\nn_views = 8\ngrid_shape = [16, 16, 16]\nn_detectors = [16, 16]\n").unwrap();
    let sim = simulate(tmp.path(), &cone, "cone");
    let out = riner(&[
        "reconstruct",
        "--method",
        "fbp",
        "--input",
        s(&sim.join("corrupted.sino")),
        "--output-dir",
        s(&tmp.path().join("z")),
    ]);
    assert_eq!(out.status.code(), Some(1));

    let cfg = config(tmp.path(), "");
    let text = fs::read_to_string(&cfg).unwrap().replace("[training]\n", "[training]\nbase_lr = 1e38\n");
    fs::write(&cfg, text).unwrap();
    let sim = simulate(tmp.path(), &cfg, "sim");
    let out = riner(&[
        "reconstruct",
        "--config",
        s(&cfg),
        "--input",
        s(&sim.join("corrupted.sino")),
        "--output-dir",
        s(&tmp.path().join("nan")),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
