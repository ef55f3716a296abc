//! End-to-end runs of the `hyperfield` binary on a tiny synthetic dataset:
//! every subcommand, its run manifest and the exit-code contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hyperfield::cli::{RunManifest, MANIFEST_NAME};
use hyperfield::hypercube::read_cube;
use hyperfield::spatial::read_ply;

fn hyperfield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyperfield"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("HYPERFIELD_DATA")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = hyperfield(args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn manifest(dir: &Path, command: &str) -> RunManifest {
    let text = std::fs::read_to_string(dir.join(MANIFEST_NAME)).expect("manifest written");
    let m: RunManifest = serde_json::from_str(&text).unwrap();
    assert_eq!(m.command, command);
    assert!(m.duration_s >= 0.0);
    assert!(!m.tool_version.is_empty());
    for p in &m.outputs {
        assert!(p.exists(), "{command}: missing output {}", p.display());
    }
    m
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_TRAIN: [&str; 14] = [
    "--pretrain-iters", "20", "--finetune-iters", "10", "--rays", "32", "--width", "16", "--coarse", "8",
    "--fine", "8", "--normal-rays", "2",
];

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let ds = root.join("ds");
    ok(&["synth", "--views", "6", "--size", "16", "--eval-fraction", "0.2", "--reference", "--seed", "3", "--out", s(&ds)]);
    let m = manifest(&ds, "synth");
    assert_eq!(m.seed, Some(3));
    assert!(ds.join("views/view_005.bil").is_file());
    assert!(ds.join("masks").is_dir());

    // White reference: sweep and calibration.
    let reference = ds.join("reference");
    let (wr, roi) = (reference.join("white.bil"), reference.join("roi.png"));
    let sweep = root.join("sweep");
    ok(&["sweep-wr", "--wr", s(&wr), "--roi", s(&roi), "--out", s(&sweep)]);
    manifest(&sweep, "sweep-wr");
    let csv = std::fs::read_to_string(sweep.join("sweep.csv")).unwrap();
    let counts: Vec<usize> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(counts.len(), 3);
    assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");

    let cal = root.join("cal/view0.bil");
    let raw = reference.join("raw_view_000.bil");
    // Eight bands are too coarse for the default 5-band smoothing window.
    ok(&["calibrate", "--wr", s(&wr), "--roi", s(&roi), "--window", "1", "--in", s(&raw), "--out", s(&cal)]);
    manifest(&root.join("cal"), "calibrate");
    let (calibrated, truth) = (read_cube(&cal).unwrap(), read_cube(&ds.join("views/view_000.bil")).unwrap());
    let err = calibrated
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b).abs() as f64)
        .sum::<f64>()
        / truth.data().len() as f64;
    assert!(err < 0.01, "mean calibration error {err}");

    // Training and everything downstream of a checkpoint.
    let ckpt = root.join("run/model.ckpt");
    let mut args = vec!["train", "--dataset", s(&ds), "--seed", "1", "--out", s(&ckpt)];
    args.extend(TINY_TRAIN);
    ok(&args);
    let m = manifest(&root.join("run"), "train");
    assert_eq!(m.seed, Some(1));
    assert_eq!(m.config["pretrain_iters"], 20);
    let losses = std::fs::read_to_string(root.join("run/model_losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 31);

    let render = root.join("render");
    ok(&["render", "--ckpt", s(&ckpt), "--dataset", s(&ds), "--view", "2", "--coarse", "8", "--fine", "8", "--out", s(&render)]);
    manifest(&render, "render");
    let view = read_cube(&render.join("view_002.bil")).unwrap();
    assert_eq!((view.height(), view.width(), view.bands()), (16, 16, 8));

    let eval = root.join("eval");
    ok(&["eval-spectral", "--ckpt", s(&ckpt), "--dataset", s(&ds), "--coarse", "8", "--fine", "8", "--out", s(&eval)]);
    manifest(&eval, "eval-spectral");
    let metrics = std::fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("dataset,view_id,sam_rad,rmse,ssim,psnr_db"));
    assert!(metrics.lines().any(|l| l.contains(",mean,")));

    let cloud = root.join("pc/cloud.ply");
    ok(&["extract", "--ckpt", s(&ckpt), "--resolution", "12", "--sigma-min", "1e-3", "--out", s(&cloud)]);
    manifest(&root.join("pc"), "extract");
    let (pc, _) = read_ply(&cloud).unwrap();
    assert!(!pc.is_empty());
    assert_eq!(pc.spectra.as_ref().unwrap()[0].len(), 8);

    let spatial = root.join("spatial");
    ok(&["eval-spatial", "--pred", s(&cloud), "--gt", s(&cloud), "--eps-grid", "0.001,0.002", "--no-icp", "--out", s(&spatial)]);
    manifest(&spatial, "eval-spatial");
    let pr = std::fs::read_to_string(spatial.join("pr_curve.csv")).unwrap();
    assert!(pr.lines().skip(1).all(|l| l.ends_with(",100.00")), "{pr}");
    assert!(spatial.join("pr_curve.png").is_file());

    let png = root.join("comp/view0.png");
    ok(&["composite", "--in", s(&ds.join("views/view_000.bil")), "--triplet", "650,540,470", "--out", s(&png)]);
    manifest(&root.join("comp"), "composite");
    let colored = root.join("comp/cloud_rgb.ply");
    ok(&["composite", "--in", s(&cloud), "--triplet", "650,540,470", "--out", s(&colored)]);
    let (_, colors) = read_ply(&colored).unwrap();
    assert_eq!(colors.unwrap().len(), pc.len());

    let ablate = root.join("ablate");
    let mut args = vec!["ablate", "--dataset", s(&ds), "--grid", "0:1,0.25:0.75", "--out", s(&ablate)];
    args.extend(TINY_TRAIN);
    ok(&args);
    manifest(&ablate, "ablate");
    let table = std::fs::read_to_string(ablate.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out: PathBuf = tmp.path().join("x");
    let code = |args: &[&str]| hyperfield(args).status.code();

    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&["--version"]), Some(0));
    assert_eq!(code(&[]), Some(2));
    assert_eq!(code(&["frobnicate"]), Some(2));
    assert_eq!(code(&["train"]), Some(2));
    assert_eq!(code(&["synth", "--views", "lots", "--out", s(&out)]), Some(2));
    assert_eq!(code(&["render", "--ckpt", "/nonexistent.ckpt", "--out", s(&out)]), Some(2));
    assert_eq!(code(&["eval-spatial", "--pred", "a.ply", "--gt", "b.ply", "--eps-grid", "x", "--out", s(&out)]), Some(2));

    // Well-formed invocations whose inputs are unusable are domain failures.
    let bogus = tmp.path().join("bogus.ckpt");
    std::fs::write(&bogus, b"not a checkpoint").unwrap();
    assert_eq!(code(&["extract", "--ckpt", s(&bogus), "--out", s(&tmp.path().join("c.ply"))]), Some(1));
    assert!(!tmp.path().join(MANIFEST_NAME).exists());
}

#[test]
fn config_file_and_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    ok(&["synth", "--views", "4", "--size", "8", "--eval-fraction", "0.25", "--out", s(&ds)]);
    let cfg = tmp.path().join("run.toml");
    std::fs::write(
        &cfg,
        "[train]\npretrain_iters = 3\nfinetune_iters = 2\nrays_per_batch = 8\nnormal_rays = 1\n\
         [train.field]\ntrunk_layers = 1\ntrunk_width = 8\nradiance_width = 8\n\
         [render]\ncoarse_samples = 4\nfine_samples = 4\n",
    )
    .unwrap();
    let ckpt = tmp.path().join("m.ckpt");
    let out = Command::new(env!("CARGO_BIN_EXE_hyperfield"))
        .args(["--config", s(&cfg), "train", "--finetune-iters", "1", "--out", s(&ckpt)])
        .env("HYPERFIELD_DATA", &ds)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(tmp.path(), "train");
    assert_eq!(m.config["pretrain_iters"], 3);
    assert_eq!(m.config["finetune_iters"], 1);
    assert_eq!(m.config["render"]["coarse_samples"], 4);
    assert_eq!(m.inputs, vec![ds]);
}
