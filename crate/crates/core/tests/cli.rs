use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vismask::masking::EnhancedMetric;
use vismask::metrics::MetricId;
use vismask::Image;

fn vismask(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vismask"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic dataset with `refs` scenes of `side` pixels; returns the manifest.
fn synth(dir: &Path, refs: usize, side: usize) -> PathBuf {
    let o = vismask(&["make-synthetic", "--out", s(dir), "--refs", &refs.to_string(), "--side", &side.to_string()]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    dir.join("manifest.csv")
}

#[test]
fn help_works_for_every_subcommand() {
    assert_eq!(code(&vismask(&["--help"])), 0);
    for sub in ["train", "eval", "errmap", "maskviz", "ablate", "denoise-demo", "make-synthetic"] {
        let o = vismask(&[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub}");
        assert!(text(&o).contains("Usage"), "{sub}");
    }
}

#[test]
fn invalid_usage_exits_with_2() {
    assert_eq!(code(&vismask(&[])), 2);
    assert_eq!(code(&vismask(&["frobnicate"])), 2);
    assert_eq!(code(&vismask(&["train", "--no-such-flag"])), 2);
    assert_eq!(code(&vismask(&["train", "--epochs", "many"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let o = vismask(&["train", "--metric", "mae", "--data-root", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2, "{}", text(&o));
    let m = synth(&dir.path().join("d"), 1, 32);
    let o = vismask(&["train", "--metric", "ssim-ish", "--dataset", "csv", "--data-root", s(&m), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2, "{}", text(&o));
}

#[test]
fn train_writes_checkpoints_log_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(&dir.path().join("d"), 2, 32);
    let out = dir.path().join("run");
    let o = vismask(&[
        "train", "--metric", "mae", "--dataset", "csv", "--data-root", s(&m), "--out", s(&out),
        "--max-steps", "3", "--short-side", "0", "--val-fraction", "0", "--seed", "4",
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    for f in ["last.ckpt", "effective_config.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    // no validation split, so nothing to select a best checkpoint by
    assert!(!out.join("best.ckpt").exists());
    let cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("effective_config.json")).unwrap()).unwrap();
    assert_eq!(cfg["tool"], "vismask");
    assert!(cfg["argv"].as_array().unwrap().iter().any(|a| a == "--max-steps"));
    let e = EnhancedMetric::load(out.join("last.ckpt")).unwrap();
    assert_eq!(e.base, MetricId::Mae);
}

#[test]
fn config_file_supplies_defaults_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(&dir.path().join("d"), 2, 32);
    let cfg = dir.path().join("run.conf");
    std::fs::write(
        &cfg,
        format!(
            "# smoke run\nmetric = mae\ndataset = csv\ndata_root = {}\nmax_steps = 50\nshort_side = 0\nval_fraction = 0\n",
            m.display()
        ),
    )
    .unwrap();
    let out = dir.path().join("run");
    let o = vismask(&["train", "--config", s(&cfg), "--max-steps", "2", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let log = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "csv"))
        .expect("training log");
    let lines = std::fs::read_to_string(log).unwrap().lines().count();
    assert_eq!(lines, 3, "header plus two steps");
}

#[test]
fn eval_reports_one_row_per_metric_and_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(&dir.path().join("d"), 2, 32);
    let ckpts = dir.path().join("ckpts");
    std::fs::create_dir_all(&ckpts).unwrap();
    EnhancedMetric::new(MetricId::Mae, 1)
        .unwrap()
        .save(ckpts.join("e_mae.ckpt"), "x", serde_json::json!({}))
        .unwrap();
    let report = dir.path().join("report.csv");
    let o = vismask(&[
        "eval", "--datasets", &format!("csv={}", m.display()), "--metrics", "mae,psnr,ssim,flip",
        "--checkpoints", s(&ckpts), "--report", s(&report), "--short-side", "0",
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let csv = std::fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], vismask::evaluation::CSV_HEADER);
    assert_eq!(lines.len(), 1 + 5);
    assert!(lines.iter().any(|l| l.contains(",e-mae,")));
    assert!(dir.path().join("report.config.json").is_file());
}

#[test]
fn eval_without_datasets_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = vismask(&["eval", "--datasets", "", "--report", s(&dir.path().join("r.csv"))]);
    assert_eq!(code(&o), 2, "{}", text(&o));
}

fn pair(dir: &Path, w2: usize) -> (PathBuf, PathBuf) {
    let a = Image::from_tensor(&vismask::testutil::rand_image(40, 40, 1)).unwrap();
    let b = Image::from_tensor(&vismask::testutil::rand_image(40, w2, 2)).unwrap();
    let (pa, pb) = (dir.join("a.png"), dir.join("b.png"));
    a.save_png(&pa).unwrap();
    b.save_png(&pb).unwrap();
    (pa, pb)
}

#[test]
fn errmap_of_identical_images_is_uniformly_darkest() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = pair(dir.path(), 40);
    for metric in ["mae", "ssim", "flip"] {
        let out = dir.path().join(format!("{metric}.png"));
        let o = vismask(&["errmap", "--ref", s(&a), "--dist", s(&a), "--metric", metric, "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", text(&o));
        let img = image::open(&out).unwrap().to_rgb8();
        assert!(img.pixels().all(|p| p.0 == [0, 0, 4]), "{metric}: not uniformly darkest");
        let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.with_extension("json")).unwrap()).unwrap();
        assert_eq!(side["score"].as_f64(), Some(if metric == "ssim" { 1.0 } else { 0.0 }));
    }
}

#[test]
fn errmap_rejects_size_mismatch_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = pair(dir.path(), 48);
    let o = vismask(&["errmap", "--ref", s(&a), "--dist", s(&b), "--metric", "mae", "--out", s(&dir.path().join("e.png"))]);
    assert_eq!(code(&o), 2, "{}", text(&o));
}

#[test]
fn maskviz_contrast_sweep_writes_three_masks() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = pair(dir.path(), 40);
    let b = Image::from_tensor(&vismask::testutil::rand_perturbed(40, 40, 0.1, 3).1).unwrap();
    let pb = dir.path().join("b2.png");
    b.save_png(&pb).unwrap();
    let ck = dir.path().join("e.ckpt");
    EnhancedMetric::new(MetricId::Mae, 2).unwrap().save(&ck, "x", serde_json::json!({})).unwrap();
    let out = dir.path().join("viz").join("mask.png");
    let o = vismask(&[
        "maskviz", "--ref", s(&a), "--dist", s(&pb), "--metric", "mae", "--checkpoint", s(&ck), "--out", s(&out),
        "--contrast-sweep",
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let pngs: Vec<_> = std::fs::read_dir(out.parent().unwrap())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.contains("_x") && n.ends_with(".png"))
        .collect();
    assert_eq!(pngs.len(), 3, "{pngs:?}");
    // a mask for ssim from an mae checkpoint is refused
    let o = vismask(&[
        "maskviz", "--ref", s(&a), "--dist", s(&pb), "--metric", "ssim", "--checkpoint", s(&ck), "--out", s(&out),
    ]);
    assert_eq!(code(&o), 2, "{}", text(&o));
}

fn ablate(dir: &Path, kind: &str, extra: &[&str]) -> serde_json::Value {
    let m = synth(&dir.join("d"), 3, 32);
    let out = dir.join("abl");
    let data = format!("csv={}", m.display());
    let mut args = vec![
        "ablate", "--ablation", kind, "--metric", "mae", "--dataset", "csv", "--data-root", s(&m),
        "--test-datasets", &data, "--max-steps", "2", "--short-side", "0", "--val-fraction", "0", "--out", s(&out),
    ];
    args.extend_from_slice(extra);
    let o = vismask(&args);
    assert_eq!(code(&o), 0, "{}", text(&o));
    serde_json::from_str(&std::fs::read_to_string(out.join(format!("ablation_{kind}.json"))).unwrap()).unwrap()
}

fn variants(rep: &serde_json::Value) -> std::collections::BTreeSet<String> {
    rep["rows"].as_array().unwrap().iter().map(|r| r["variant"].as_str().unwrap().to_string()).collect()
}

#[test]
fn ablate_levels_trains_each_level_and_all() {
    let dir = tempfile::tempdir().unwrap();
    let rep = ablate(dir.path(), "levels", &[]);
    let v = variants(&rep);
    assert_eq!(v.len(), 6, "{v:?}");
    for want in ["level1", "level2", "level3", "level4", "level5", "all"] {
        assert!(v.contains(want), "{v:?}");
    }
}

#[test]
fn ablate_refs_honours_sizes_and_runs() {
    let dir = tempfile::tempdir().unwrap();
    let rep = ablate(dir.path(), "refs", &["--sizes", "1,2,3", "--runs", "2"]);
    let v = variants(&rep);
    // the full size is trained once
    let want: std::collections::BTreeSet<String> =
        ["refs1_run0", "refs1_run1", "refs2_run0", "refs2_run1", "refs3_run0"].iter().map(|s| s.to_string()).collect();
    assert_eq!(v, want);
    let sizes: Vec<u64> = rep["summary"].as_array().unwrap().iter().map(|r| r["size"].as_u64().unwrap()).collect();
    assert_eq!(sizes, vec![1, 2, 3]);
}

#[test]
fn ablate_refs_rejects_impossible_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(&dir.path().join("d"), 2, 32);
    let data = format!("csv={}", m.display());
    let o = vismask(&[
        "ablate", "--ablation", "refs", "--dataset", "csv", "--data-root", s(&m), "--test-datasets", &data,
        "--sizes", "5", "--max-steps", "1", "--short-side", "0", "--out", s(&dir.path().join("o")),
    ]);
    assert_ne!(code(&o), 0);
}

#[test]
fn denoise_demo_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    synth(&dir.path().join("train"), 2, 64);
    synth(&dir.path().join("test"), 1, 64);
    let ck = dir.path().join("emae.ckpt");
    EnhancedMetric::new(MetricId::Mae, 3).unwrap().save(&ck, "x", serde_json::json!({})).unwrap();
    let out = dir.path().join("demo");
    let test_root = format!("synth={}", dir.path().join("test").display());
    let o = vismask(&[
        "denoise-demo", "--train-root", s(&dir.path().join("train")), "--test-roots", &test_root,
        "--emae-checkpoint", s(&ck), "--out", s(&out), "--sigmas", "25,50", "--max-steps", "3",
        "--batch-size", "2", "--patch-size", "32", "--depth", "3", "--width", "8",
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let csv = std::fs::read_to_string(out.join("denoise_report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], vismask::restoration::REPORT_HEADER);
    // two models x one set x two noise levels
    assert_eq!(lines.len(), 1 + 4, "{csv}");
    assert!(out.join("effective_config.json").is_file());

    let o = vismask(&[
        "denoise-demo", "--train-root", s(&dir.path().join("train")), "--test-roots", &test_root,
        "--emae-checkpoint", s(&dir.path().join("missing.ckpt")), "--out", s(&out),
    ]);
    assert_eq!(code(&o), 2, "{}", text(&o));
}
