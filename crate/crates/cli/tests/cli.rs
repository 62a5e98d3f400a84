use std::path::Path;
use std::process::{Command, Output};

use wfm_core::adversarial::DiscriminatorConfig;
use wfm_core::data::load_rgb;
use wfm_core::generator::GeneratorConfig;
use wfm_core::masks::{load_mask_png, mask_ratio, save_mask_png};
use wfm_core::metrics::MetricsReport;
use wfm_core::train::TrainConfig;
use wfm_core::Tensor;

fn wfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wfm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("WFM_DATA_ROOT")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = wfm(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn toy_data_and_masks() {
    let dir = tempfile::tempdir().unwrap();
    let toy = dir.path().join("toy");
    ok(&["toy-data", "--n", "2", "--size", "64x32", "--seed", "3", "--out", s(&toy)]);
    assert!(toy.join("index.json").exists());
    assert!(toy.join("toy_00001_semantic.png").exists());

    let masks = dir.path().join("m");
    ok(&["make-masks", "--kind", "irregular", "--interval", "0.1,0.2", "--n", "3", "--size", "64x32", "--seed", "5", "--out", s(&masks)]);
    let files: Vec<_> = std::fs::read_dir(&masks).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(files.len(), 3);
    for f in &files {
        let m = load_mask_png(f).unwrap();
        assert_eq!(m.shape(), [1, 1, 32, 64]);
        assert!((0.1..0.2).contains(&mask_ratio(&m)));
    }

    let no_sem = wfm(&["make-masks", "--kind", "segmentation", "--interval", "0.1,0.2", "--n", "1", "--size", "64x32", "--seed", "5", "--out", s(&masks)]);
    assert!(!no_sem.status.success());
    let seg = dir.path().join("seg");
    let sem = toy.join("toy_00000_semantic.png");
    ok(&["make-masks", "--kind", "segmentation", "--interval", "0.01,0.5", "--n", "2", "--size", "64x32", "--seed", "1", "--semantic", s(&sem), "--out", s(&seg)]);
    assert_eq!(std::fs::read_dir(&seg).unwrap().count(), 2);

    for bad in [["--size", "64by32"], ["--interval", "0.3,0.2"], ["--kind", "blobs"]] {
        let mut args = vec!["make-masks", "--kind", "irregular", "--interval", "0.1,0.2", "--n", "1", "--size", "64x32", "--seed", "0", "--out", s(&masks)];
        let i = args.iter().position(|a| *a == bad[0]).unwrap();
        args[i + 1] = bad[1];
        assert!(!wfm(&args).status.success(), "{bad:?}");
    }
}

#[test]
fn train_inpaint_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    let toy = dir.path().join("toy");
    ok(&["toy-data", "--n", "3", "--size", "64x32", "--seed", "1", "--out", s(&toy)]);
    let mut cfg = TrainConfig {
        height: 32,
        width: 64,
        batch: 2,
        epochs: 1,
        max_steps: Some(2),
        generator: GeneratorConfig::toy(8, 1),
        discriminator: DiscriminatorConfig { channels: 8, layers: 3 },
        output_dir: dir.path().join("run"),
        ..TrainConfig::desk()
    };
    cfg.data.root = Some(toy.clone());
    cfg.data.val_scenes = 1;
    let cfg_path = dir.path().join("c.toml");
    std::fs::write(&cfg_path, cfg.to_toml().unwrap()).unwrap();
    ok(&["train", "--config", s(&cfg_path), "--preset", "ffc"]);
    let ckpt = dir.path().join("run/last.wfm");
    assert!(ckpt.exists());
    assert!(dir.path().join("run/log.jsonl").exists());

    let mask = Tensor::from_fn([1, 1, 32, 64], |_, _, y, x| if (8..20).contains(&y) && x < 30 { 1.0 } else { 0.0 });
    let mask_path = dir.path().join("mask.png");
    save_mask_png(&mask_path, &mask).unwrap();
    let image = toy.join("toy_00000_empty.png");
    let out = dir.path().join("out.png");
    ok(&["inpaint", "--ckpt", s(&ckpt), "--image", s(&image), "--mask", s(&mask_path), "--out", s(&out)]);
    let (x, y) = (load_rgb(&image).unwrap(), load_rgb(&out).unwrap());
    for c in 0..3 {
        assert_eq!(x.at(0, c, 0, 40), y.at(0, c, 0, 40));
        assert_eq!(x.at(0, c, 25, 5), y.at(0, c, 25, 5));
    }

    let metrics = dir.path().join("metrics.json");
    let md = ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&toy), "--limit", "1", "--out", s(&metrics), "--composite"]);
    assert!(md.contains("| irregular |"));
    let report = MetricsReport::from_json(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert!(report.composite);
    assert_eq!(report.cells.len(), 25);
    let csv = ok(&["report", "--in", s(&metrics), "--format", "csv"]);
    assert_eq!(csv.lines().count(), 26);
    assert_eq!(ok(&["report", "--in", s(&metrics), "--format", "md"]), report.to_markdown());

    let missing = wfm(&["eval", "--ckpt", s(&ckpt)]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("WFM_DATA_ROOT"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.toml");
    std::fs::write(&p, "height = 64\nwidht = 128\n").unwrap();
    let out = wfm(&["train", "--config", s(&p)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("widht"));
}
