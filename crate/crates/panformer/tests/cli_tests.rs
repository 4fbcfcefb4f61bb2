//! End-to-end command-line tests driving the built binary: exit codes,
//! stderr JSON on failure, and the prepare/train/infer/evaluate pipeline.

use std::path::Path;
use std::process::{Command, Output};

use panformer::data::{read_pfr, synth_scene, write_pfr, DatasetManifest};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_panformer"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn panformer")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_scene(dir: &Path, seed: u64, ms_size: usize) -> (std::path::PathBuf, std::path::PathBuf) {
    let (pan, ms) = synth_scene(seed, ms_size, 4, 10);
    let pan_path = dir.join("scene.pan.pfr");
    let ms_path = dir.join("scene.ms.pfr");
    write_pfr(&pan, &pan_path).unwrap();
    write_pfr(&ms, &ms_path).unwrap();
    (pan_path, ms_path)
}

const TINY_CONFIG: &str = r#"{
  "model": {"c": 8, "heads": 2, "window": 2, "sab_per_path": 2,
             "cab_count": 1, "mlp_ratio": 2, "bands": 4},
  "train": {"max_iters": 3, "batch": 1, "log_every": 1,
             "checkpoint_every": 2, "seed": 5}
}"#;

#[test]
fn param_count_passes_for_the_default_config() {
    let o = run(&["param-count"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("1500420"), "{out}");
    assert!(out.contains("PASS"), "{out}");
}

#[test]
fn param_count_fails_outside_the_band() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"model": {"c": 8}}"#).unwrap();
    let o = run(&["param-count", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"), "{}", stdout(&o));
}

#[test]
fn bad_config_exits_2_with_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"model": {"channels": 64}}"#).unwrap();
    let o = run(&["param-count", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_str(stderr(&o).trim()).expect("stderr JSON");
    assert_eq!(err["error"]["kind"], "config");
    assert!(err["error"]["message"].as_str().unwrap().contains("channels"));
}

#[test]
fn prepare_data_is_deterministic_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (pan, ms) = write_scene(dir.path(), 201, 32);
    let prep = |out: &Path| {
        let o = run(&[
            "prepare-data",
            "--pan", pan.to_str().unwrap(),
            "--ms", ms.to_str().unwrap(),
            "--out", out.to_str().unwrap(),
            "--split", "train",
            "--patch", "16",
            "--count", "5",
            "--seed", "7",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    };
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    prep(&out_a);
    prep(&out_b);

    let man_a = std::fs::read(out_a.join("manifest.json")).unwrap();
    let man_b = std::fs::read(out_b.join("manifest.json")).unwrap();
    assert_eq!(man_a, man_b);
    let manifest = DatasetManifest::load(out_a.join("manifest.json")).unwrap();
    assert_eq!(manifest.entries.len(), 5);
    assert_eq!(manifest.split, "train");
    for e in &manifest.entries {
        for name in [&e.pan, &e.lrms, &e.gt] {
            assert_eq!(std::fs::read(out_a.join(name)).unwrap(), std::fs::read(out_b.join(name)).unwrap());
        }
    }
}

#[test]
fn prepare_data_test_split_tiles_the_scene() {
    let dir = tempfile::tempdir().unwrap();
    let (pan, ms) = write_scene(dir.path(), 202, 64);
    let out = dir.path().join("tiles");
    let o = run(&[
        "prepare-data",
        "--pan", pan.to_str().unwrap(),
        "--ms", ms.to_str().unwrap(),
        "--out", out.to_str().unwrap(),
        "--split", "test",
        "--patch", "32",
        "--stride", "4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = DatasetManifest::load(out.join("manifest.json")).unwrap();
    // degraded 16-pixel MS grid, 8-pixel tiles at stride 4: 0,4,8 per axis
    assert_eq!(manifest.entries.len(), 9);
    assert_eq!(manifest.split, "test");
}

#[test]
fn train_infer_evaluate_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (pan, ms) = write_scene(dir.path(), 203, 16);
    let data = dir.path().join("data");
    let o = run(&[
        "prepare-data",
        "--pan", pan.to_str().unwrap(),
        "--ms", ms.to_str().unwrap(),
        "--out", data.to_str().unwrap(),
        "--split", "train",
        "--patch", "16",
        "--count", "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let run_dir = dir.path().join("run");
    let o = run(&[
        "train",
        "--config", cfg.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
        "--out", run_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run_dir.join("config.json").exists(), "config echo missing");
    assert!(run_dir.join("latest.pfck").exists());
    assert!(run_dir.join("ckpt_000002.pfck").exists());
    let log = std::fs::read_to_string(run_dir.join("loss_log.jsonl")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 3);
    for l in &lines {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        for k in ["iter", "lr", "loss", "wall_ms"] {
            assert!(v.get(k).is_some(), "missing {k} in {l}");
        }
    }

    // infer on the first prepared pair
    let manifest = DatasetManifest::load(data.join("manifest.json")).unwrap();
    let e = &manifest.entries[0];
    let pred_dir = dir.path().join("preds");
    std::fs::create_dir_all(&pred_dir).unwrap();
    let pred_path = pred_dir.join("train_00000.pred.pfr");
    let o = run(&[
        "infer",
        "--ckpt", run_dir.join("latest.pfck").to_str().unwrap(),
        "--pan", data.join(&e.pan).to_str().unwrap(),
        "--ms", data.join(&e.lrms).to_str().unwrap(),
        "--out", pred_path.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pred = read_pfr(&pred_path).unwrap();
    assert_eq!((pred.width, pred.height, pred.bands, pred.bit_depth), (16, 16, 4, 10));

    // evaluating with only one of three predictions is a typed failure
    let report_path = dir.path().join("report.json");
    let o = run(&[
        "evaluate",
        "--manifest", data.join("manifest.json").to_str().unwrap(),
        "--pred", pred_dir.to_str().unwrap(),
        "--report", report_path.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_str(stderr(&o).trim()).unwrap();
    assert_eq!(err["error"]["kind"], "missing");

    // identity predictions for the rest: perfect scores, inf kept out of means
    for e in &manifest.entries[1..] {
        let stem = e.gt.strip_suffix(".gt.pfr").unwrap();
        std::fs::copy(data.join(&e.gt), pred_dir.join(format!("{stem}.pred.pfr"))).unwrap();
    }
    let o = run(&[
        "evaluate",
        "--manifest", data.join("manifest.json").to_str().unwrap(),
        "--pred", pred_dir.to_str().unwrap(),
        "--report", report_path.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.contains("PSNR") && table.contains("ERGAS"), "{table}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    // the barely-trained prediction may come out flat, which skips it as an
    // undefined-metric case; the two identity predictions always score
    let scored = report["image_count"].as_u64().unwrap();
    let skipped = report["undefined_cases"].as_array().unwrap().len() as u64;
    assert_eq!(scored + skipped, 3);
    assert_eq!(report["means"]["psnr_inf_count"], 2);
    let last = &report["images"][scored as usize - 1];
    assert_eq!(last["psnr"], "inf");
    assert_eq!(last["ssim"], 1.0);

    // resume training for two more iterations from the saved checkpoint
    let cfg2 = dir.path().join("cfg2.json");
    std::fs::write(
        &cfg2,
        TINY_CONFIG.replace("\"max_iters\": 3", "\"max_iters\": 5"),
    )
    .unwrap();
    let o = run(&[
        "train",
        "--config", cfg2.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
        "--out", run_dir.to_str().unwrap(),
        "--resume", run_dir.join("latest.pfck").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(run_dir.join("loss_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 5, "resume must append to the log");

    // bench runs on the trained checkpoint at a small size
    let o = run(&[
        "bench",
        "--ckpt", run_dir.join("latest.pfck").to_str().unwrap(),
        "--size", "16",
        "--repeat", "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("median_forward_ms"), "{out}");
    assert!(out.contains("warmup"), "protocol line missing: {out}");
}

#[test]
fn train_requires_a_train_split_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (pan, ms) = write_scene(dir.path(), 204, 16);
    let data = dir.path().join("data");
    let o = run(&[
        "prepare-data",
        "--pan", pan.to_str().unwrap(),
        "--ms", ms.to_str().unwrap(),
        "--out", data.to_str().unwrap(),
        "--split", "test",
        "--patch", "16",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let o = run(&[
        "train",
        "--config", cfg.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
        "--out", dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_str(stderr(&o).trim()).unwrap();
    assert_eq!(err["error"]["kind"], "config");
}

#[test]
fn grad_check_command_passes() {
    let o = run(&["grad-check", "--seed", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("model.forward"), "{out}");
    assert!(!out.contains("FAIL"), "{out}");
}
