use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lesion_core::data::{aggregate, compute_metrics, load_mask_png, save_mask_png, synth_generate};
use lesion_core::mask::Mask;
use serde_json::Value;

fn lesionnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lesionnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_writes_the_requested_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = lesionnet(&[
        "synth",
        "--n",
        "50",
        "--seed",
        "7",
        "--size",
        "64",
        "--out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = fs::read_to_string(out.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 50);
    assert_eq!(fs::read_dir(out.join("images")).unwrap().count(), 50);
    assert_eq!(fs::read_dir(out.join("masks")).unwrap().count(), 50);
    let again = dir.path().join("again");
    lesionnet(&[
        "synth",
        "--n",
        "50",
        "--seed",
        "7",
        "--size",
        "64",
        "--out",
        path(&again),
    ]);
    for f in [
        "manifest.tsv",
        "images/synth_00003.png",
        "masks/synth_00049.png",
    ] {
        assert_eq!(
            fs::read(out.join(f)).unwrap(),
            fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn eval_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, pred) = (dir.path().join("gt"), dir.path().join("pred"));
    fs::create_dir_all(&gt).unwrap();
    fs::create_dir_all(&pred).unwrap();
    let samples = synth_generate(6, 3, 32).unwrap();
    let mut reports = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let shifted = Mask::from_fn(32, 32, |r, c| c >= i && s.mask.get(r, c - i));
        save_mask_png(&s.mask, &gt.join(format!("{}.png", s.id))).unwrap();
        save_mask_png(&shifted, &pred.join(format!("{}.png", s.id))).unwrap();
        reports.push(compute_metrics(&shifted, &s.mask).unwrap());
    }
    let report = dir.path().join("report.json");
    let o = lesionnet(&[
        "eval",
        "--pred",
        path(&pred),
        "--gt",
        path(&gt),
        "--out",
        path(&report),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let json: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let want = serde_json::to_value(aggregate(&reports)).unwrap();
    assert_eq!(json["aggregate"]["count"], 6);
    for stat in ["mean", "std"] {
        for m in ["ac", "dc", "ji", "se", "sp"] {
            let (got, exp) = (
                json["aggregate"][stat][m].as_f64().unwrap(),
                want[stat][m].as_f64().unwrap(),
            );
            assert!((got - exp).abs() < 1e-12, "{stat} {m}: {got} vs {exp}");
        }
    }
    assert_eq!(json["samples"].as_array().unwrap().len(), 6);
    assert_eq!(json["samples"][2]["id"], samples[2].id.as_str());
    assert_eq!(json["samples"][2]["tp"], reports[2].tp);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = lesionnet(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = lesionnet(&["synth", "--out", "x", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.tsv");
    let o = lesionnet(&[
        "train",
        "--dataset",
        path(&missing),
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 1, "bogus": 2}"#).unwrap();
    let o = lesionnet(&[
        "train",
        "--config",
        path(&cfg),
        "--dataset",
        path(&missing),
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
}

#[test]
fn train_segment_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert!(lesionnet(&[
        "synth",
        "--n",
        "8",
        "--seed",
        "1",
        "--size",
        "48",
        "--out",
        path(&data)
    ])
    .status
    .success());
    let cfg = dir.path().join("tiny.json");
    fs::write(
        &cfg,
        r#"{
  "dataset": "data/manifest.tsv",
  "out": "run",
  "batch_size": 2,
  "detector_epochs": 1,
  "skinnet_epochs": 1,
  "split": [0.5, 0.25, 0.25],
  "detector": {
    "input_size": 48,
    "anchor_scales": [12.0, 24.0, 48.0],
    "backbone": {"channels": [4, 8, 8]},
    "rpn_channels": 8,
    "rcnn_channels": 4,
    "rcnn_hidden": 8,
    "train_top_k": 4
  },
  "skinnet": {
    "input_size": 16, "blocks": 2, "layers": 1, "growth": 4, "dilation_rates": [1, 2],
    "stem_channels": 4, "bottleneck_channels": 4, "decoder_channels": 4
  }
}"#,
    )
    .unwrap();
    let manifest_before = fs::read(data.join("manifest.tsv")).unwrap();
    let o = lesionnet(&["train", "--config", path(&cfg), "--seed", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "detector.ckpt",
        "skinnet.ckpt",
        "train_log.jsonl",
        "config.json",
        "split.json",
    ] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let resolved: Value =
        serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["seed"], 5);

    let manifest = path(&data.join("manifest.tsv")).to_string();
    let seg = dir.path().join("seg");
    let o = lesionnet(&[
        "segment",
        "--dataset",
        &manifest,
        "--checkpoint",
        path(&run),
        "--out",
        path(&seg),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_dir(seg.join("masks")).unwrap().count(), 8);
    assert_eq!(fs::read_dir(seg.join("overlays")).unwrap().count(), 8);
    let m = load_mask_png(&seg.join("masks/synth_00000.png")).unwrap();
    assert_eq!((m.height(), m.width()), (48, 48));

    let det = dir.path().join("det");
    let o = lesionnet(&[
        "detect",
        "--dataset",
        &manifest,
        "--checkpoint",
        path(&run),
        "--out",
        path(&det),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dets: Value =
        serde_json::from_str(&fs::read_to_string(det.join("detections.json")).unwrap()).unwrap();
    assert_eq!(dets.as_array().unwrap().len(), 8);

    let report = dir.path().join("report.json");
    let o = lesionnet(&[
        "eval",
        "--pred",
        path(&seg.join("masks")),
        "--gt",
        path(&data.join("masks")),
        "--out",
        path(&report),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(data.join("manifest.tsv")).unwrap(),
        manifest_before
    );

    let o = lesionnet(&[
        "segment",
        "--dataset",
        &manifest,
        "--checkpoint",
        path(&run),
        "--out",
        path(&data),
    ]);
    assert_eq!(o.status.code(), Some(1));
}
