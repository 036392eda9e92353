//! End-to-end runs of the `hca` binary.

use std::fs;
use std::path::Path;
use std::process::Command;

fn hca(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_hca")).args(args).current_dir(cwd).env_remove("HCA_OUT").output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

const CONFIG: &str = r#"{
  "model": {
    "backbone": {"in_channels": 1, "height": 8, "width": 8,
      "stages": [{"channels": 3, "kernel": 3, "stride": 2}], "projection": 8},
    "attention_kind": "none", "d": 8, "heads": 2, "m": 2, "encoder_layers": 1, "decoder_layers": 1, "dropout": 0.0
  },
  "arms": [
    {"name": "cnn", "model": {}, "pretrained": false},
    {"name": "hct", "model": {"attention_kind": "transformer"}},
    {"name": "hch", "model": {"attention_kind": "hopfield", "n_steps": 2}},
    {"name": "hct-ckpt", "model": {"attention_kind": "transformer"}, "checkpoint": "out/pretrain/hct/checkpoint"}
  ],
  "pretrain": {"epochs": 1, "lr": 0.001},
  "finetune": {"epochs": 2},
  "data": {
    "proxy": {"manifest": "proxy/manifest.csv"},
    "target": {"synth": {"seed": 4, "n_samples": 12, "geometry": {"channels": 1, "height": 8, "width": 8}, "noise_sd": 0.05}}
  },
  "eval": {"k": 3, "seeds": [5]},
  "out_dir": "out"
}"#;

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("run.json"), CONFIG).unwrap();
    let synth = ["synth-data", "--kind", "proxy", "--n", "10", "--height", "8", "--width", "8", "--out", "proxy"];
    assert_eq!(hca(&synth, root).0, 0);
    assert_eq!(hca(&synth, root).0, 2, "non-empty dir without --force");
    let forced: Vec<&str> = synth.iter().copied().chain(["--force"]).collect();
    assert_eq!(hca(&forced, root).0, 0);

    let (code, err) = hca(&["pretrain", "--config", "run.json"], root);
    assert_eq!(code, 0, "{err}");
    assert!(root.join("out/pretrain/hct/checkpoint/spec.json").is_file());
    assert!(root.join("out/pretrain/hct/loss.csv").is_file());

    let (code, err) = hca(&["crossval", "--config", "run.json", "--jobs", "2"], root);
    assert_eq!(code, 0, "{err}");
    let schema = |arm: &str| {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("out").join(arm).join("aggregate.json")).unwrap()).unwrap();
        v.as_object().unwrap().keys().cloned().collect::<Vec<_>>()
    };
    for arm in ["hct", "hch", "hct-ckpt"] {
        assert_eq!(schema(arm), schema("cnn"));
    }
    assert!(root.join("out/hch/predictions_seed5.csv").is_file());

    let (code, err) = hca(&["grad-check", "--config", "run.json"], root);
    assert_eq!(code, 0, "{err}");
    let (code, err) = hca(&["report", "--in", "out", "--out", "out/table.md"], root);
    assert_eq!(code, 0, "{err}");
    let table = fs::read_to_string(root.join("out/table.md")).unwrap();
    assert_eq!(table.lines().count(), 2 + 4);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_eq!(hca(&["synth-data", "--kind", "target", "--n", "0", "--out", "d"], root).0, 2);
    assert_eq!(hca(&["report", "--out", "t.md"], root).0, 2);
    assert_eq!(hca(&["crossval", "--config", "absent.json"], root).0, 1);
    fs::write(root.join("bad.json"), r#"{"model": {"attention_kind": "none"}, "extra": 1}"#).unwrap();
    let (code, err) = hca(&["pretrain", "--config", "bad.json", "--out-dir", "o"], root);
    assert_eq!(code, 2);
    assert!(err.contains("extra"), "{err}");
    fs::write(root.join("nodata.json"), r#"{"model": {"attention_kind": "none"}}"#).unwrap();
    assert_eq!(hca(&["crossval", "--config", "nodata.json"], root).0, 2, "no out_dir and no HCA_OUT");
    let (code, _) = hca(&["crossval", "--config", "nodata.json", "--out-dir", "o"], root);
    assert_eq!(code, 2, "no target dataset is a config error");
}
