//! File formats, manifests, configs and report merging.

use std::fs;
use std::path::Path;

use hca::config::Resolved;
use hca::manifest::{load_manifest, write_dataset, MANIFEST};
use hca::report::{best_rows, collect_block, render_markdown, write_json, Block};
use hca::tensor_file::{decode, encode, load_tensor, save_tensor};
use hca::Error;
use hca_core::data::{DatasetKind, ImageGeometry, SynthParams};
use hca_core::evaluation::{higher_is_better, MetricSummary, METRIC_NAMES};
use hca_core::tensor::Tensor;
use proptest::prelude::*;

fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..4, 0..4).prop_flat_map(|shape| {
        let n = shape.iter().product::<usize>();
        prop::collection::vec(any::<f64>(), n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn tensor_bytes_round_trip_bitwise(t in tensor_strategy()) {
        let back = decode(&encode(&t), Path::new("mem")).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn tensor_file_round_trip_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.hcat");
    let t = Tensor::new(vec![2, 3], vec![1.5, -0.0, f64::MIN_POSITIVE, 7.0, -3.25, 1e300]).unwrap();
    save_tensor(&t, &path).unwrap();
    assert_eq!(load_tensor(&path).unwrap(), t);
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let msg = load_tensor(&path).unwrap_err().to_string();
    assert!(msg.contains("expected 71") && msg.contains("found 68"), "{msg}");
}

fn synth(kind: DatasetKind, n: usize) -> hca_core::data::Dataset {
    let geometry = ImageGeometry { channels: 1, height: 4, width: 4 };
    SynthParams { kind, seed: 3, n_samples: n, geometry, noise_sd: 0.0, score_ranges: None }.generate().unwrap()
}

#[test]
fn manifest_round_trip_with_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(DatasetKind::Target, 3);
    write_dataset(dir.path(), &ds, None).unwrap();
    let back = load_manifest(dir.path().join(MANIFEST)).unwrap();
    assert_eq!(back.samples().len(), 3);
    assert_eq!(back, ds);
}

#[test]
fn manifest_duplicate_cites_row() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &synth(DatasetKind::Proxy, 8), None).unwrap();
    let path = dir.path().join(MANIFEST);
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    // Lines 0 and 1 are the kind row and header; data row 7 is line 8.
    let first_id = lines[2].split(',').next().unwrap().to_string();
    let rest = lines[8].split_once(',').unwrap().1.to_string();
    lines[8] = format!("{first_id},{rest}");
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    match load_manifest(&path) {
        Err(Error::Manifest { row, message, .. }) => {
            assert_eq!(row, 7);
            assert!(message.contains("duplicate"), "{message}");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn manifest_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(MANIFEST);
    fs::write(&path, "kind,proxy\nsample_id,patient_id,tensor_path,".to_string() + &(0..15).map(|i| format!("label_{i}")).collect::<Vec<_>>().join(",") + "\n").unwrap();
    let msg = load_manifest(&path).unwrap_err().to_string();
    assert!(msg.contains("no samples"), "{msg}");

    write_dataset(dir.path(), &synth(DatasetKind::Proxy, 2), None).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let mut fields: Vec<String> = lines[3].split(',').map(String::from).collect();
    *fields.last_mut().unwrap() = "0.5".into();
    fs::write(&path, format!("{}\n{}\n{}\n{}\n", lines[0], lines[1], lines[2], fields.join(","))).unwrap();
    assert!(matches!(load_manifest(&path), Err(Error::Manifest { row: 2, .. })));

    let mut fields: Vec<String> = lines[3].split(',').map(String::from).collect();
    fields[2] = "tensors/absent.hcat".into();
    fs::write(&path, format!("{}\n{}\n{}\n", lines[0], lines[1], fields.join(","))).unwrap();
    let err = load_manifest(&path).unwrap_err().to_string();
    assert!(err.contains("row 1") && err.contains("missing tensor"), "{err}");
}

const MINIMAL: &str = r#"{"model": {"attention_kind": "none"}, "out_dir": "o"}"#;

#[test]
fn config_unknown_keys_carry_pointers() {
    let base = Path::new(".");
    assert!(Resolved::from_str(MINIMAL, base, None).is_ok());
    let cases = [
        (r#"{"model": {"attention_kind": "none", "widht": 3}, "out_dir": "o"}"#, "/model"),
        (r#"{"model": {"attention_kind": "none"}, "finetune": {"lr": 0.1, "momentun": 0.5}, "out_dir": "o"}"#, "/finetune"),
        (r#"{"model": {"attention_kind": "none", "backbone": {"in_channels": 1, "height": 8, "width": 8, "stages": [{"channels": 2, "kernel": 3, "stride": 1, "pad": 1}], "projection": 4}}, "out_dir": "o"}"#, "/model/backbone/stages/0"),
        (r#"{"model": {"attention_kind": "none"}, "arms": [{"name": "a", "model": {"heads": "two"}}], "out_dir": "o"}"#, "/arms/0/model/heads"),
        (r#"{"model": {"attention_kind": "none"}, "eval": {"k": 1}, "out_dir": "o"}"#, "/eval/k"),
        (r#"{"model": {"attention_kind": "attention"}, "out_dir": "o"}"#, "/model/attention_kind"),
    ];
    for (text, pointer) in cases {
        match Resolved::from_str(text, base, None) {
            Err(e @ Error::Config { .. }) => {
                assert_eq!(e.exit_code(), 2);
                let Error::Config { pointer: got, .. } = &e else { unreachable!() };
                assert!(got.starts_with(pointer), "{text}: {got} vs {pointer}");
            }
            other => panic!("{text}: {other:?}"),
        }
    }
}

#[test]
fn out_dir_precedence() {
    let base = Path::new("/cfg");
    let r = Resolved::from_str(MINIMAL, base, Some("cli".into())).unwrap();
    assert_eq!(r.out_dir, Path::new("cli"));
    let r = Resolved::from_str(MINIMAL, base, None).unwrap();
    assert_eq!(r.out_dir, Path::new("o"));
}

fn write_arm(root: &Path, name: &str, means: &[(&str, f64)]) {
    let dir = root.join(name);
    fs::create_dir_all(&dir).unwrap();
    let agg: std::collections::BTreeMap<String, MetricSummary> = means
        .iter()
        .map(|(k, v)| (k.to_string(), MetricSummary::from_values(vec![*v, v + 0.1]).unwrap()))
        .collect();
    write_json(&dir.join("aggregate.json"), &agg).unwrap();
}

#[test]
fn best_cells_match_an_independent_scan() {
    let root = tempfile::tempdir().unwrap();
    let arms = ["a", "b", "c", "d"];
    let mut rng = 17u64;
    let mut next = || {
        rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((rng >> 33) % 7) as f64 / 7.0
    };
    let mut table = Vec::new();
    for arm in arms {
        let row: Vec<(&str, f64)> = METRIC_NAMES.iter().map(|m| (*m, next())).collect();
        write_arm(root.path(), arm, &row);
        table.push(row);
    }
    let block = collect_block(root.path()).unwrap();
    assert_eq!(block.rows.len(), 4);
    for (m, metric) in METRIC_NAMES.iter().enumerate() {
        let col: Vec<f64> = table.iter().map(|r| r[m].1 + 0.05).collect();
        let target = if higher_is_better(metric) {
            col.iter().cloned().fold(f64::MIN, f64::max)
        } else {
            col.iter().cloned().fold(f64::MAX, f64::min)
        };
        let expected: Vec<usize> = (0..col.len()).filter(|&i| (col[i] - target).abs() < 1e-12).collect();
        assert_eq!(best_rows(&block, metric), expected, "{metric}");
    }
    let md = render_markdown(&[block]).unwrap();
    assert_eq!(md.lines().count(), 6);
    assert!(md.contains("**"));
}

#[test]
fn single_input_gives_single_row_and_mismatch_fails() {
    let root = tempfile::tempdir().unwrap();
    write_arm(root.path(), "only", &[("mae", 1.0), ("mse", 2.0)]);
    let block = collect_block(&root.path().join("only")).unwrap();
    let md = render_markdown(std::slice::from_ref(&block)).unwrap();
    assert_eq!(md.lines().count(), 3);
    write_arm(root.path(), "other", &[("mae", 1.0)]);
    let other = collect_block(&root.path().join("other")).unwrap();
    assert!(matches!(render_markdown(&[block, other]), Err(Error::Merge(_))));
    assert!(matches!(render_markdown(&[] as &[Block]), Err(Error::Usage(_))));
}
