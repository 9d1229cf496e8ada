use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use speechclip::model::read_checkpoint;
use speechclip::teachers::{read_dataset, Split};

fn speechclip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_speechclip"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = speechclip(args);
    assert!(
        out.status.success(),
        "speechclip {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn small_data(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&["gen-data", "--out", s(&data), "--seed", "7", "--images", "100"]);
    data
}

const SHORT_RUN: [&str; 8] = ["--steps", "40", "--warmup", "4", "--batch-size", "16", "--eval-every", "20"];

fn train(data: &Path, run: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--data", s(data), "--run", s(run)];
    args.extend(SHORT_RUN);
    args.extend(extra);
    ok(&args);
}

#[test]
fn gen_data_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["gen-data", "--out", s(out), "--seed", "7", "--images", "100"]);
    }
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), 5);
    assert_eq!(fa, fb);
}

#[test]
fn default_split_is_eighty_ten_ten() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--out", s(dir.path())]);
    let images: Vec<usize> = Split::ALL
        .iter()
        .map(|sp| read_dataset(dir.path().join(sp.file_name())).unwrap().image_ids().len())
        .collect();
    assert_eq!(images, vec![800, 100, 100]);
}

#[test]
fn too_few_images_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = speechclip(&["gen-data", "--out", s(&dir.path().join("x")), "--images", "5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least 10 images"));
}

#[test]
fn missing_dataset_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = speechclip(&["train", "--data", s(&dir.path().join("none")), "--run", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn run_directory_layout_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let run = dir.path().join("run");
    train(&data, &run, &["--model", "cascaded", "--keywords", "8"]);
    for name in ["config", "teachers", "checkpoints/best.ckpt", "checkpoints/last.ckpt", "logs/metrics.jsonl"] {
        assert!(run.join(name).is_file(), "{name}");
    }
    let config = fs::read_to_string(run.join("config")).unwrap();
    assert!(config.contains("keywords = 8") && config.contains("model = \"cascaded\""));

    let stdout = ok(&["eval", "retrieval", "--run", s(&run)]);
    assert!(stdout.contains("speech->image") && stdout.contains("image->speech"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("reports/retrieval_test.json")).unwrap()).unwrap();
    for d in report["directions"].as_array().unwrap() {
        assert_eq!(d["ks"], serde_json::json!([1, 5, 10]));
        let r: Vec<f64> = d["recall"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert!(r[0] <= r[1] && r[1] <= r[2] && r[2] <= 1.0);
    }

    ok(&["eval", "keywords", "--run", s(&run)]);
    let kw: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("reports/keywords_test.json")).unwrap()).unwrap();
    assert_eq!(kw["keywords"], 8);
    let attention = fs::read_to_string(run.join("reports/attention_test.tsv")).unwrap();
    assert!(attention.starts_with("SCLIPATTN 1\n"));

    ok(&["eval", "inspect", "--run", s(&run)]);
    assert!(run.join("reports/inspect.json").is_file());
}

#[test]
fn keywords_on_parallel_checkpoint_fails_and_zeroshot_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let run = dir.path().join("run");
    train(&data, &run, &["--model", "parallel"]);
    let out = speechclip(&["eval", "keywords", "--run", s(&run)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cascaded"));

    // Only speech features and image embeddings exist on disk.
    let stdout = ok(&["eval", "zeroshot", "--run", s(&run)]);
    assert!(stdout.contains("speech->text"));
}

#[test]
fn no_batchnorm_drops_the_matching_layer() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let run = dir.path().join("run");
    train(&data, &run, &["--model", "cascaded", "--no-batchnorm"]);
    let ck = read_checkpoint(run.join("checkpoints/last.ckpt")).unwrap();
    assert!(ck.model.params().get("bn.gain").is_none());
    assert!(fs::read_to_string(run.join("config")).unwrap().contains("batchnorm = false"));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    train(&data, &full, &["--model", "cascaded", "--seed", "3"]);
    train(&data, &split, &["--model", "cascaded", "--seed", "3", "--stop-after", "20"]);
    assert_eq!(read_checkpoint(split.join("checkpoints/last.ckpt")).unwrap().step, 20);
    ok(&["train", "--run", s(&split), "--resume"]);
    assert_eq!(files(&full), files(&split));
}

#[test]
fn resume_rejects_changed_settings() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let run = dir.path().join("run");
    train(&data, &run, &["--stop-after", "20"]);
    let out = speechclip(&["train", "--run", s(&run), "--resume", "--seed", "9"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let run = dir.path().join("run");
    train(&data, &run, &["--model", "cascaded"]);
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        for task in ["retrieval", "zeroshot", "keywords", "inspect"] {
            ok(&["eval", task, "--run", s(&run), "--split", "dev"]);
        }
        snapshots.push(files(&run.join("reports")));
    }
    assert_eq!(snapshots[0], snapshots[1]);
    assert!(snapshots[0].contains_key(Path::new("zeroshot_dev.json")));
}
