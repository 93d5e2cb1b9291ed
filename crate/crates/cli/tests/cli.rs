use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn gad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gad")).args(args).output().expect("run gad")
}

fn path(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn actor(id: u32, x: f64) -> Value {
    serde_json::json!({ "actor_id": id, "boxes": [[0, x, 10.0, x + 10.0, 40.0]] })
}

const TWO_CLIPS: &str = r#"{"clips": [
  {"clip_id": "c1", "width": 100, "height": 100, "num_frames": 1,
   "actors": [{"actor_id": 1, "boxes": [[0, 0, 0, 10, 30]]}, {"actor_id": 2, "boxes": [[0, 20, 0, 30, 30]]}],
   "groups": [{"group_id": 0, "members": [1, 2], "activity": 1}], "outliers": []},
  {"clip_id": "c2", "width": 100, "height": 100, "num_frames": 1,
   "actors": [{"actor_id": 3, "boxes": [[0, 0, 0, 10, 30]]}, {"actor_id": 4, "boxes": [[0, 20, 0, 30, 30]]},
              {"actor_id": 5, "boxes": [[0, 40, 0, 50, 30]]}],
   "groups": [{"group_id": 0, "members": [3, 4, 5], "activity": 1}], "outliers": []}
]}"#;

const TWO_PREDS: &str = r#"{"clips": [
  {"clip_id": "c1", "groups": [{"class_scores": [0.1, 0.9], "member_scores": [1.0, 1.0]}], "predicted_outliers": []},
  {"clip_id": "c2", "groups": [{"class_scores": [0.2, 0.8], "member_scores": [1.0, 1.0, 0.0]}], "predicted_outliers": [5]}
]}"#;

fn write(dir: &TempDir, name: &str, contents: &str) -> PathBuf {
    let p = path(dir, name);
    fs::write(&p, contents).unwrap();
    p
}

fn report_maps(json: &Path) -> Vec<(f64, f64)> {
    let v: Value = serde_json::from_str(&fs::read_to_string(json).unwrap()).unwrap();
    v["reports"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| (r["theta"].as_f64().unwrap(), r["group_map"].as_f64().unwrap()))
        .collect()
}

#[test]
fn evaluate_two_clip_fixture() {
    let dir = TempDir::new().unwrap();
    let gt = write(&dir, "gt.json", TWO_CLIPS);
    let pred = write(&dir, "pred.json", TWO_PREDS);
    let json = path(&dir, "report.json");
    let o = gad(&["evaluate", "--gt", s(&gt), "--pred", s(&pred), "--json", s(&json)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("Group mAP"));
    assert_eq!(report_maps(&json), vec![(1.0, 0.5), (0.5, 1.0)]);
}

#[test]
fn evaluate_perfect_predictions() {
    let dir = TempDir::new().unwrap();
    let clip = serde_json::json!({"clips": [{
        "clip_id": "a", "width": 100, "height": 100, "num_frames": 1,
        "actors": [actor(1, 0.0), actor(2, 15.0), actor(3, 60.0)],
        "groups": [{"group_id": 0, "members": [1, 2], "activity": 2}], "outliers": [3]
    }]});
    let pred = serde_json::json!({"clips": [{
        "clip_id": "a",
        "groups": [{"class_scores": [0.0, 0.1, 0.9], "member_scores": [0.9, 0.8, 0.1]}],
        "predicted_outliers": [3]
    }]});
    let gt = write(&dir, "gt.json", &clip.to_string());
    let pred = write(&dir, "pred.json", &pred.to_string());
    let json = path(&dir, "report.json");
    let o = gad(&["evaluate", "--gt", s(&gt), "--pred", s(&pred), "--json", s(&json)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(report_maps(&json), vec![(1.0, 1.0), (0.5, 1.0)]);
}

#[test]
fn evaluate_missing_clip_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let gt = write(&dir, "gt.json", TWO_CLIPS);
    let v: Value = serde_json::from_str(TWO_PREDS).unwrap();
    let only_first = serde_json::json!({ "clips": [v["clips"][0].clone()] });
    let pred = write(&dir, "pred.json", &only_first.to_string());
    let o = gad(&["evaluate", "--gt", s(&gt), "--pred", s(&pred)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("c2"), "{}", stderr(&o));
}

#[test]
fn evaluate_rejects_bad_theta_and_schema() {
    let dir = TempDir::new().unwrap();
    let gt = write(&dir, "gt.json", TWO_CLIPS);
    let pred = write(&dir, "pred.json", TWO_PREDS);
    let o = gad(&["evaluate", "--gt", s(&gt), "--pred", s(&pred), "--theta", "1.5"]);
    assert_eq!(o.status.code(), Some(1));
    let broken = write(&dir, "broken.json", r#"{"clips": [{"clip_id": "c1"}]}"#);
    let o = gad(&["evaluate", "--gt", s(&broken), "--pred", s(&pred)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn stats_writes_csv_and_summary() {
    let dir = TempDir::new().unwrap();
    let gt = write(&dir, "gt.json", TWO_CLIPS);
    let out = path(&dir, "stats");
    let o = gad(&["stats", "--gt", s(&gt), "--out-dir", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["group_size.csv", "actors_per_clip.csv", "aspect_ratio.csv", "summary.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["num_groups"], 2);
    // neither group has a non-member in its clip
    assert_eq!(summary["groups_without_counterpart"], 2);
}

fn synth(dir: &TempDir, seed: &str) -> (PathBuf, PathBuf) {
    let d = path(dir, "data.json");
    let f = path(dir, "feats.json");
    let o = gad(&["synth", "--out-dataset", s(&d), "--out-features", s(&f), "--seed", seed]);
    assert!(o.status.success(), "{}", stderr(&o));
    (d, f)
}

#[test]
fn synth_is_seeded() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let (da, fa) = synth(&a, "5");
    let (db, fb) = synth(&b, "5");
    assert_eq!(fs::read(&da).unwrap(), fs::read(&db).unwrap());
    assert_eq!(fs::read(&fa).unwrap(), fs::read(&fb).unwrap());
}

fn train(dir: &TempDir, data: &Path, feats: &Path, epochs: &str, tag: &str) -> (Output, PathBuf, PathBuf) {
    let ck = path(dir, &format!("{tag}.ckpt.json"));
    let curve = path(dir, &format!("{tag}.csv"));
    let o = gad(&[
        "train-toy",
        "--dataset",
        s(data),
        "--features",
        s(feats),
        "--epochs",
        epochs,
        "--seed",
        "1",
        "--checkpoint",
        s(&ck),
        "--curve",
        s(&curve),
    ]);
    (o, ck, curve)
}

#[test]
fn train_toy_is_deterministic_and_epochs_zero_keeps_init() {
    let dir = TempDir::new().unwrap();
    let (data, feats) = synth(&dir, "2");
    let (o1, ck1, c1) = train(&dir, &data, &feats, "3", "a");
    assert!(o1.status.success(), "{}", stderr(&o1));
    let (o2, ck2, c2) = train(&dir, &data, &feats, "3", "b");
    assert!(o2.status.success());
    assert_eq!(fs::read(&c1).unwrap(), fs::read(&c2).unwrap());
    assert_eq!(fs::read(&ck1).unwrap(), fs::read(&ck2).unwrap());
    let csv = fs::read_to_string(&c1).unwrap();
    assert_eq!(csv.lines().next(), Some("epoch,l_ind,l_group,l_mem,l_con,total"));
    assert_eq!(csv.lines().count(), 4);

    let (o0, ck0, _) = train(&dir, &data, &feats, "0", "zero");
    assert!(o0.status.success());
    let (o00, ck00, _) = train(&dir, &data, &feats, "0", "zero2");
    assert!(o00.status.success());
    assert_eq!(fs::read(&ck0).unwrap(), fs::read(&ck00).unwrap());
    assert_ne!(fs::read(&ck0).unwrap(), fs::read(&ck1).unwrap());
}

#[test]
fn train_infer_evaluate_pipeline() {
    let dir = TempDir::new().unwrap();
    let (data, feats) = synth(&dir, "3");
    let (o, ck, _) = train(&dir, &data, &feats, "200", "fit");
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("train set"));

    let pred = path(&dir, "pred.json");
    let o = gad(&["infer", "--checkpoint", s(&ck), "--dataset", s(&data), "--features", s(&feats), "--output", s(&pred)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let json = path(&dir, "report.json");
    let o = gad(&["evaluate", "--gt", s(&data), "--pred", s(&pred), "--json", s(&json)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(report_maps(&json), vec![(1.0, 1.0), (0.5, 1.0)]);

    // predicted member sets and outliers equal the annotations
    let gt: Value = serde_json::from_str(&fs::read_to_string(&data).unwrap()).unwrap();
    let p: Value = serde_json::from_str(&fs::read_to_string(&pred).unwrap()).unwrap();
    for (g, p) in gt["clips"].as_array().unwrap().iter().zip(p["clips"].as_array().unwrap()) {
        assert_eq!(g["outliers"], p["predicted_outliers"]);
        assert_eq!(g["groups"].as_array().unwrap().len(), p["groups"].as_array().unwrap().len());
    }
}

#[test]
fn infer_rejects_corrupted_checkpoint() {
    let dir = TempDir::new().unwrap();
    let (data, feats) = synth(&dir, "4");
    let pred = path(&dir, "pred.json");
    let run = |ck: &Path| gad(&["infer", "--checkpoint", s(ck), "--dataset", s(&data), "--features", s(&feats), "--output", s(&pred)]);

    let garbage = write(&dir, "garbage.json", "{ not json");
    assert_eq!(run(&garbage).status.code(), Some(1));

    // a valid checkpoint with one tensor truncated
    let (o, ck, _) = train(&dir, &data, &feats, "0", "init");
    assert!(o.status.success());
    let mut v: Value = serde_json::from_str(&fs::read_to_string(&ck).unwrap()).unwrap();
    v["group_cls.weight"]["values"].as_array_mut().unwrap().pop();
    let truncated = write(&dir, "truncated.json", &v.to_string());
    assert_eq!(run(&truncated).status.code(), Some(1));

    let mut v: Value = serde_json::from_str(&fs::read_to_string(&ck).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("group_cls.bias");
    let missing = write(&dir, "missing.json", &v.to_string());
    assert_eq!(run(&missing).status.code(), Some(1));
}

#[test]
fn infer_on_empty_dataset_writes_empty_file() {
    let dir = TempDir::new().unwrap();
    let (data, feats) = synth(&dir, "4");
    let (o, ck, _) = train(&dir, &data, &feats, "0", "init");
    assert!(o.status.success());
    let empty = write(&dir, "empty.json", r#"{"clips": []}"#);
    let no_feats = write(&dir, "no_feats.json", "[]");
    let pred = path(&dir, "pred.json");
    let o = gad(&["infer", "--checkpoint", s(&ck), "--dataset", s(&empty), "--features", s(&no_feats), "--output", s(&pred)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&fs::read_to_string(&pred).unwrap()).unwrap();
    assert_eq!(v["clips"], serde_json::json!([]));
}

#[test]
fn baseline_predictions_evaluate() {
    let dir = TempDir::new().unwrap();
    let (data, feats) = synth(&dir, "6");
    for affinity in ["rbf", "cosine"] {
        let pred = path(&dir, &format!("{affinity}.json"));
        let o = gad(&[
            "baseline", "--dataset", s(&data), "--features", s(&feats), "--output", s(&pred), "--affinity", affinity,
            "--k-clusters", "3", "--seed", "2",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let again = path(&dir, "again.json");
        let o = gad(&[
            "baseline", "--dataset", s(&data), "--features", s(&feats), "--output", s(&again), "--affinity", affinity,
            "--k-clusters", "3", "--seed", "2",
        ]);
        assert!(o.status.success());
        assert_eq!(fs::read(&pred).unwrap(), fs::read(&again).unwrap());
        let o = gad(&["evaluate", "--gt", s(&data), "--pred", s(&pred)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let o = gad(&["baseline", "--dataset", s(&data), "--output", s(&path(&dir, "x.json")), "--affinity", "cosine"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let o = gad(&["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("passed"));
}

#[test]
fn gradcheck_with_impossible_tolerance_is_a_numerical_failure() {
    let o = gad(&["gradcheck", "--tolerance", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_two() {
    let dir = TempDir::new().unwrap();
    let ck = path(&dir, "ck.json");
    let o = gad(&["train-toy", "--epochs", "3", "--lr", "1e300", "--checkpoint", s(&ck)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
}
