use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cfd(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_cfd")).args(args).env("RUST_LOG", "warn").output().unwrap();
    assert!(
        out.status.success(),
        "cfd {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_gen_then_split_build() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = cfd(&["synth-gen", "--out", p(&data), "--classes", "circle,bar", "--train", "3", "--val", "2", "--test", "2", "--side", "32"]);
    let manifest = stdout(&o).trim().to_string();
    let lines = fs::read_to_string(&manifest).unwrap().lines().count();
    assert_eq!(lines, 2 * 7);

    let split = dir.path().join("split");
    let o = cfd(&["split-build", "--manifest", &manifest, "--universe", "circle,bar", "--side", "32", "--out", p(&split)]);
    assert!(Path::new(stdout(&o).trim()).exists());
}

#[test]
fn evaluate_scores_files() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, refs, out) = (dir.path().join("p.jsonl"), dir.path().join("r.jsonl"), dir.path().join("s.json"));
    fs::write(&pred, "{\"image_id\":\"a\",\"caption\":\"a red circle\"}\n{\"image_id\":\"b\",\"caption\":\"a blue bar\"}\n").unwrap();
    fs::write(&refs, "{\"image_id\":\"a\",\"captions\":[\"a red circle\"]}\n{\"image_id\":\"b\",\"captions\":[\"a blue bar\"]}\n").unwrap();
    cfd(&["evaluate", "--pred", p(&pred), "--refs", p(&refs), "--out", p(&out)]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["bleu4"], 1.0);
    assert_eq!(v["rouge_l"], 1.0);
}

#[test]
fn run_then_freeze_plan_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    let out = dir.path().join("run");
    let o = cfd(&[
        "run", "--config", p(&cfg), "--seed", "2",
        "--out-dir", p(&out),
        "--strategies", "finetune,l2",
        "--tasks.base", "circle,square",
        "--tasks.increments", "bar",
        "--dataset.train", "6",
        "--dataset.val", "2",
        "--dataset.test", "2",
        "--train.max-epochs", "2",
        "--train.patience", "1",
    ]);
    assert!(stdout(&o).contains("| finetune |") || stdout(&o).contains("finetune"));
    let table = out.join("results_s2.json");
    assert!(table.exists());
    assert!(out.join("report/results_s2.md").exists());

    let snap = out.join("cells/l2_s2_t1/snapshot");
    let o = cfd(&["freeze-plan", "--strategy", "critical3", "--snapshot", p(&snap)]);
    let plan: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(plan["frozen_groups"], serde_json::json!(["block_1", "block_2"]));

    let rep = dir.path().join("rep");
    let o = cfd(&["report", "--table", p(&table), "--out", p(&rep)]);
    assert_eq!(stdout(&o).lines().count(), 3);
}
