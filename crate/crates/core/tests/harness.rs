use std::fs;
use std::path::Path;

use cfd_core::harness::{collect_reports, report_render, run_experiment, EvalSplit, ExperimentConfig, Metric, ResultsTable};

fn tiny(out: &Path) -> ExperimentConfig {
    let text = r#"
strategies = ["finetune", "critical"]
[dataset]
train = 8
val = 3
test = 3
side = 64
[tasks]
base = ["circle", "square"]
increments = ["cross"]
[train]
max_epochs = 2
patience = 1
probe_epochs = 1
[dissect]
samples_per_class = 1
"#;
    let mut cfg = ExperimentConfig::from_toml(text, &[]).unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg.seed = 4;
    cfg.validate().unwrap();
    cfg
}

#[test]
fn run_writes_tables_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let table = run_experiment(&cfg).unwrap();
    assert_eq!(table.failed(), 0);
    // 2 strategies x 1 increment x 2 splits x 3 metrics
    assert_eq!(table.len(), 12);
    assert!(table.get("critical", 1, EvalSplit::New, Metric::Cider).unwrap().value().is_some());
    for ext in ["csv", "json", "md"] {
        assert!(dir.path().join(format!("results_s4.{ext}")).exists());
    }
    let cell = dir.path().join("cells/critical_s4_t1");
    for f in ["run_log.jsonl", "dissection.json", "predictions_past.jsonl", "predictions_new.jsonl", "scores.json"] {
        assert!(cell.join(f).exists(), "{f}");
    }

    let json = fs::read_to_string(dir.path().join("results_s4.json")).unwrap();
    assert_eq!(ResultsTable::from_json(&json).unwrap(), table);

    // finished cells are reused, a cell without scores is retrained to the same numbers
    let snap = dir.path().join("cells/finetune_s4_t1/snapshot/descriptor.json");
    let before = fs::metadata(&snap).unwrap().modified().unwrap();
    fs::remove_file(cell.join("scores.json")).unwrap();
    let again = run_experiment(&cfg).unwrap();
    assert_eq!(again, table);
    assert_eq!(fs::metadata(&snap).unwrap().modified().unwrap(), before);
}

#[test]
fn report_renders_iou_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let table = run_experiment(&cfg).unwrap();
    let reports = collect_reports(dir.path()).unwrap();
    assert_eq!(reports.len(), 1);
    let out = dir.path().join("report");
    let files = report_render(&table, &reports, &out).unwrap();
    assert!(files.iter().any(|f| f.starts_with(out.join("iou"))));
    assert!(files.iter().all(|f| f.exists()));
}
