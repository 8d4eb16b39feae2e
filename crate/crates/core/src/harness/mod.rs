//! Experiment orchestration: config, runs over a task sequence, results
//! tables and rendered reports.

mod config;
mod run;
mod table;

use std::path::{Path, PathBuf};

pub use config::{
    apply_override, DatasetKind, DatasetSpec, DissectSpec, EvidenceKind, ExperimentConfig, ModelPreset, ModelSpec,
    TaskSpec,
};
pub use run::{
    base_dir, base_model, build_sequence, cell_dir, collect_reports, evaluate_model, load_records, run_experiment,
    train_increment,
};
pub use table::{Cell, CellKey, CellValue, EvalSplit, Metric, ResultsTable, METRICS, SPLITS};

use crate::dissect::{export_iou_curves, DissectionReport};
use crate::error::Result;

/// Table files plus, per dissection report, IoU curve CSVs and one plot per
/// dissected image under `iou/<name>/`.
pub fn report_render(table: &ResultsTable, reports: &[(String, DissectionReport)], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = table.write_all(out_dir)?;
    for (name, r) in reports {
        files.extend(export_iou_curves(r, &out_dir.join("iou").join(name))?);
    }
    Ok(files)
}
