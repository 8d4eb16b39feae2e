use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;

use super::config::{DatasetKind, ExperimentConfig};
use super::table::{EvalSplit, ResultsTable};
use crate::data::{atomic_write, build_split, make_task_sequence, synth_generate, ImageRecord, Split, TaskSequence};
use crate::dissect::DissectionReport;
use crate::error::{CfdError, Result};
use crate::masks::BinaryMask;
use crate::metrics::{score_corpus, PredictionLine, ScoreSet};
use crate::model::ModelSnapshot;
use crate::scalar::Scalar;
use crate::strategies::{
    critical_freeze_pipeline, generate_pseudo_labels, joint_train, make_freeze_plan, train_task, write_run_log, Aux,
    FreezePlan, Strategy, TrainOutcome,
};
use crate::Snapshot;

/// Greedy captions for `records` and their scores against the records'
/// reference captions.
pub fn evaluate_model<T: Scalar>(
    m: &ModelSnapshot<T>,
    records: &[&ImageRecord],
    max_len: usize,
) -> Result<(ScoreSet, Vec<PredictionLine>)> {
    if records.is_empty() {
        return Err(CfdError::EmptyCorpus);
    }
    let preds = records
        .par_iter()
        .map(|r| {
            let img = r.image.resize(m.descriptor.input_size, m.descriptor.input_size);
            m.generate_caption(&img, max_len)
                .map(|c| PredictionLine {
                    image_id: r.image_id.clone(),
                    caption: c.text,
                })
                .map_err(|e| CfdError::in_image(&r.image_id, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let cands: Vec<&str> = preds.iter().map(|p| p.caption.as_str()).collect();
    let refs: Vec<Vec<&str>> = records
        .iter()
        .map(|r| r.captions.iter().map(String::as_str).collect())
        .collect();
    Ok((score_corpus(&cands, &refs)?, preds))
}

/// All records of the configured dataset, split-tagged.
pub fn load_records(cfg: &ExperimentConfig) -> Result<Vec<ImageRecord>> {
    let universe = cfg.tasks.universe();
    match cfg.dataset.kind {
        DatasetKind::Synthetic => synth_generate(&universe, cfg.dataset.counts(), cfg.dataset.side, cfg.seed),
        DatasetKind::Manifest => {
            let path = cfg
                .dataset
                .manifest
                .as_deref()
                .ok_or_else(|| CfdError::InvalidConfig("dataset.manifest missing".into()))?;
            let splits = build_split(path, &universe, cfg.dataset.side, cfg.dataset.clear_image_mode)?;
            let mut out = Vec::new();
            for s in splits.into_values() {
                for (split, recs) in [(Split::Train, s.train), (Split::Val, s.val), (Split::Test, s.test)] {
                    out.extend(recs.into_iter().map(|mut r| {
                        r.split = split;
                        r
                    }));
                }
            }
            Ok(out)
        }
    }
}

pub fn build_sequence(cfg: &ExperimentConfig) -> Result<TaskSequence> {
    make_task_sequence(&load_records(cfg)?, &cfg.tasks.base, &cfg.tasks.increments)
}

/// Directory of one (strategy, increment) cell.
pub fn cell_dir(out: &Path, strategy: &Strategy, seed: u64, task: usize) -> PathBuf {
    out.join("cells").join(format!("{strategy}_s{seed}_t{task}"))
}

pub fn base_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("base_s{seed}"))
}

fn save_snapshot(m: &Snapshot, dir: &Path) -> Result<()> {
    let tmp = dir.with_extension("tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| CfdError::io(&tmp, e))?;
    }
    m.save(&tmp)?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| CfdError::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| CfdError::io(dir, e))
}

fn write_jsonl<V: serde::Serialize>(path: &Path, lines: &[V]) -> Result<()> {
    let mut body = Vec::new();
    for l in lines {
        serde_json::to_writer(&mut body, l)?;
        body.push(b'\n');
    }
    atomic_write(path, &body)
}

fn write_pretty<V: serde::Serialize>(path: &Path, v: &V) -> Result<()> {
    atomic_write(path, (serde_json::to_string_pretty(v)? + "\n").as_bytes())
}

/// Trains the base task once per seed, or loads it if already present.
pub fn base_model(cfg: &ExperimentConfig, seq: &TaskSequence) -> Result<Snapshot> {
    let dir = base_dir(&cfg.out_dir, cfg.seed);
    let snap_dir = dir.join("snapshot");
    if snap_dir.join("descriptor.json").exists() {
        info!("base model: reusing {}", snap_dir.display());
        return Snapshot::load(&snap_dir);
    }
    let task = &seq.tasks[0];
    let init = Snapshot::build_with(
        cfg.model.descriptor(cfg.dataset.side),
        seq.vocabulary_through(0),
        task.classes.clone(),
        cfg.seed,
    )?;
    info!("base model: training on {} classes", task.classes.len());
    let out = train_task(&init, &task.train, &task.val, &FreezePlan::none("base"), &cfg.train, &Aux::None)?;
    fs::create_dir_all(&dir).map_err(|e| CfdError::io(&dir, e))?;
    write_run_log(&dir.join("run_log.jsonl"), &out.log)?;
    let test: Vec<&ImageRecord> = task.test.iter().collect();
    let (scores, preds) = evaluate_model(&out.snapshot, &test, cfg.train.max_caption_len)?;
    info!("base model: test CIDEr {:.4}", scores.cider);
    write_jsonl(&dir.join("predictions_test.jsonl"), &preds)?;
    write_pretty(&dir.join("scores.json"), &scores)?;
    save_snapshot(&out.snapshot, &snap_dir)?;
    Ok(out.snapshot)
}

fn dissection_samples(seq: &TaskSequence, k: usize, per_class: usize) -> (Vec<ImageRecord>, Vec<BinaryMask>) {
    let mut samples = Vec::new();
    for class in seq.classes_through(k - 1) {
        let owner = seq.tasks[..k].iter().find(|t| t.classes.contains(&class)).expect("class has a task");
        samples.extend(owner.val.iter().filter(|r| r.class == class).take(per_class).cloned());
    }
    let gts = samples.iter().map(|r| r.mask.clone()).collect();
    (samples, gts)
}

/// Trains increment `k` from `prev` under `strategy`, writing plan and
/// probe artifacts into `dir`.
pub fn train_increment(
    cfg: &ExperimentConfig,
    seq: &TaskSequence,
    k: usize,
    prev: &Snapshot,
    strategy: Strategy,
    dir: &Path,
) -> Result<(TrainOutcome<f32>, Option<DissectionReport>)> {
    let task = &seq.tasks[k];
    let expanded = prev.expand_vocabulary(&task.new_tokens)?.expand_classes(&task.classes)?;
    let (old_vocab, old_classes) = (prev.vocab.len(), prev.classes.len());
    let tc = &cfg.train;
    let (out, report) = match strategy {
        Strategy::PseudoLabel => {
            let images: Vec<ImageRecord> = task.train.iter().chain(&task.val).cloned().collect();
            let cache = cfg.out_dir.join("pseudo_cache");
            let pseudo = generate_pseudo_labels(prev, &images, tc.max_caption_len, Some(&cache))?;
            (joint_train(&expanded, &task.train, &task.val, tc, &pseudo, old_vocab, old_classes)?, None)
        }
        Strategy::Kd1 | Strategy::Kd2 => {
            let site = strategy.distill_site().expect("distillation strategy");
            let student = Snapshot::build_with(
                expanded.descriptor.clone(),
                expanded.vocab.clone(),
                expanded.classes.clone(),
                cfg.seed.wrapping_add(1000 + k as u64),
            )?;
            let aux = Aux::Teacher(prev, site);
            (train_task(&student, &task.train, &task.val, &FreezePlan::none(&strategy.to_string()), tc, &aux)?, None)
        }
        Strategy::Critical(None) => {
            let (samples, gts) = dissection_samples(seq, k, cfg.dissect.samples_per_class);
            let c = critical_freeze_pipeline(
                prev,
                &expanded,
                &samples,
                &gts,
                &task.train,
                &task.val,
                tc,
                &cfg.dissect.config(),
                None,
            )?;
            write_run_log(&dir.join("probe_log.jsonl"), &c.probe_log)?;
            write_pretty(&dir.join("freeze_plan.json"), &c.plan)?;
            (c.trained, Some(c.report))
        }
        s => {
            let plan = make_freeze_plan(s, &expanded.descriptor, old_vocab)?;
            write_pretty(&dir.join("freeze_plan.json"), &plan)?;
            (train_task(&expanded, &task.train, &task.val, &plan, tc, &Aux::None)?, None)
        }
    };
    Ok((out, report))
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CellScores {
    past: ScoreSet,
    new: ScoreSet,
}

/// One increment: trains (or resumes) and evaluates. Returns the model
/// handed to the next increment.
fn run_cell(
    cfg: &ExperimentConfig,
    seq: &TaskSequence,
    k: usize,
    prev: &Snapshot,
    strategy: Strategy,
    table: &mut ResultsTable,
) -> Result<Snapshot> {
    let dir = cell_dir(&cfg.out_dir, &strategy, cfg.seed, k);
    let snap_dir = dir.join("snapshot");
    let scores_path = dir.join("scores.json");
    let name = strategy.to_string();
    if snap_dir.join("descriptor.json").exists() && scores_path.exists() {
        info!("{name} task {k}: resuming from {}", dir.display());
        let text = fs::read_to_string(&scores_path).map_err(|e| CfdError::io(&scores_path, e))?;
        let s: CellScores = serde_json::from_str(&text)?;
        table.set_scores(&name, k, EvalSplit::Past, &s.past);
        table.set_scores(&name, k, EvalSplit::New, &s.new);
        return Snapshot::load(&snap_dir);
    }
    fs::create_dir_all(&dir).map_err(|e| CfdError::io(&dir, e))?;
    info!("{name} task {k}: training");
    let (out, report) = train_increment(cfg, seq, k, prev, strategy, &dir)?;
    let mut model = out.snapshot;
    model.task_index = k;
    write_run_log(&dir.join("run_log.jsonl"), &out.log)?;
    if let Some(r) = &report {
        r.write_json(&dir.join("dissection.json"))?;
        info!("{name} task {k}: forgetting block {}", r.forgetting_block);
    }
    let max_len = cfg.train.max_caption_len;
    let past = seq.past_test(k);
    let new: Vec<&ImageRecord> = seq.tasks[k].test.iter().collect();
    let (past_scores, past_preds) = evaluate_model(&model, &past, max_len)?;
    let (new_scores, new_preds) = evaluate_model(&model, &new, max_len)?;
    write_jsonl(&dir.join("predictions_past.jsonl"), &past_preds)?;
    write_jsonl(&dir.join("predictions_new.jsonl"), &new_preds)?;
    save_snapshot(&model, &snap_dir)?;
    write_pretty(
        &scores_path,
        &CellScores {
            past: past_scores,
            new: new_scores,
        },
    )?;
    table.set_scores(&name, k, EvalSplit::Past, &past_scores);
    table.set_scores(&name, k, EvalSplit::New, &new_scores);
    Ok(model)
}

fn run_strategy(cfg: &ExperimentConfig, seq: &TaskSequence, base: &Snapshot, strategy: Strategy) -> ResultsTable {
    let mut table = ResultsTable::new(cfg.seed);
    let name = strategy.to_string();
    let mut prev = base.clone();
    for k in 1..seq.len() {
        match run_cell(cfg, seq, k, &prev, strategy, &mut table) {
            Ok(m) => prev = m,
            Err(e) => {
                warn!("{name} task {k} failed: {e}");
                table.set_failed(&name, k, &e.to_string());
                for later in k + 1..seq.len() {
                    table.set_failed(&name, later, &format!("increment {k} failed"));
                }
                break;
            }
        }
    }
    table
}

/// Runs every configured strategy over the task sequence and writes
/// `results_s{seed}.{csv,json,md}` into the output directory. Completed
/// cells found on disk are reused.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultsTable> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| CfdError::io(&cfg.out_dir, e))?;
    atomic_write(&cfg.out_dir.join(format!("config_s{}.toml", cfg.seed)), cfg.to_toml()?.as_bytes())?;
    let seq = build_sequence(cfg)?;
    write_pretty(&cfg.out_dir.join(format!("tasks_s{}.json", cfg.seed)), &seq.summary())?;
    let mut table = ResultsTable::new(cfg.seed);
    match base_model(cfg, &seq) {
        Ok(base) => {
            let parts: Vec<ResultsTable> = if cfg.parallel {
                cfg.strategies.par_iter().map(|s| run_strategy(cfg, &seq, &base, *s)).collect()
            } else {
                cfg.strategies.iter().map(|s| run_strategy(cfg, &seq, &base, *s)).collect()
            };
            for p in parts {
                table.merge(p);
            }
        }
        Err(e) => {
            warn!("base task failed: {e}");
            for s in &cfg.strategies {
                for k in 1..seq.len() {
                    table.set_failed(&s.to_string(), k, &format!("base task failed: {e}"));
                }
            }
        }
    }
    table.write_all(&cfg.out_dir)?;
    Ok(table)
}

/// Dissection reports written by an experiment, named after their cell.
pub fn collect_reports(out_dir: &Path) -> Result<Vec<(String, DissectionReport)>> {
    let cells = out_dir.join("cells");
    if !cells.exists() {
        return Ok(Vec::new());
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(&cells)
        .map_err(|e| CfdError::io(&cells, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("dissection.json").exists())
        .collect();
    dirs.sort();
    dirs.iter()
        .map(|d| {
            let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, DissectionReport::read_json(&d.join("dissection.json"))?))
        })
        .collect()
}
