use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use cfd_core::data::{build_split, export_records, load_entry, read_manifest, synth_generate, ClearImageMode, SplitCounts, Split};
use cfd_core::dissect::{dissect_records, export_iou_curves, DissectionReport};
use cfd_core::evidence::{EvidenceSource, OcclusionConfig, OcclusionFill};
use cfd_core::harness::{
    base_dir, base_model, build_sequence, collect_reports, report_render, run_experiment, train_increment,
    ExperimentConfig, ResultsTable,
};
use cfd_core::masks::ThresholdPolicy;
use cfd_core::metrics::{score_files, ScoreSet};
use cfd_core::strategies::{make_freeze_plan, write_run_log, Strategy};
use cfd_core::Snapshot;

#[derive(Parser)]
#[command(name = "cfd", version, about = "Forgetting dissection and continual-learning experiments for image captioners")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic shapes dataset with masks and captions.
    SynthGen {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated shape names; all shapes when omitted.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 40)]
        val: usize,
        #[arg(long, default_value_t = 40)]
        test: usize,
        #[arg(long, default_value_t = 64)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Filter clear images, resize, and split validation records into val and test.
    SplitBuild {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        universe: Vec<String>,
        #[arg(long, default_value_t = 64)]
        side: usize,
        #[arg(long, default_value = "auto")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one task of the configured sequence under a strategy.
    Train {
        #[arg(long)]
        strategy: Strategy,
        #[arg(long)]
        task: usize,
        #[arg(long)]
        config: PathBuf,
        /// Snapshot trained through the previous task; required for task > 0.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Config overrides as `--key value` pairs.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Locate the forgetting block between two snapshots.
    Dissect {
        #[arg(long)]
        old: PathBuf,
        #[arg(long)]
        new: PathBuf,
        /// Manifest of sample images with ground-truth masks.
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        threshold_q: f64,
        /// Occlusion window; activations are used when omitted.
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Print the frozen parameter groups of a strategy.
    FreezePlan {
        #[arg(long)]
        strategy: Strategy,
        #[arg(long)]
        snapshot: PathBuf,
        /// Vocabulary size before expansion; defaults to the snapshot's.
        #[arg(long)]
        old_vocab: Option<usize>,
    },
    /// Score predicted captions against references.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every configured strategy over the task sequence.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Render tables and IoU plots from a finished run.
    Report {
        /// Results JSON written by `run`.
        #[arg(long)]
        table: PathBuf,
        /// Run output directory holding dissection reports.
        #[arg(long)]
        runs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn pairs(raw: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(k) = it.next() {
        let Some(key) = k.strip_prefix("--") else {
            bail!("expected --key, got {k:?}");
        };
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            continue;
        }
        let v = it.next().with_context(|| format!("--{key} needs a value"))?;
        out.push((key.to_string(), v.clone()));
    }
    Ok(out)
}

fn load_config(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut ov = pairs(overrides)?;
    if let Some(s) = seed {
        ov.push(("seed".into(), s.to_string()));
    }
    ExperimentConfig::load(path, &ov).with_context(|| format!("loading {}", path.display()))
}

fn write_scores(path: &Path, v: &ScoreSet) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::SynthGen {
            out,
            classes,
            train,
            val,
            test,
            side,
            seed,
        } => {
            let classes = if classes.is_empty() {
                cfd_core::data::SHAPES.iter().map(|s| s.to_string()).collect()
            } else {
                classes
            };
            let records = synth_generate(&classes, SplitCounts { train, val, test }, side, seed)?;
            let manifest = export_records(&out, &records)?;
            println!("{}", manifest.display());
        }
        Cmd::SplitBuild {
            manifest,
            universe,
            side,
            mode,
            out,
        } => {
            let mode: ClearImageMode = serde_json::from_value(serde_json::Value::String(mode.clone()))
                .with_context(|| format!("unknown mode {mode:?}"))?;
            let splits = build_split(&manifest, &universe, side, mode)?;
            let mut records = Vec::new();
            for (class, s) in splits {
                info!("{class}: {} train, {} val, {} test", s.train.len(), s.val.len(), s.test.len());
                for (split, recs) in [(Split::Train, s.train), (Split::Val, s.val), (Split::Test, s.test)] {
                    records.extend(recs.into_iter().map(|mut r| {
                        r.split = split;
                        r
                    }));
                }
            }
            println!("{}", export_records(&out, &records)?.display());
        }
        Cmd::Train {
            strategy,
            task,
            config,
            init,
            out,
            overrides,
        } => {
            let mut cfg = load_config(&config, &overrides, None)?;
            cfg.out_dir = out.clone();
            let seq = build_sequence(&cfg)?;
            if task >= seq.len() {
                bail!("task {task} outside a sequence of {}", seq.len());
            }
            let snap_dir = out.join("snapshot");
            if task == 0 {
                base_model(&cfg, &seq)?;
                let src = base_dir(&out, cfg.seed).join("snapshot");
                println!("{}", src.display());
                return Ok(());
            }
            let init = init.context("--init is required for task > 0")?;
            let prev = Snapshot::load(&init)?;
            fs::create_dir_all(&out)?;
            let (outcome, report) = train_increment(&cfg, &seq, task, &prev, strategy, &out)?;
            let mut model = outcome.snapshot;
            model.task_index = task;
            write_run_log(&out.join("run_log.jsonl"), &outcome.log)?;
            if let Some(r) = report {
                r.write_json(&out.join("dissection.json"))?;
            }
            model.save(&snap_dir)?;
            println!("{}", snap_dir.display());
        }
        Cmd::Dissect {
            old,
            new,
            samples,
            out,
            threshold_q,
            window,
            stride,
        } => {
            let (m_old, m_new) = (Snapshot::load(&old)?, Snapshot::load(&new)?);
            let side = m_old.descriptor.input_size;
            let records = read_manifest(&samples)?
                .iter()
                .map(|e| Ok(load_entry(&samples, e)?.resized(side)))
                .collect::<Result<Vec<_>>>()?;
            let source = match window {
                Some(w) => EvidenceSource::Occlusion(OcclusionConfig {
                    window: w,
                    stride: stride.unwrap_or(w),
                    fill: OcclusionFill::MeanOfImage,
                }),
                None => EvidenceSource::Activations,
            };
            let cfg = cfd_core::dissect::DissectConfig {
                policy: ThresholdPolicy::PositiveQuantile(threshold_q),
                source,
            };
            let report: DissectionReport = dissect_records(&records, &m_old, &m_new, &cfg)?;
            fs::create_dir_all(&out)?;
            report.write_json(&out.join("dissection.json"))?;
            export_iou_curves(&report, &out)?;
            println!("forgetting block {}", report.forgetting_block);
        }
        Cmd::FreezePlan {
            strategy,
            snapshot,
            old_vocab,
        } => {
            let m = Snapshot::load(&snapshot)?;
            let plan = make_freeze_plan(strategy, &m.descriptor, old_vocab.unwrap_or(m.vocab.len()))?;
            println!("{}", serde_json::to_string_pretty(&plan)?);
        }
        Cmd::Evaluate { pred, refs, out } => {
            let scores = score_files(&pred, &refs)?;
            write_scores(&out, &scores)?;
            println!("{}", serde_json::to_string(&scores)?);
        }
        Cmd::Run {
            config,
            seed,
            overrides,
        } => {
            let cfg = load_config(&config, &overrides, Some(seed))?;
            let table = run_experiment(&cfg)?;
            let reports = collect_reports(&cfg.out_dir)?;
            report_render(&table, &reports, &cfg.out_dir.join("report"))?;
            print!("{}", table.to_markdown());
            if table.failed() > 0 {
                log::warn!("{} of {} cells failed", table.failed(), table.len());
            }
        }
        Cmd::Report { table, runs, out } => {
            let text = fs::read_to_string(&table).with_context(|| format!("reading {}", table.display()))?;
            let t = ResultsTable::from_json(&text)?;
            let reports = match runs {
                Some(r) => collect_reports(&r)?,
                None => Vec::new(),
            };
            for f in report_render(&t, &reports, &out)? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}
