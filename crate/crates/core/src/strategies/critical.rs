use log::info;

use super::train::{probe_train, train_task, Aux, TrainConfig, TrainOutcome};
use super::{make_freeze_plan, FreezePlan, Strategy};
use crate::data::ImageRecord;
use crate::dissect::{dissect, DissectConfig, DissectionReport};
use crate::error::Result;
use crate::masks::BinaryMask;
use crate::model::ModelSnapshot;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct CriticalOutcome<T> {
    pub report: DissectionReport,
    pub plan: FreezePlan,
    /// Run log of the fine-tuning probe; empty when a probe was supplied.
    pub probe_log: Vec<super::EpochRecord>,
    pub trained: TrainOutcome<T>,
}

/// Locates the forgetting block between `m_old` and a probe model, then
/// trains `m_start` with blocks `1..F` frozen.
///
/// `m_start` is `m_old` after vocabulary and class expansion for the task.
/// Without `probe`, one is fine-tuned from `m_start` for
/// `cfg.probe_epochs` epochs and discarded after dissection.
#[allow(clippy::too_many_arguments)]
pub fn critical_freeze_pipeline<T: Scalar>(
    m_old: &ModelSnapshot<T>,
    m_start: &ModelSnapshot<T>,
    samples: &[ImageRecord],
    gts: &[BinaryMask],
    train: &[ImageRecord],
    val: &[ImageRecord],
    cfg: &TrainConfig,
    dcfg: &DissectConfig,
    probe: Option<&ModelSnapshot<T>>,
) -> Result<CriticalOutcome<T>> {
    cfg.validate()?;
    let (probe_model, probe_log) = match probe {
        Some(p) => (p.clone(), Vec::new()),
        None => {
            let out = probe_train(m_start, train, val, cfg)?;
            (out.snapshot, out.log)
        }
    };
    let report = dissect(samples, gts, m_old, &probe_model, m_old.block_count(), dcfg)?;
    info!("forgetting block {} over {} images", report.forgetting_block, samples.len());
    let plan = make_freeze_plan(
        Strategy::Critical(Some(report.forgetting_block)),
        &m_start.descriptor,
        m_old.vocab.len(),
    )?;
    let trained = train_task(m_start, train, val, &plan, cfg, &Aux::None)?;
    Ok(CriticalOutcome {
        report,
        plan,
        probe_log,
        trained,
    })
}
