//! Continual-learning strategies: freezing plans, loss terms, the trainer,
//! pseudo-labelling and critical freezing.

mod critical;
mod losses;
mod pseudo;
mod train;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use critical::{critical_freeze_pipeline, CriticalOutcome};
pub use losses::{batch_gradient, batch_loss, loss_ce, loss_distill, loss_pseudo, DistillSite};
pub use pseudo::{generate_pseudo_labels, PseudoLabels};
pub use train::{
    joint_train, prepare_examples, train_task, write_run_log, Adam, Aux, EpochRecord, Example, PhaseRecord, TermMeans,
    TrainConfig, TrainOutcome,
};

use crate::error::{CfdError, Result};
use crate::model::params::{block_group, CLASSIFIER_HEAD, DECODER_CORE, DECODER_OUTPUT, EMBED};
use crate::model::ArchitectureDescriptor;

/// Training strategy names, as accepted on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Strategy {
    FineTune,
    EncoderFreeze,
    DecoderFreeze,
    /// Freeze a single block `L_j`.
    Layer(usize),
    /// Pseudo-labelling with joint training.
    PseudoLabel,
    /// Distillation on pooled encoder features.
    Kd1,
    /// Distillation on decoder scores over the old vocabulary.
    Kd2,
    /// Critical freezing; `Some(F)` fixes the forgetting block, `None`
    /// asks the pipeline to locate it.
    Critical(Option<usize>),
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::FineTune => write!(f, "finetune"),
            Strategy::EncoderFreeze => write!(f, "ef"),
            Strategy::DecoderFreeze => write!(f, "df"),
            Strategy::Layer(j) => write!(f, "l{j}"),
            Strategy::PseudoLabel => write!(f, "lwf"),
            Strategy::Kd1 => write!(f, "kd1"),
            Strategy::Kd2 => write!(f, "kd2"),
            Strategy::Critical(None) => write!(f, "critical"),
            Strategy::Critical(Some(b)) => write!(f, "critical{b}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = CfdError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let unknown = || CfdError::UnknownStrategy(s.to_string());
        Ok(match lower.as_str() {
            "finetune" | "fine-tune" | "ft" => Strategy::FineTune,
            "ef" | "e_f" => Strategy::EncoderFreeze,
            "df" | "d_f" => Strategy::DecoderFreeze,
            "lwf" | "pseudo" => Strategy::PseudoLabel,
            "kd1" => Strategy::Kd1,
            "kd2" => Strategy::Kd2,
            "critical" | "cf" => Strategy::Critical(None),
            other => {
                if let Some(j) = other.strip_prefix("critical") {
                    Strategy::Critical(Some(j.trim_start_matches([':', '=']).parse().map_err(|_| unknown())?))
                } else if let Some(j) = other.strip_prefix('l') {
                    Strategy::Layer(j.parse().map_err(|_| unknown())?)
                } else {
                    return Err(unknown());
                }
            }
        })
    }
}

impl TryFrom<String> for Strategy {
    type Error = CfdError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.to_string()
    }
}

impl Strategy {
    pub fn distill_site(&self) -> Option<DistillSite> {
        match self {
            Strategy::Kd1 => Some(DistillSite::EncoderFeatures),
            Strategy::Kd2 => Some(DistillSite::OutputScores),
            _ => None,
        }
    }
}

/// Leading rows of one tensor that stay fixed while the rest train.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RowFreeze {
    pub group: String,
    pub tensor: String,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePlan {
    pub strategy_tag: String,
    pub frozen_groups: BTreeSet<String>,
    #[serde(default)]
    pub frozen_rows: Vec<RowFreeze>,
}

impl FreezePlan {
    pub fn none(tag: &str) -> Self {
        Self {
            strategy_tag: tag.to_string(),
            frozen_groups: BTreeSet::new(),
            frozen_rows: Vec::new(),
        }
    }

    pub fn is_frozen(&self, group: &str) -> bool {
        self.frozen_groups.contains(group)
    }

    /// Rows of `group/tensor` held fixed: all of them, a prefix, or none.
    pub fn frozen_prefix(&self, group: &str, tensor: &str, total_rows: usize) -> usize {
        if self.is_frozen(group) {
            return total_rows;
        }
        self.frozen_rows
            .iter()
            .filter(|r| r.group == group && r.tensor == tensor)
            .map(|r| r.rows.min(total_rows))
            .max()
            .unwrap_or(0)
    }

    /// Lowest block whose gradient is needed; `K + 1` when the encoder is frozen.
    pub fn gradient_floor(&self, k: usize) -> usize {
        (1..=k).find(|&l| !self.is_frozen(&block_group(l))).unwrap_or(k + 1)
    }

    /// Everything frozen except rows appended after `old_vocab` tokens and
    /// `old_classes` classes.
    pub fn new_neurons_only(d: &ArchitectureDescriptor, old_vocab: usize, old_classes: usize) -> Self {
        let mut frozen_groups: BTreeSet<String> = (1..=d.block_count()).map(block_group).collect();
        frozen_groups.insert(DECODER_CORE.to_string());
        let row = |group: &str, tensor: &str, rows: usize| RowFreeze {
            group: group.to_string(),
            tensor: tensor.to_string(),
            rows,
        };
        let mut frozen_rows = vec![
            row(DECODER_OUTPUT, "weight", old_vocab),
            row(DECODER_OUTPUT, "bias", old_vocab),
            row(CLASSIFIER_HEAD, "weight", old_classes),
            row(CLASSIFIER_HEAD, "bias", old_classes),
            row(EMBED, "word", old_vocab),
            row(EMBED, "feature_weight", d.embed_size),
            row(EMBED, "feature_bias", d.embed_size),
        ];
        frozen_rows.sort();
        Self {
            strategy_tag: "new-neurons-only".into(),
            frozen_groups,
            frozen_rows,
        }
    }
}

/// Frozen groups for `strategy` on a `K`-block model. `old_vocab` is the
/// vocabulary size before the current task's expansion.
pub fn make_freeze_plan(strategy: Strategy, d: &ArchitectureDescriptor, old_vocab: usize) -> Result<FreezePlan> {
    let k = d.block_count();
    let mut plan = FreezePlan::none(&strategy.to_string());
    match strategy {
        Strategy::FineTune | Strategy::PseudoLabel | Strategy::Kd1 | Strategy::Kd2 => {}
        Strategy::EncoderFreeze => plan.frozen_groups.extend((1..=k).map(block_group)),
        Strategy::DecoderFreeze => {
            plan.frozen_groups.insert(DECODER_CORE.to_string());
            for tensor in ["bias", "weight"] {
                plan.frozen_rows.push(RowFreeze {
                    group: DECODER_OUTPUT.to_string(),
                    tensor: tensor.to_string(),
                    rows: old_vocab,
                });
            }
        }
        Strategy::Layer(j) => {
            if j == 0 || j > k {
                return Err(CfdError::InvalidBlock(j));
            }
            plan.frozen_groups.insert(block_group(j));
        }
        Strategy::Critical(None) => {
            return Err(CfdError::InvalidConfig(
                "critical freezing needs a forgetting block; run the critical pipeline".into(),
            ))
        }
        Strategy::Critical(Some(f)) => {
            if f < 2 {
                return Err(CfdError::InvalidF(f));
            }
            if f > k {
                return Err(CfdError::InvalidBlock(f));
            }
            plan.frozen_groups.extend((1..f).map(block_group));
        }
    }
    Ok(plan)
}
