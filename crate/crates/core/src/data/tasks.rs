use serde::{Deserialize, Serialize};

use super::record::{ImageRecord, Split};
use crate::error::{CfdError, Result};
use crate::model::Vocabulary;

/// One step of a class-incremental sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub index: usize,
    pub classes: Vec<String>,
    pub train: Vec<ImageRecord>,
    pub val: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
    /// Caption tokens first seen in this task's training captions.
    pub new_tokens: Vec<String>,
}

/// Base task followed by single-class increments.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSequence {
    pub tasks: Vec<Task>,
}

/// Class and vocabulary bookkeeping of a sequence, without the records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub index: usize,
    pub classes: Vec<String>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub new_tokens: Vec<String>,
    pub vocab_size: usize,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Vocabulary after the tokens of tasks `0..=k`.
    pub fn vocabulary_through(&self, k: usize) -> Vocabulary {
        let mut v = Vocabulary::default();
        for t in &self.tasks[..=k] {
            for tok in &t.new_tokens {
                v.push(tok.clone()).expect("new tokens are disjoint by construction");
            }
        }
        v
    }

    /// Classes of tasks `0..=k`, in order of arrival.
    pub fn classes_through(&self, k: usize) -> Vec<String> {
        self.tasks[..=k].iter().flat_map(|t| t.classes.iter().cloned()).collect()
    }

    /// Test records of tasks `0..k` (everything seen before task `k`).
    pub fn past_test(&self, k: usize) -> Vec<&ImageRecord> {
        self.tasks[..k].iter().flat_map(|t| &t.test).collect()
    }

    pub fn summary(&self) -> Vec<TaskSummary> {
        self.tasks
            .iter()
            .map(|t| TaskSummary {
                index: t.index,
                classes: t.classes.clone(),
                train: t.train.len(),
                val: t.val.len(),
                test: t.test.len(),
                new_tokens: t.new_tokens.clone(),
                vocab_size: self.vocabulary_through(t.index).len(),
            })
            .collect()
    }
}

/// Groups records into the base task and one task per class of
/// `increment_order`; vocabulary additions come from training captions.
pub fn make_task_sequence(records: &[ImageRecord], base_classes: &[String], increment_order: &[String]) -> Result<TaskSequence> {
    let mut seen: Vec<&String> = Vec::new();
    for c in base_classes.iter().chain(increment_order) {
        if seen.contains(&c) {
            return Err(CfdError::OverlappingClasses(c.clone()));
        }
        seen.push(c);
    }
    if base_classes.is_empty() {
        return Err(CfdError::InvalidConfig("base task needs at least one class".into()));
    }
    let groups: Vec<Vec<String>> = std::iter::once(base_classes.to_vec())
        .chain(increment_order.iter().map(|c| vec![c.clone()]))
        .collect();

    let mut sorted: Vec<&ImageRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    let mut vocab = Vocabulary::default();
    let mut tasks = Vec::with_capacity(groups.len());
    for (index, classes) in groups.into_iter().enumerate() {
        let pick = |split: Split| -> Vec<ImageRecord> {
            sorted
                .iter()
                .filter(|r| r.split == split && classes.contains(&r.class))
                .map(|r| (*r).clone())
                .collect()
        };
        let (train, val, test) = (pick(Split::Train), pick(Split::Val), pick(Split::Test));
        for c in &classes {
            for (name, part) in [("train", &train), ("val", &val), ("test", &test)] {
                if !part.iter().any(|r| &r.class == c) {
                    return Err(CfdError::MissingClass(format!("{c} ({name})")));
                }
            }
        }
        let new_tokens = vocab.missing_tokens(train.iter().flat_map(|r| r.captions.iter().map(String::as_str)));
        for t in &new_tokens {
            vocab.push(t.clone())?;
        }
        tasks.push(Task {
            index,
            classes,
            train,
            val,
            test,
            new_tokens,
        });
    }
    Ok(TaskSequence { tasks })
}
