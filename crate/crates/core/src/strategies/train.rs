use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::losses::{batch_gradient, batch_loss, DistillSite};
use super::pseudo::PseudoLabels;
use super::FreezePlan;
use crate::data::{atomic_write, ImageRecord};
use crate::error::{CfdError, Result};
use crate::model::params::parse_block_group;
use crate::model::{LossBreakdown, LossWeights, ModelSnapshot, Params, SampleTargets, TeacherSignal};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub patience: usize,
    pub learning_rate: f64,
    /// Encoder learning rate when distilling.
    pub distill_encoder_lr: f64,
    pub beta: f64,
    pub lambda: f64,
    /// Weight of the auxiliary classification loss.
    pub class_weight: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub max_caption_len: usize,
    /// Fine-tuning epochs of the probe model handed to dissection.
    pub probe_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            patience: 5,
            learning_rate: 5e-4,
            distill_encoder_lr: 5e-5,
            beta: 1.0,
            lambda: 1.0,
            class_weight: 1.0,
            max_epochs: 50,
            seed: 0,
            max_caption_len: 16,
            probe_epochs: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CfdError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 || self.probe_epochs == 0 {
            return bad("batch_size, max_epochs, patience and probe_epochs must be positive");
        }
        if self.patience >= self.max_epochs {
            return bad("patience must be smaller than max_epochs");
        }
        let rates = [self.learning_rate, self.distill_encoder_lr];
        if rates.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return bad("learning rates must be positive");
        }
        if [self.beta, self.lambda, self.class_weight].iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return bad("beta, lambda and class_weight must be nonnegative");
        }
        if self.max_caption_len < 2 {
            return bad("max_caption_len must be >= 2");
        }
        Ok(())
    }

    pub fn weights<T: Scalar>(&self) -> LossWeights<T> {
        LossWeights {
            class_weight: T::from_f64_lossy(self.class_weight),
            beta: T::from_f64_lossy(self.beta),
            lambda: T::from_f64_lossy(self.lambda),
        }
    }
}

/// One image prepared for training under a given vocabulary and class list.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<T> {
    pub image_id: String,
    pub input: Vec<T>,
    pub class_id: Option<usize>,
    /// Encoded reference captions, each ending at the end token.
    pub captions: Vec<Vec<usize>>,
    pub pseudo: Option<Vec<usize>>,
    /// One signal per caption for output scores, a single one for features.
    pub teacher: Vec<TeacherSignal<T>>,
}

impl<T: Scalar> Example<T> {
    /// Supervision for `caption`.
    pub fn targets(&self, caption: usize) -> SampleTargets<'_, T> {
        let ci = caption % self.captions.len();
        SampleTargets {
            input: &self.input,
            class_id: self.class_id,
            caption: &self.captions[ci],
            pseudo: self.pseudo.as_deref(),
            teacher: (!self.teacher.is_empty()).then(|| &self.teacher[ci.min(self.teacher.len() - 1)]),
        }
    }
}

pub fn prepare_examples<T: Scalar>(m: &ModelSnapshot<T>, records: &[ImageRecord]) -> Vec<Example<T>> {
    records
        .par_iter()
        .map(|r| Example {
            image_id: r.image_id.clone(),
            input: r.image.resize(m.descriptor.input_size, m.descriptor.input_size).to_chw(),
            class_id: m.classes.iter().position(|c| c == &r.class),
            captions: r.captions.iter().map(|c| m.vocab.encode(c)).collect(),
            pseudo: None,
            teacher: Vec::new(),
        })
        .collect()
}

/// Extra supervision for a training run.
pub enum Aux<'a, T> {
    None,
    Pseudo(&'a PseudoLabels),
    Teacher(&'a ModelSnapshot<T>, DistillSite),
}

fn attach<T: Scalar>(examples: &mut [Example<T>], aux: &Aux<'_, T>) -> Result<()> {
    match aux {
        Aux::None => {}
        Aux::Pseudo(labels) => {
            for ex in examples.iter_mut() {
                let cap = labels
                    .get(&ex.image_id)
                    .ok_or_else(|| CfdError::in_image(&ex.image_id, CfdError::LengthMismatch("no pseudo label".into())))?;
                ex.pseudo = Some(cap.tokens.clone());
            }
        }
        Aux::Teacher(teacher, site) => {
            examples.par_iter_mut().for_each(|ex| {
                let pooled = teacher.encode_input(&ex.input).pooled;
                ex.teacher = match site {
                    DistillSite::EncoderFeatures => vec![TeacherSignal::Features(pooled)],
                    DistillSite::OutputScores => ex
                        .captions
                        .iter()
                        .map(|c| TeacherSignal::Scores(teacher.decoder_logits(&pooled, c)))
                        .collect(),
                };
            });
        }
    }
    Ok(())
}

/// Adam with per-tensor moments; frozen tensors and frozen row prefixes
/// are never touched.
pub struct Adam<T> {
    m: Params<T>,
    v: Params<T>,
    t: i32,
    beta1: T,
    beta2: T,
    eps: T,
}

impl<T: Scalar> Adam<T> {
    pub fn new(like: &Params<T>) -> Self {
        Self {
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
            beta1: T::from_f64_lossy(0.9),
            beta2: T::from_f64_lossy(0.999),
            eps: T::from_f64_lossy(1e-8),
        }
    }

    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>, plan: &FreezePlan, lr_for: impl Fn(&str) -> T) {
        self.t += 1;
        let c1 = T::one() - self.beta1.powi(self.t);
        let c2 = T::one() - self.beta2.powi(self.t);
        for (gi, group) in params.groups.iter_mut().enumerate() {
            if plan.is_frozen(&group.name) {
                continue;
            }
            let lr = lr_for(&group.name);
            for (ti, tensor) in group.tensors.iter_mut().enumerate() {
                let start = plan.frozen_prefix(&group.name, &tensor.name, tensor.rows()) * tensor.row_len();
                let g = &grads.groups[gi].tensors[ti].data;
                let m = &mut self.m.groups[gi].tensors[ti].data;
                let v = &mut self.v.groups[gi].tensors[ti].data;
                for i in start..tensor.data.len() {
                    m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * g[i];
                    v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * g[i] * g[i];
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    tensor.data[i] = tensor.data[i] - lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermMeans {
    pub ce: f64,
    pub p: Option<f64>,
    pub dis: Option<f64>,
    pub cls: Option<f64>,
}

impl TermMeans {
    fn from<T: Scalar>(l: &LossBreakdown<T>) -> Self {
        Self {
            ce: l.l_ce.to_f64_lossless(),
            p: l.l_p.map(Scalar::to_f64_lossless),
            dis: l.l_dis.map(Scalar::to_f64_lossless),
            cls: l.l_cls.map(Scalar::to_f64_lossless),
        }
    }
}

/// One line of the JSON-lines run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<String>,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub terms: TermMeans,
}

/// Boundary record of one training phase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: String,
    pub epochs: usize,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<T> {
    pub snapshot: ModelSnapshot<T>,
    pub log: Vec<EpochRecord>,
    pub phases: Vec<PhaseRecord>,
}

impl<T> TrainOutcome<T> {
    /// Epoch of the returned snapshot within the last phase.
    pub fn best_epoch(&self) -> usize {
        self.phases.last().map_or(0, |p| p.best_epoch)
    }

    pub fn epochs(&self) -> usize {
        self.log.len()
    }
}

pub fn write_run_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut body = Vec::new();
    for r in log {
        serde_json::to_writer(&mut body, r)?;
        body.push(b'\n');
    }
    atomic_write(path, &body)
}

fn epoch_seed(seed: u64, phase: &str, epoch: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(phase.as_bytes());
    h.update((epoch as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn mean_loss<T: Scalar>(m: &ModelSnapshot<T>, ex: &[Example<T>], w: &LossWeights<T>, caption: usize) -> LossBreakdown<T> {
    let targets: Vec<SampleTargets<'_, T>> = ex.iter().map(|e| e.targets(caption)).collect();
    batch_loss(m, &targets, w)
}

struct Phase<'a> {
    name: Option<&'a str>,
    plan: &'a FreezePlan,
    encoder_lr: f64,
    max_epochs: usize,
    restore_best: bool,
}

fn check_plan<T: Scalar>(m: &ModelSnapshot<T>, plan: &FreezePlan) -> Result<()> {
    let names = m.params.names();
    for g in plan.frozen_groups.iter().chain(plan.frozen_rows.iter().map(|r| &r.group)) {
        if !names.contains(&g.as_str()) {
            return Err(CfdError::InvalidConfig(format!("plan names unknown group {g}")));
        }
    }
    Ok(())
}

fn run_phase<T: Scalar>(
    start: &ModelSnapshot<T>,
    train: &[Example<T>],
    val: &[Example<T>],
    cfg: &TrainConfig,
    phase: Phase<'_>,
    log: &mut Vec<EpochRecord>,
) -> Result<(ModelSnapshot<T>, PhaseRecord)> {
    check_plan(start, phase.plan)?;
    let w = cfg.weights::<T>();
    let lr = T::from_f64_lossy(cfg.learning_rate);
    let enc_lr = T::from_f64_lossy(phase.encoder_lr);
    let lr_for = |g: &str| if parse_block_group(g).is_some() { enc_lr } else { lr };
    let mut model = start.clone();
    let mut adam = Adam::new(&model.params);
    let mut best: Option<(T, usize, ModelSnapshot<T>)> = None;
    let tag = phase.name.unwrap_or("train");
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=phase.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, tag, epoch));
        order.shuffle(&mut rng);
        let mut seen = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<SampleTargets<'_, T>> = chunk.iter().map(|&i| train[i].targets(epoch + i)).collect();
            let (loss, grads) = batch_gradient(&model, &batch, &w, Some(phase.plan));
            if !loss.total.is_finite() {
                return Err(CfdError::DivergedTraining(epoch));
            }
            adam.step(&mut model.params, &grads, phase.plan, lr_for);
            seen.push(loss);
        }
        let train_loss = LossBreakdown::mean(&seen);
        let val_loss = mean_loss(&model, val, &w, 0);
        if !val_loss.total.is_finite() {
            return Err(CfdError::DivergedTraining(epoch));
        }
        info!(
            "{tag} epoch {epoch}: train {:.5} val {:.5}",
            train_loss.total.to_f64_lossless(),
            val_loss.total.to_f64_lossless()
        );
        log.push(EpochRecord {
            phase: phase.name.map(str::to_string),
            epoch,
            train_loss: train_loss.total.to_f64_lossless(),
            val_loss: val_loss.total.to_f64_lossless(),
            terms: TermMeans::from(&train_loss),
        });
        let improved = best.as_ref().is_none_or(|(b, _, _)| val_loss.total < *b);
        if improved {
            best = Some((val_loss.total, epoch, model.clone()));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    let epochs = log.iter().filter(|r| r.phase.as_deref() == phase.name).count();
    let record = |best_epoch| PhaseRecord {
        phase: tag.to_string(),
        epochs,
        best_epoch,
    };
    info!("{tag}: {epochs} epochs");
    match best {
        Some((_, e, snap)) if phase.restore_best => Ok((snap, record(e))),
        _ => Ok((model, record(epochs))),
    }
}

fn prepare_run<T: Scalar>(
    model: &ModelSnapshot<T>,
    train: &[ImageRecord],
    val: &[ImageRecord],
    aux: &Aux<'_, T>,
) -> Result<(Vec<Example<T>>, Vec<Example<T>>)> {
    if train.is_empty() {
        return Err(CfdError::EmptyTask);
    }
    let mut tr = prepare_examples(model, train);
    let mut va = prepare_examples(model, val);
    attach(&mut tr, aux)?;
    attach(&mut va, aux)?;
    if va.is_empty() {
        warn!("empty validation split; early stopping on training records");
        va = tr.clone();
    }
    Ok((tr, va))
}

/// Trains `model` on one task under `plan`; returns the snapshot with the
/// lowest validation loss. The input snapshot is not modified.
pub fn train_task<T: Scalar>(
    model: &ModelSnapshot<T>,
    train: &[ImageRecord],
    val: &[ImageRecord],
    plan: &FreezePlan,
    cfg: &TrainConfig,
    aux: &Aux<'_, T>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let (tr, va) = prepare_run(model, train, val, aux)?;
    let encoder_lr = match aux {
        Aux::Teacher(..) => cfg.distill_encoder_lr,
        _ => cfg.learning_rate,
    };
    let mut log = Vec::new();
    let phase = Phase {
        name: None,
        plan,
        encoder_lr,
        max_epochs: cfg.max_epochs,
        restore_best: true,
    };
    let (snapshot, rec) = run_phase(model, &tr, &va, cfg, phase, &mut log)?;
    Ok(TrainOutcome {
        snapshot,
        log,
        phases: vec![rec],
    })
}

/// Fixed-length fine-tuning run whose final state is returned.
pub(crate) fn probe_train<T: Scalar>(
    model: &ModelSnapshot<T>,
    train: &[ImageRecord],
    val: &[ImageRecord],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let (tr, va) = prepare_run(model, train, val, &Aux::None)?;
    let plan = FreezePlan::none("probe");
    let probe_cfg = TrainConfig {
        patience: cfg.probe_epochs + 1,
        ..cfg.clone()
    };
    let mut log = Vec::new();
    let phase = Phase {
        name: Some("probe"),
        plan: &plan,
        encoder_lr: cfg.learning_rate,
        max_epochs: cfg.probe_epochs,
        restore_best: false,
    };
    let (snapshot, rec) = run_phase(model, &tr, &va, &probe_cfg, phase, &mut log)?;
    Ok(TrainOutcome {
        snapshot,
        log,
        phases: vec![rec],
    })
}

/// Two phases: only rows appended for the new vocabulary and classes
/// train, then the whole model.
pub fn joint_train<T: Scalar>(
    model: &ModelSnapshot<T>,
    train: &[ImageRecord],
    val: &[ImageRecord],
    cfg: &TrainConfig,
    pseudo: &PseudoLabels,
    old_vocab: usize,
    old_classes: usize,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let (tr, va) = prepare_run(model, train, val, &Aux::Pseudo(pseudo))?;
    let mut log = Vec::new();
    let head_only = FreezePlan::new_neurons_only(&model.descriptor, old_vocab, old_classes);
    let p1 = Phase {
        name: Some("phase1"),
        plan: &head_only,
        encoder_lr: cfg.learning_rate,
        max_epochs: cfg.max_epochs,
        restore_best: true,
    };
    let (mid, r1) = run_phase(model, &tr, &va, cfg, p1, &mut log)?;
    let all = FreezePlan::none("joint");
    let p2 = Phase {
        name: Some("phase2"),
        plan: &all,
        encoder_lr: cfg.learning_rate,
        max_epochs: cfg.max_epochs,
        restore_best: true,
    };
    let (snapshot, r2) = run_phase(&mid, &tr, &va, cfg, p2, &mut log)?;
    Ok(TrainOutcome {
        snapshot,
        log,
        phases: vec![r1, r2],
    })
}
