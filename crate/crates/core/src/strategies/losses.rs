use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::FreezePlan;
use crate::error::{CfdError, Result};
use crate::model::vocab::PAD_ID;
use crate::model::{sample_loss, LossBreakdown, LossWeights, ModelSnapshot, Params, SampleTargets};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillSite {
    /// Pooled encoder output.
    EncoderFeatures,
    /// Decoder pre-activation scores over the old vocabulary.
    OutputScores,
}

/// Cross-entropy of per-step distributions against token ids, summed over
/// steps (pad targets skipped) and averaged over the batch.
pub fn loss_ce<T: Scalar>(predicted: &[Vec<Vec<T>>], truth: &[Vec<usize>]) -> Result<T> {
    if predicted.len() != truth.len() {
        return Err(CfdError::LengthMismatch(format!(
            "{} predictions, {} targets",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(CfdError::EmptyTask);
    }
    let tol = T::from_f64_lossy(1e-5);
    let mut total = T::zero();
    for (steps, ids) in predicted.iter().zip(truth) {
        if steps.len() != ids.len() {
            return Err(CfdError::LengthMismatch(format!("{} steps vs {} tokens", steps.len(), ids.len())));
        }
        for (t, (p, &y)) in steps.iter().zip(ids).enumerate() {
            let sum: T = p.iter().copied().sum();
            if (sum - T::one()).abs() > tol || p.iter().any(|v| *v < T::zero()) {
                return Err(CfdError::NonDistribution {
                    step: t,
                    sum: sum.to_f64_lossless(),
                });
            }
            if y == PAD_ID {
                continue;
            }
            if y >= p.len() {
                return Err(CfdError::ShapeMismatch(format!("token {y} outside {} classes", p.len())));
            }
            total = total - p[y].ln();
        }
    }
    Ok(total / T::of_usize(predicted.len()))
}

/// `beta` times the cross-entropy against pseudo captions.
pub fn loss_pseudo<T: Scalar>(predicted: &[Vec<Vec<T>>], pseudo: &[Vec<usize>], beta: T) -> Result<T> {
    Ok(beta * loss_ce(predicted, pseudo)?)
}

/// `lambda` times the mean squared difference. For output scores, student
/// rows may be longer than teacher rows (appended vocabulary) and only the
/// shared prefix is compared.
pub fn loss_distill<T: Scalar>(teacher: &[Vec<T>], student: &[Vec<T>], lambda: T, site: DistillSite) -> Result<T> {
    if teacher.len() != student.len() {
        return Err(CfdError::ShapeMismatch(format!(
            "teacher has {} rows, student {}",
            teacher.len(),
            student.len()
        )));
    }
    let mut acc = T::zero();
    let mut n = 0usize;
    for (t, s) in teacher.iter().zip(student) {
        let ok = match site {
            DistillSite::EncoderFeatures => t.len() == s.len(),
            DistillSite::OutputScores => t.len() <= s.len(),
        };
        if !ok {
            return Err(CfdError::ShapeMismatch(format!("row widths {} vs {}", t.len(), s.len())));
        }
        for (&a, &b) in t.iter().zip(s) {
            acc = acc + (b - a) * (b - a);
        }
        n += t.len();
    }
    if n == 0 {
        return Ok(T::zero());
    }
    Ok(lambda * acc / T::of_usize(n))
}

/// Mean loss over a batch without gradients.
pub fn batch_loss<T: Scalar>(m: &ModelSnapshot<T>, batch: &[SampleTargets<'_, T>], w: &LossWeights<T>) -> LossBreakdown<T> {
    let items: Vec<LossBreakdown<T>> = batch.par_iter().map(|s| sample_loss(m, s, w, None, m.block_count() + 1)).collect();
    LossBreakdown::mean(&items)
}

/// Mean loss and its gradient over a batch. Per-sample gradients are
/// computed in parallel and summed in batch order.
pub fn batch_gradient<T: Scalar>(
    m: &ModelSnapshot<T>,
    batch: &[SampleTargets<'_, T>],
    w: &LossWeights<T>,
    plan: Option<&FreezePlan>,
) -> (LossBreakdown<T>, Params<T>) {
    let floor = plan.map_or(1, |p| p.gradient_floor(m.block_count()));
    let parts: Vec<(LossBreakdown<T>, Params<T>)> = batch
        .par_iter()
        .map(|s| {
            let mut g = m.params.zeros_like();
            let l = sample_loss(m, s, w, Some(&mut g), floor);
            (l, g)
        })
        .collect();
    let mut total = m.params.zeros_like();
    let mut losses = Vec::with_capacity(parts.len());
    for (l, g) in parts {
        total.add_assign(&g);
        losses.push(l);
    }
    total.scale(T::one() / T::of_usize(batch.len().max(1)));
    (LossBreakdown::mean(&losses), total)
}
