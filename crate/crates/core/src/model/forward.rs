//! Forward passes with caches and the per-sample loss/gradient routine.

use serde::{Deserialize, Serialize};

use super::params::{block_group, CLASSIFIER_HEAD, DECODER_CORE, DECODER_OUTPUT, EMBED};
use super::vocab::{PAD_ID, UNK_ID};
use super::{ModelSnapshot, Params};
use crate::nn::{self, ConvCache, LstmStep, LstmWeights};
use crate::scalar::Scalar;

/// Rectified output of one conv block, `(channels, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockActivation<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> BlockActivation<T> {
    pub fn channel(&self, m: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[m * n..(m + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<T> {
    pub blocks: Vec<BlockActivation<T>>,
    /// Global average pool of the last block.
    pub pooled: Vec<T>,
}

pub(crate) fn encoder_forward<T: Scalar>(
    m: &ModelSnapshot<T>,
    input: &[T],
) -> (EncoderOutput<T>, Vec<ConvCache<T>>) {
    let d = &m.descriptor;
    let mut blocks: Vec<BlockActivation<T>> = Vec::with_capacity(d.block_count());
    let mut caches = Vec::with_capacity(d.block_count());
    let (mut c, mut h, mut w) = (3, d.input_size, d.input_size);
    for l in 1..=d.block_count() {
        let (weight, bias) = m.block_weights(l);
        let out_c = d.block_channels[l - 1];
        let src = blocks.last().map_or(input, |b| b.data.as_slice());
        let (out, cache) = nn::conv_relu_forward(src, c, h, w, weight, bias, out_c);
        let act = BlockActivation {
            channels: out_c,
            height: cache.out_h,
            width: cache.out_w,
            data: out,
        };
        (c, h, w) = (out_c, act.height, act.width);
        blocks.push(act);
        caches.push(cache);
    }
    let last = blocks.last().expect("K >= 2");
    let n = T::of_usize(last.height * last.width);
    let pooled = (0..last.channels)
        .map(|ch| last.channel(ch).iter().copied().sum::<T>() / n)
        .collect();
    (EncoderOutput { blocks, pooled }, caches)
}

pub(crate) fn lstm_weights<T: Scalar>(m: &ModelSnapshot<T>) -> LstmWeights<'_, T> {
    let g = m.params.group(DECODER_CORE).expect("decoder core");
    LstmWeights {
        w_ih: &g.tensors[0].data,
        w_hh: &g.tensors[1].data,
        bias: &g.tensors[2].data,
        hidden: m.descriptor.hidden_size,
    }
}

pub(crate) fn feature_embedding<T: Scalar>(m: &ModelSnapshot<T>, pooled: &[T]) -> Vec<T> {
    let g = m.params.group(EMBED).expect("embed");
    nn::linear(&g.tensors[0].data, &g.tensors[1].data, pooled, m.descriptor.embed_size)
}

pub(crate) fn word_embedding<T: Scalar>(m: &ModelSnapshot<T>, id: usize) -> Vec<T> {
    let e = m.descriptor.embed_size;
    let table = &m.params.group(EMBED).expect("embed").tensors[2].data;
    let id = if id < m.descriptor.vocab_size { id } else { UNK_ID };
    table[id * e..(id + 1) * e].to_vec()
}

/// Teacher-forced decoding: step 0 sees the image embedding, step `t`
/// sees the embedding of `targets[t - 1]`.
pub(crate) fn decoder_forward<T: Scalar>(
    m: &ModelSnapshot<T>,
    pooled: &[T],
    targets: &[usize],
) -> (Vec<LstmStep<T>>, Vec<Vec<T>>) {
    let lstm = lstm_weights(m);
    let out = m.params.group(DECODER_OUTPUT).expect("decoder output");
    let (w_out, b_out) = (&out.tensors[0].data, &out.tensors[1].data);
    let hsz = m.descriptor.hidden_size;
    let mut steps = Vec::with_capacity(targets.len());
    let mut logits = Vec::with_capacity(targets.len());
    let (mut h, mut c) = (vec![T::zero(); hsz], vec![T::zero(); hsz]);
    for t in 0..targets.len() {
        let x = if t == 0 {
            feature_embedding(m, pooled)
        } else {
            word_embedding(m, targets[t - 1])
        };
        let step = lstm.step(x, h, c);
        logits.push(nn::linear(w_out, b_out, &step.h, m.descriptor.vocab_size));
        h = step.h.clone();
        c = step.c.clone();
        steps.push(step);
    }
    (steps, logits)
}

/// Accumulates decoder gradients for `dlogits` and returns the gradient
/// with respect to the pooled encoder features.
fn decoder_backward<T: Scalar>(
    m: &ModelSnapshot<T>,
    pooled: &[T],
    targets: &[usize],
    steps: &[LstmStep<T>],
    dlogits: &[Vec<T>],
    grads: &mut Params<T>,
) -> Vec<T> {
    let hsz = m.descriptor.hidden_size;
    let e = m.descriptor.embed_size;
    let lstm = lstm_weights(m);
    let w_out = &m.params.group(DECODER_OUTPUT).expect("group").tensors[0].data;

    let mut dh_steps: Vec<Vec<T>> = Vec::with_capacity(steps.len());
    {
        let g = grads.group_mut(DECODER_OUTPUT).expect("group");
        let (dw, rest) = g.tensors.split_at_mut(1);
        for (step, dl) in steps.iter().zip(dlogits) {
            dh_steps.push(nn::linear_backward(w_out, &step.h, dl, &mut dw[0].data, &mut rest[0].data));
        }
    }

    let mut dx_steps: Vec<Vec<T>> = vec![Vec::new(); steps.len()];
    {
        let g = grads.group_mut(DECODER_CORE).expect("group");
        let [dw_ih, dw_hh, db] = &mut g.tensors[..] else {
            unreachable!("decoder core has three tensors")
        };
        let mut dh_next = vec![T::zero(); hsz];
        let mut dc_next = vec![T::zero(); hsz];
        for t in (0..steps.len()).rev() {
            let dh: Vec<T> = dh_steps[t].iter().zip(&dh_next).map(|(&a, &b)| a + b).collect();
            let sg = nn::lstm_step_backward(
                &lstm,
                &steps[t],
                &dh,
                &dc_next,
                &mut dw_ih.data,
                &mut dw_hh.data,
                &mut db.data,
            );
            dx_steps[t] = sg.dx;
            dh_next = sg.dh_prev;
            dc_next = sg.dc_prev;
        }
    }

    let embed = m.params.group(EMBED).expect("group");
    let g = grads.group_mut(EMBED).expect("group");
    for t in 1..steps.len() {
        let id = if targets[t - 1] < m.descriptor.vocab_size {
            targets[t - 1]
        } else {
            UNK_ID
        };
        let row = &mut g.tensors[2].data[id * e..(id + 1) * e];
        row.iter_mut().zip(&dx_steps[t]).for_each(|(r, &v)| *r = *r + v);
    }
    let (dfw, rest) = g.tensors.split_at_mut(1);
    nn::linear_backward(
        &embed.tensors[0].data,
        pooled,
        &dx_steps[0],
        &mut dfw[0].data,
        &mut rest[0].data,
    )
}

fn encoder_backward<T: Scalar>(
    m: &ModelSnapshot<T>,
    enc: &EncoderOutput<T>,
    caches: &[ConvCache<T>],
    dpooled: &[T],
    floor: usize,
    grads: &mut Params<T>,
) {
    let k = m.block_count();
    if floor > k {
        return;
    }
    let last = enc.blocks.last().expect("K >= 2");
    let n = last.height * last.width;
    let inv = T::one() / T::of_usize(n);
    let mut dact: Vec<T> = (0..last.channels)
        .flat_map(|c| std::iter::repeat(dpooled[c] * inv).take(n))
        .collect();
    for l in (floor..=k).rev() {
        let (in_c, in_h, in_w) = if l == 1 {
            let s = m.descriptor.input_size;
            (3, s, s)
        } else {
            let b = &enc.blocks[l - 2];
            (b.channels, b.height, b.width)
        };
        let (weight, _) = m.block_weights(l);
        let g = grads.group_mut(&block_group(l)).expect("block");
        let (dw, db) = g.tensors.split_at_mut(1);
        let dinput = nn::conv_relu_backward(
            &caches[l - 1],
            &enc.blocks[l - 1].data,
            &dact,
            in_c,
            in_h,
            in_w,
            weight,
            &mut dw[0].data,
            &mut db[0].data,
            l > floor,
        );
        if let Some(d) = dinput {
            dact = d;
        }
    }
}

/// Teacher outputs a distillation term is matched against.
#[derive(Debug, Clone, PartialEq)]
pub enum TeacherSignal<T> {
    /// Pooled encoder features (intermediate feature space).
    Features(Vec<T>),
    /// Pre-activation decoder scores per step, over the teacher's vocabulary.
    Scores(Vec<Vec<T>>),
}

/// Supervision for one training example.
pub struct SampleTargets<'a, T> {
    /// Channel-major image tensor.
    pub input: &'a [T],
    pub class_id: Option<usize>,
    /// Ground-truth caption ids ending at the end token.
    pub caption: &'a [usize],
    pub pseudo: Option<&'a [usize]>,
    pub teacher: Option<&'a TeacherSignal<T>>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossWeights<T> {
    /// Weight of the auxiliary classification loss.
    pub class_weight: T,
    pub beta: T,
    pub lambda: T,
}

/// Per-term losses; `total` is the sum of the present terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub l_ce: T,
    pub l_p: Option<T>,
    pub l_dis: Option<T>,
    pub l_cls: Option<T>,
    pub total: T,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn new(l_ce: T, l_p: Option<T>, l_dis: Option<T>, l_cls: Option<T>) -> Self {
        let total = [l_p, l_dis, l_cls].into_iter().flatten().fold(l_ce, |a, b| a + b);
        Self {
            l_ce,
            l_p,
            l_dis,
            l_cls,
            total,
        }
    }

    /// Mean of a non-empty list of breakdowns, term by term.
    pub fn mean(items: &[Self]) -> Self {
        let n = T::of_usize(items.len().max(1));
        let avg = |f: &dyn Fn(&Self) -> Option<T>| -> Option<T> {
            let vals: Vec<T> = items.iter().filter_map(f).collect();
            (!vals.is_empty()).then(|| vals.into_iter().sum::<T>() / n)
        };
        Self::new(
            items.iter().map(|b| b.l_ce).sum::<T>() / n,
            avg(&|b| b.l_p),
            avg(&|b| b.l_dis),
            avg(&|b| b.l_cls),
        )
    }
}

/// Sum over steps of `-log p(target)`, skipping pad targets; adds
/// `scale * (softmax - onehot)` into `dlogits` when given.
fn sequence_ce<T: Scalar>(logits: &[Vec<T>], targets: &[usize], scale: T, mut dlogits: Option<&mut [Vec<T>]>) -> T {
    let mut loss = T::zero();
    for (t, (row, &y)) in logits.iter().zip(targets).enumerate() {
        if y == PAD_ID {
            continue;
        }
        let logp = nn::log_softmax(row);
        loss = loss - logp[y];
        if let Some(d) = dlogits.as_deref_mut() {
            for (j, (dv, lp)) in d[t].iter_mut().zip(&logp).enumerate() {
                let onehot = if j == y { T::one() } else { T::zero() };
                *dv = *dv + scale * (lp.exp() - onehot);
            }
        }
    }
    loss
}

/// Loss of one example and, when `grads` is given, its gradient.
///
/// `floor` is the lowest encoder block whose gradient is needed; blocks
/// below it are skipped in the backward pass (`K + 1` skips the encoder).
pub(crate) fn sample_loss<T: Scalar>(
    m: &ModelSnapshot<T>,
    s: &SampleTargets<'_, T>,
    w: &LossWeights<T>,
    grads: Option<&mut Params<T>>,
    floor: usize,
) -> LossBreakdown<T> {
    let (enc, caches) = encoder_forward(m, s.input);
    let pooled = &enc.pooled;
    let v = m.descriptor.vocab_size;
    let want_grad = grads.is_some();

    let (steps, logits) = decoder_forward(m, pooled, s.caption);
    let mut dlogits = vec![vec![T::zero(); v]; logits.len()];
    let l_ce = sequence_ce(&logits, s.caption, T::one(), want_grad.then_some(&mut dlogits[..]));

    let pseudo = s.pseudo.map(|p| {
        let (p_steps, p_logits) = decoder_forward(m, pooled, p);
        let mut dp = vec![vec![T::zero(); v]; p_logits.len()];
        let raw = sequence_ce(&p_logits, p, w.beta, want_grad.then_some(&mut dp[..]));
        (w.beta * raw, p_steps, dp)
    });

    let mut dpooled = vec![T::zero(); pooled.len()];
    let l_dis = s.teacher.map(|teacher| match teacher {
        TeacherSignal::Features(tf) => {
            let n = T::of_usize(tf.len());
            let two = T::one() + T::one();
            let mut acc = T::zero();
            for (j, (&sv, &tv)) in pooled.iter().zip(tf).enumerate() {
                let diff = sv - tv;
                acc = acc + diff * diff;
                dpooled[j] = dpooled[j] + w.lambda * two * diff / n;
            }
            w.lambda * acc / n
        }
        TeacherSignal::Scores(ts) => {
            let old_v = ts.first().map_or(0, Vec::len).min(v);
            let n = T::of_usize((ts.len() * old_v).max(1));
            let two = T::one() + T::one();
            let mut acc = T::zero();
            for (t, trow) in ts.iter().enumerate().take(logits.len()) {
                for j in 0..old_v {
                    let diff = logits[t][j] - trow[j];
                    acc = acc + diff * diff;
                    dlogits[t][j] = dlogits[t][j] + w.lambda * two * diff / n;
                }
            }
            w.lambda * acc / n
        }
    });

    let l_cls = s.class_id.map(|y| {
        let scores = m.class_scores(pooled);
        let logp = nn::log_softmax(&scores);
        (w.class_weight * -logp[y], logp)
    });

    let breakdown = LossBreakdown::new(
        l_ce,
        pseudo.as_ref().map(|p| p.0),
        l_dis,
        l_cls.as_ref().map(|c| c.0),
    );

    if let Some(grads) = grads {
        let mut dp = decoder_backward(m, pooled, s.caption, &steps, &dlogits, grads);
        if let (Some(p), Some((_, p_steps, dpl))) = (s.pseudo, pseudo.as_ref()) {
            let extra = decoder_backward(m, pooled, p, p_steps, dpl, grads);
            dp.iter_mut().zip(&extra).for_each(|(a, &b)| *a = *a + b);
        }
        if let (Some(y), Some((_, logp))) = (s.class_id, l_cls.as_ref()) {
            let dscores: Vec<T> = logp
                .iter()
                .enumerate()
                .map(|(j, lp)| {
                    let onehot = if j == y { T::one() } else { T::zero() };
                    w.class_weight * (lp.exp() - onehot)
                })
                .collect();
            let head = m.params.group(CLASSIFIER_HEAD).expect("group");
            let g = grads.group_mut(CLASSIFIER_HEAD).expect("group");
            let (dw, db) = g.tensors.split_at_mut(1);
            let extra = nn::linear_backward(&head.tensors[0].data, pooled, &dscores, &mut dw[0].data, &mut db[0].data);
            dp.iter_mut().zip(&extra).for_each(|(a, &b)| *a = *a + b);
        }
        dp.iter_mut().zip(&dpooled).for_each(|(a, &b)| *a = *a + b);
        encoder_backward(m, &enc, &caches, &dp, floor, grads);
    }
    breakdown
}
