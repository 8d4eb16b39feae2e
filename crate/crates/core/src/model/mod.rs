//! Two-head captioner: a `K`-block convolutional encoder feeding both a
//! classifier head and an LSTM caption decoder.

mod forward;
mod io;
pub mod params;
pub mod vocab;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use forward::{BlockActivation, EncoderOutput, LossBreakdown, LossWeights, SampleTargets, TeacherSignal};
pub(crate) use forward::sample_loss;
pub use params::{ParamGroup, Params, Tensor};
pub use vocab::Vocabulary;

use crate::data::Image;
use crate::error::{CfdError, Result};
use crate::nn;
use crate::scalar::Scalar;
use params::{block_group, group_names, CLASSIFIER_HEAD, DECODER_CORE, DECODER_OUTPUT, EMBED};
use vocab::{END_ID, PAD_ID, START_ID};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchitectureDescriptor {
    /// Output channels of each conv block; `K = block_channels.len()`.
    pub block_channels: Vec<usize>,
    /// Square input side in pixels.
    pub input_size: usize,
    pub embed_size: usize,
    pub hidden_size: usize,
    pub class_count: usize,
    pub vocab_size: usize,
}

impl ArchitectureDescriptor {
    /// Desk-scale reference encoder: five blocks at 64x64 with the decoder
    /// sizes of the original captioner (embed 256, hidden 512).
    pub fn desk_default(class_count: usize, vocab_size: usize) -> Self {
        Self {
            block_channels: vec![16, 32, 64, 128, 256],
            input_size: 64,
            embed_size: 256,
            hidden_size: 512,
            class_count,
            vocab_size,
        }
    }

    /// Narrow five-block model used by tests and the default experiment
    /// config; trains in seconds on a laptop.
    pub fn toy(class_count: usize, vocab_size: usize) -> Self {
        Self {
            block_channels: vec![8, 16, 16, 32, 32],
            input_size: 64,
            embed_size: 32,
            hidden_size: 64,
            class_count,
            vocab_size,
        }
    }

    pub fn block_count(&self) -> usize {
        self.block_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CfdError::InvalidDescriptor(msg));
        if self.block_count() < 2 {
            return bad(format!("need K >= 2 blocks, got {}", self.block_count()));
        }
        if self.block_channels.iter().any(|&c| c == 0) {
            return bad("block with zero channels".into());
        }
        if self.input_size == 0 || self.embed_size == 0 || self.hidden_size == 0 {
            return bad("input, embed and hidden sizes must be >= 1".into());
        }
        if self.vocab_size < vocab::SPECIAL_TOKENS.len() {
            return bad(format!("vocabulary of {} cannot hold special tokens", self.vocab_size));
        }
        Ok(())
    }

    /// Spatial side of block `l` (1-based) output.
    pub fn block_side(&self, l: usize) -> usize {
        (0..l).fold(self.input_size, |s, _| nn::conv_out_dim(s))
    }

    fn feature_size(&self) -> usize {
        *self.block_channels.last().expect("validated")
    }
}

/// Greedy caption: token ids ending at the end token, and the decoded text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub tokens: Vec<usize>,
    pub text: String,
}

/// Immutable parameters, architecture and vocabulary at one point of a task sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot<T> {
    pub descriptor: ArchitectureDescriptor,
    pub params: Params<T>,
    pub vocab: Vocabulary,
    pub classes: Vec<String>,
    pub task_index: usize,
    pub seed: u64,
}

fn mix_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("digest has 8 bytes"))
}

fn normal_vec<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<T> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(z * std)
        })
        .collect()
}

fn uniform_vec<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<T> {
    (0..n)
        .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
        .collect()
}

fn tensor<T>(name: &str, shape: Vec<usize>, data: Vec<T>) -> Tensor<T> {
    Tensor {
        name: name.to_string(),
        shape,
        data,
    }
}

/// Fresh parameters for one named group.
fn init_group<T: Scalar>(d: &ArchitectureDescriptor, name: &str, seed: u64) -> ParamGroup<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, name));
    let (e, h, v, c, f) = (
        d.embed_size,
        d.hidden_size,
        d.vocab_size,
        d.class_count,
        d.feature_size(),
    );
    let tensors = if let Some(l) = params::parse_block_group(name) {
        let in_c = if l == 1 { 3 } else { d.block_channels[l - 2] };
        let out_c = d.block_channels[l - 1];
        let fan_in = (in_c * 9) as f64;
        vec![
            tensor("weight", vec![out_c, in_c, 3, 3], normal_vec(&mut rng, out_c * in_c * 9, (2.0 / fan_in).sqrt())),
            tensor("bias", vec![out_c], vec![T::zero(); out_c]),
        ]
    } else {
        match name {
            EMBED => {
                let b = 1.0 / (f as f64).sqrt();
                vec![
                    tensor("feature_weight", vec![e, f], uniform_vec(&mut rng, e * f, b)),
                    tensor("feature_bias", vec![e], uniform_vec(&mut rng, e, b)),
                    tensor("word", vec![v, e], normal_vec(&mut rng, v * e, 0.1)),
                ]
            }
            CLASSIFIER_HEAD => {
                let b = 1.0 / (f as f64).sqrt();
                vec![
                    tensor("weight", vec![c, f], uniform_vec(&mut rng, c * f, b)),
                    tensor("bias", vec![c], uniform_vec(&mut rng, c, b)),
                ]
            }
            DECODER_CORE => {
                let b = 1.0 / (h as f64).sqrt();
                let mut bias: Vec<T> = uniform_vec(&mut rng, 4 * h, b);
                // forget-gate bias starts at +1
                bias[h..2 * h].iter_mut().for_each(|x| *x = *x + T::one());
                vec![
                    tensor("w_ih", vec![4 * h, e], uniform_vec(&mut rng, 4 * h * e, b)),
                    tensor("w_hh", vec![4 * h, h], uniform_vec(&mut rng, 4 * h * h, b)),
                    tensor("bias", vec![4 * h], bias),
                ]
            }
            DECODER_OUTPUT => {
                let b = 1.0 / (h as f64).sqrt();
                vec![
                    tensor("weight", vec![v, h], uniform_vec(&mut rng, v * h, b)),
                    tensor("bias", vec![v], uniform_vec(&mut rng, v, b)),
                ]
            }
            other => unreachable!("unknown parameter group {other}"),
        }
    };
    ParamGroup {
        name: name.to_string(),
        tensors,
    }
}

/// Appends `extra` freshly initialized rows to a tensor.
fn append_rows<T: Scalar>(t: &mut Tensor<T>, extra: usize, rng: &mut ChaCha8Rng, std: f64, uniform: bool) {
    let n = extra * t.row_len();
    let fresh: Vec<T> = if uniform {
        uniform_vec(rng, n, std)
    } else {
        normal_vec(rng, n, std)
    };
    t.data.extend(fresh);
    t.shape[0] += extra;
}

impl<T: Scalar> ModelSnapshot<T> {
    /// Builds a model with placeholder vocabulary and class names sized by the descriptor.
    pub fn build_two_head(descriptor: ArchitectureDescriptor, seed: u64) -> Result<Self> {
        descriptor.validate()?;
        let extra = descriptor.vocab_size - vocab::SPECIAL_TOKENS.len();
        let vocab = Vocabulary::with_tokens((0..extra).map(|i| format!("tok{i}")))?;
        let classes = (0..descriptor.class_count).map(|i| format!("class{i}")).collect();
        Self::build_with(descriptor, vocab, classes, seed)
    }

    /// Builds a model whose vocabulary and class list are given; the
    /// descriptor's vocab and class sizes are overwritten to match.
    pub fn build_with(
        mut descriptor: ArchitectureDescriptor,
        vocab: Vocabulary,
        classes: Vec<String>,
        seed: u64,
    ) -> Result<Self> {
        if !vocab.has_specials() {
            return Err(CfdError::InvalidDescriptor("vocabulary lacks special tokens".into()));
        }
        descriptor.vocab_size = vocab.len();
        descriptor.class_count = classes.len();
        descriptor.validate()?;
        let groups = group_names(descriptor.block_count())
            .iter()
            .map(|n| init_group(&descriptor, n, seed))
            .collect();
        Ok(Self {
            descriptor,
            params: Params { groups },
            vocab,
            classes,
            task_index: 0,
            seed,
        })
    }

    pub fn block_count(&self) -> usize {
        self.descriptor.block_count()
    }

    /// Checks the structural invariants tying parameters to descriptor and vocabulary.
    pub fn validate(&self) -> Result<()> {
        self.descriptor.validate()?;
        let corrupt = |m: String| Err(CfdError::CorruptSnapshot(m));
        let expected = group_names(self.block_count());
        if self.params.names() != expected.iter().map(String::as_str).collect::<Vec<_>>() {
            return corrupt(format!("parameter groups {:?}, expected {expected:?}", self.params.names()));
        }
        for name in &expected {
            let fresh = init_group::<T>(&self.descriptor, name, 0);
            let have = self.params.group(name).expect("checked above");
            let shapes: Vec<_> = have.tensors.iter().map(|t| (&t.name, &t.shape)).collect();
            let want: Vec<_> = fresh.tensors.iter().map(|t| (&t.name, &t.shape)).collect();
            if shapes != want {
                return corrupt(format!("group {name} has tensors {shapes:?}, expected {want:?}"));
            }
        }
        if self.vocab.len() != self.descriptor.vocab_size || !self.vocab.has_specials() {
            return corrupt("vocabulary does not match descriptor".into());
        }
        if self.classes.len() != self.descriptor.class_count {
            return corrupt("class list does not match descriptor".into());
        }
        Ok(())
    }

    fn tensor(&self, group: &str, idx: usize) -> &[T] {
        &self.params.group(group).expect("validated snapshot").tensors[idx].data
    }

    pub fn block_weights(&self, l: usize) -> (&[T], &[T]) {
        let g = self.params.group(&block_group(l)).expect("block exists");
        (&g.tensors[0].data, &g.tensors[1].data)
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let s = self.descriptor.input_size;
        if image.height != s || image.width != s {
            return Err(CfdError::ArchitectureMismatch(format!(
                "image is {}x{}, model expects {s}x{s}",
                image.height, image.width
            )));
        }
        Ok(())
    }

    /// Runs the encoder and keeps every block's rectified activations.
    pub fn encode(&self, image: &Image) -> Result<EncoderOutput<T>> {
        self.check_image(image)?;
        Ok(self.encode_input(&image.to_chw()))
    }

    pub(crate) fn encode_input(&self, input: &[T]) -> EncoderOutput<T> {
        forward::encoder_forward(self, input).0
    }

    /// Classifier logits from pooled encoder features.
    pub fn class_scores(&self, pooled: &[T]) -> Vec<T> {
        nn::linear(
            self.tensor(CLASSIFIER_HEAD, 0),
            self.tensor(CLASSIFIER_HEAD, 1),
            pooled,
            self.descriptor.class_count,
        )
    }

    /// One score per known class.
    pub fn classify(&self, image: &Image) -> Result<Vec<T>> {
        let enc = self.encode(image)?;
        Ok(self.class_scores(&enc.pooled))
    }

    pub fn predict_class(&self, image: &Image) -> Result<usize> {
        Ok(nn::argmax(&self.classify(image)?))
    }

    /// Teacher-forced decoder logits for target sequence `targets`.
    pub fn decoder_logits(&self, pooled: &[T], targets: &[usize]) -> Vec<Vec<T>> {
        forward::decoder_forward(self, pooled, targets).1
    }

    /// Greedy decoding; at most `max_len` tokens including the end token.
    pub fn generate_caption(&self, image: &Image, max_len: usize) -> Result<Caption> {
        let enc = self.encode(image)?;
        Ok(self.caption_from_pooled(&enc.pooled, max_len))
    }

    pub(crate) fn caption_from_pooled(&self, pooled: &[T], max_len: usize) -> Caption {
        let max_len = max_len.max(2);
        let (w_out, b_out) = (self.tensor(DECODER_OUTPUT, 0), self.tensor(DECODER_OUTPUT, 1));
        let lstm = forward::lstm_weights(self);
        let hsz = self.descriptor.hidden_size;
        let mut x = forward::feature_embedding(self, pooled);
        let (mut h, mut c) = (vec![T::zero(); hsz], vec![T::zero(); hsz]);
        let mut tokens = Vec::new();
        while tokens.len() + 1 < max_len {
            let step = lstm.step(x, h, c);
            let mut logits = nn::linear(w_out, b_out, &step.h, self.descriptor.vocab_size);
            logits[PAD_ID] = T::neg_infinity();
            logits[START_ID] = T::neg_infinity();
            let next = nn::argmax(&logits);
            if next == END_ID {
                break;
            }
            tokens.push(next);
            x = forward::word_embedding(self, next);
            h = step.h;
            c = step.c;
        }
        let text = self.vocab.decode(&tokens);
        tokens.push(END_ID);
        Caption { tokens, text }
    }

    /// Appends `new_tokens` to the vocabulary and grows the word embedding
    /// and decoder output rows. Existing rows are untouched.
    pub fn expand_vocabulary(&self, new_tokens: &[String]) -> Result<Self> {
        let mut vocab = self.vocab.clone();
        for t in new_tokens {
            vocab.push(t.clone())?;
        }
        if new_tokens.is_empty() {
            return Ok(self.clone());
        }
        let mut next = self.clone();
        let extra = new_tokens.len();
        let tag = format!("expand-vocab:{}", self.vocab.len());
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, &tag));
        let hb = 1.0 / (self.descriptor.hidden_size as f64).sqrt();
        {
            let embed = next.params.group_mut(EMBED).expect("group");
            append_rows(&mut embed.tensors[2], extra, &mut rng, 0.1, false);
        }
        {
            let out = next.params.group_mut(DECODER_OUTPUT).expect("group");
            append_rows(&mut out.tensors[0], extra, &mut rng, hb, true);
            append_rows(&mut out.tensors[1], extra, &mut rng, hb, true);
        }
        next.vocab = vocab;
        next.descriptor.vocab_size = next.vocab.len();
        Ok(next)
    }

    /// Appends classifier rows for `new_classes`; old rows are preserved.
    pub fn expand_classes(&self, new_classes: &[String]) -> Result<Self> {
        if let Some(dup) = new_classes.iter().find(|c| self.classes.contains(c)) {
            return Err(CfdError::OverlappingClasses(dup.clone()));
        }
        if new_classes.is_empty() {
            return Ok(self.clone());
        }
        let mut next = self.clone();
        let tag = format!("expand-classes:{}", self.classes.len());
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, &tag));
        let b = 1.0 / (self.descriptor.feature_size() as f64).sqrt();
        let head = next.params.group_mut(CLASSIFIER_HEAD).expect("group");
        append_rows(&mut head.tensors[0], new_classes.len(), &mut rng, b, true);
        append_rows(&mut head.tensors[1], new_classes.len(), &mut rng, b, true);
        next.classes.extend(new_classes.iter().cloned());
        next.descriptor.class_count = next.classes.len();
        Ok(next)
    }

    /// Copy with block `l`'s parameters drawn afresh from `seed`.
    pub fn reinit_block(&self, l: usize, seed: u64) -> Result<Self> {
        if l == 0 || l > self.block_count() {
            return Err(CfdError::InvalidBlock(l));
        }
        let name = block_group(l);
        let mut next = self.clone();
        *next.params.group_mut(&name).expect("block exists") = init_group(&self.descriptor, &name, seed);
        Ok(next)
    }

    /// Content hash over descriptor, vocabulary, classes and parameter bits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.descriptor).expect("serializable"));
        h.update(serde_json::to_vec(&self.vocab).expect("serializable"));
        h.update(serde_json::to_vec(&self.classes).expect("serializable"));
        for t in self.params.tensors() {
            h.update(t.name.as_bytes());
            for v in &t.data {
                h.update(v.to_f64_lossless().to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ArchitectureDescriptor {
        ArchitectureDescriptor {
            block_channels: vec![4, 6, 8],
            input_size: 16,
            embed_size: 8,
            hidden_size: 10,
            class_count: 3,
            vocab_size: 9,
        }
    }

    fn probe_image(side: usize) -> Image {
        let mut img = Image::filled(side, side, [40, 80, 120]);
        for r in 3..9 {
            for c in 4..10 {
                img.put(r, c, [250, 10, 10]);
            }
        }
        img
    }

    #[test]
    fn build_is_deterministic_and_seed_dependent() {
        let a = ModelSnapshot::<f32>::build_two_head(tiny(), 7).unwrap();
        let b = ModelSnapshot::<f32>::build_two_head(tiny(), 7).unwrap();
        let c = ModelSnapshot::<f32>::build_two_head(tiny(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
        a.validate().unwrap();
    }

    #[test]
    fn five_block_descriptor_has_five_block_groups() {
        let m = ModelSnapshot::<f32>::build_two_head(ArchitectureDescriptor::toy(4, 12), 1).unwrap();
        let blocks = m.params.names().iter().filter(|n| n.starts_with("block_")).count();
        assert_eq!(blocks, 5);
        let head = m.params.group(CLASSIFIER_HEAD).unwrap();
        assert_eq!(head.tensors[0].shape, vec![4, 32]);
        assert_eq!(m.descriptor.block_side(5), 2);
    }

    #[test]
    fn invalid_descriptors() {
        let mut d = tiny();
        d.block_channels = vec![4];
        assert!(matches!(
            ModelSnapshot::<f32>::build_two_head(d, 0),
            Err(CfdError::InvalidDescriptor(_))
        ));
        let mut d = tiny();
        d.vocab_size = 2;
        assert!(ModelSnapshot::<f32>::build_two_head(d, 0).is_err());
    }

    #[test]
    fn classify_shape_and_determinism() {
        let m = ModelSnapshot::<f32>::build_two_head(tiny(), 3).unwrap();
        let img = probe_image(16);
        let s1 = m.classify(&img).unwrap();
        assert_eq!(s1.len(), 3);
        assert_eq!(s1, m.classify(&img).unwrap());
        assert!(matches!(
            m.classify(&probe_image(12)),
            Err(CfdError::ArchitectureMismatch(_))
        ));
    }

    #[test]
    fn zero_image_through_bias_free_encoder_is_zero() {
        let mut m = ModelSnapshot::<f64>::build_two_head(tiny(), 3).unwrap();
        for l in 1..=3 {
            let g = m.params.group_mut(&block_group(l)).unwrap();
            g.tensors[1].data.iter_mut().for_each(|b| *b = 0.0);
        }
        // pixel value 127.5 maps to 0; use a CHW zero tensor directly
        let enc = m.encode_input(&vec![0.0; 3 * 16 * 16]);
        assert!(enc.blocks.iter().all(|b| b.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn captions_terminate_and_are_deterministic() {
        let m = ModelSnapshot::<f32>::build_two_head(tiny(), 5).unwrap();
        let img = probe_image(16);
        for max_len in [2, 3, 7] {
            let c = m.generate_caption(&img, max_len).unwrap();
            assert!(c.tokens.len() <= max_len);
            assert_eq!(*c.tokens.last().unwrap(), END_ID);
            assert!(!c.tokens.contains(&PAD_ID));
            assert_eq!(c, m.generate_caption(&img, max_len).unwrap());
        }
    }

    #[test]
    fn vocabulary_expansion_preserves_old_scores() {
        let m = ModelSnapshot::<f64>::build_two_head(tiny(), 9).unwrap();
        let same = m.expand_vocabulary(&[]).unwrap();
        assert_eq!(same, m);
        let grown = m.expand_vocabulary(&["star".into(), "hexagon".into()]).unwrap();
        assert_eq!(grown.vocab.len(), m.vocab.len() + 2);
        grown.validate().unwrap();
        let enc = m.encode(&probe_image(16)).unwrap();
        let targets = [4, 5, END_ID];
        let before = m.decoder_logits(&enc.pooled, &targets);
        let after = grown.decoder_logits(&enc.pooled, &targets);
        for (b, a) in before.iter().zip(&after) {
            assert_eq!(&a[..b.len()], &b[..]);
            assert_eq!(a.len(), b.len() + 2);
        }
        assert!(matches!(
            grown.expand_vocabulary(&["star".into()]),
            Err(CfdError::DuplicateToken(_))
        ));
    }

    #[test]
    fn class_expansion_keeps_old_rows() {
        let m = ModelSnapshot::<f32>::build_two_head(tiny(), 9).unwrap();
        let grown = m.expand_classes(&["star".into()]).unwrap();
        let img = probe_image(16);
        let (a, b) = (m.classify(&img).unwrap(), grown.classify(&img).unwrap());
        assert_eq!(&b[..3], &a[..]);
        assert_eq!(b.len(), 4);
        grown.validate().unwrap();
    }

    #[test]
    fn reinit_block_changes_only_that_block() {
        let m = ModelSnapshot::<f32>::build_two_head(tiny(), 9).unwrap();
        let r = m.reinit_block(2, 1234).unwrap();
        for name in group_names(3) {
            let same = m.params.group(&name) == r.params.group(&name);
            assert_eq!(same, name != "block_2", "{name}");
        }
        assert!(m.reinit_block(4, 0).is_err());
    }
}
