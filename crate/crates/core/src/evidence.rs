//! Per-(block, channel) evidence maps for one snapshot on one image.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, ArrayEntry};
use crate::data::Image;
use crate::error::{CfdError, Result};
use crate::masks::EvidenceMap;
use crate::model::ModelSnapshot;
use crate::scalar::Scalar;

/// Replacement content for an occluded window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OcclusionFill {
    /// Per-channel mean colour of the image.
    MeanOfImage,
    /// Zero in the normalized input space (mid grey).
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OcclusionConfig {
    pub window: usize,
    pub stride: usize,
    pub fill: OcclusionFill,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self {
            window: 8,
            stride: 8,
            fill: OcclusionFill::MeanOfImage,
        }
    }
}

impl OcclusionConfig {
    pub fn validate(&self, side: usize) -> Result<()> {
        if self.window == 0 || self.stride == 0 {
            return Err(CfdError::InvalidOcclusion("window and stride must be >= 1".into()));
        }
        if self.window > side {
            return Err(CfdError::InvalidOcclusion(format!(
                "window {} exceeds image side {side}",
                self.window
            )));
        }
        Ok(())
    }

    /// Top-left offsets along one axis; the last window is flush with the edge.
    pub fn offsets(&self, side: usize) -> Vec<usize> {
        let mut out: Vec<usize> = (0..=side - self.window).step_by(self.stride).collect();
        if out.last() != Some(&(side - self.window)) {
            out.push(side - self.window);
        }
        out
    }
}

/// Where evidence maps come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EvidenceSource {
    Activations,
    Occlusion(OcclusionConfig),
}

impl Default for EvidenceSource {
    fn default() -> Self {
        EvidenceSource::Activations
    }
}

/// Every block's evidence maps for one (snapshot, image) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack<T> {
    pub source: String,
    pub image_id: String,
    blocks: Vec<Vec<EvidenceMap<T>>>,
}

impl<T: Scalar> FeatureStack<T> {
    pub fn new(source: impl Into<String>, image_id: impl Into<String>, blocks: Vec<Vec<EvidenceMap<T>>>) -> Result<Self> {
        for (i, maps) in blocks.iter().enumerate() {
            if maps.is_empty() {
                return Err(CfdError::EmptyBlock(i + 1));
            }
            if maps.iter().enumerate().any(|(m, e)| e.block != i + 1 || e.channel != m) {
                return Err(CfdError::InvalidShape(format!("block {} maps out of order", i + 1)));
            }
        }
        Ok(Self {
            source: source.into(),
            image_id: image_id.into(),
            blocks,
        })
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Maps of block `l` (1-based).
    pub fn block(&self, l: usize) -> &[EvidenceMap<T>] {
        &self.blocks[l - 1]
    }

    pub fn blocks(&self) -> &[Vec<EvidenceMap<T>>] {
        &self.blocks
    }

    /// Checks block and channel counts against a snapshot.
    pub fn check_against(&self, m: &ModelSnapshot<T>) -> Result<()> {
        let want = &m.descriptor.block_channels;
        let have: Vec<usize> = self.blocks.iter().map(Vec::len).collect();
        if &have != want {
            return Err(CfdError::ArchitectureMismatch(format!(
                "stack channels {have:?}, descriptor {want:?}"
            )));
        }
        Ok(())
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::default();
        for maps in &self.blocks {
            for e in maps {
                a.push(ArrayEntry::from_evidence(format!("b{}c{}", e.block, e.channel), e));
            }
        }
        a
    }

    pub fn from_archive(source: &str, image_id: &str, a: &Archive) -> Result<Self> {
        let mut blocks: Vec<Vec<EvidenceMap<T>>> = Vec::new();
        for entry in &a.entries {
            let e: EvidenceMap<T> = entry.to_evidence()?;
            if e.block > blocks.len() {
                blocks.resize_with(e.block, Vec::new);
            }
            blocks[e.block - 1].push(e);
        }
        Self::new(source, image_id, blocks)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_archive().write(path)
    }

    pub fn read(path: &Path, source: &str, image_id: &str) -> Result<Self> {
        Self::from_archive(source, image_id, &Archive::read(path)?)
    }
}

fn source_id<T: Scalar>(m: &ModelSnapshot<T>, tag: &str) -> String {
    format!("{}:{tag}", &m.content_hash()[..16])
}

fn check_image<T: Scalar>(m: &ModelSnapshot<T>, image: &Image) -> Result<()> {
    let s = m.descriptor.input_size;
    if image.height != s || image.width != s {
        return Err(CfdError::ArchitectureMismatch(format!(
            "image is {}x{}, model expects {s}x{s}",
            image.height, image.width
        )));
    }
    Ok(())
}

/// Rectified block activations, one map per channel.
pub fn raw_activations<T: Scalar>(m: &ModelSnapshot<T>, image_id: &str, image: &Image) -> Result<FeatureStack<T>> {
    check_image(m, image)?;
    let enc = m.encode(image)?;
    let mut blocks = Vec::with_capacity(enc.blocks.len());
    for (i, b) in enc.blocks.iter().enumerate() {
        let maps = (0..b.channels)
            .map(|c| EvidenceMap::new(i + 1, c, b.height, b.width, b.channel(c).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        blocks.push(maps);
    }
    FeatureStack::new(source_id(m, "activations"), image_id, blocks)
}

/// Per-pixel occlusion attribution at input resolution, normalized by its
/// maximum magnitude. Positive values support `target_class`.
pub fn occlusion_attribution<T: Scalar>(
    m: &ModelSnapshot<T>,
    image: &Image,
    target_class: usize,
    cfg: &OcclusionConfig,
) -> Result<Vec<T>> {
    check_image(m, image)?;
    if target_class >= m.descriptor.class_count {
        return Err(CfdError::MissingClassifierHead);
    }
    let side = m.descriptor.input_size;
    cfg.validate(side)?;
    let input: Vec<T> = image.to_chw();
    let n = side * side;
    let fill: [T; 3] = match cfg.fill {
        OcclusionFill::Zero => [T::zero(); 3],
        OcclusionFill::MeanOfImage => {
            let mut acc = [T::zero(); 3];
            for (c, a) in acc.iter_mut().enumerate() {
                *a = input[c * n..(c + 1) * n].iter().copied().sum::<T>() / T::of_usize(n);
            }
            acc
        }
    };
    let base = m.class_scores(&m.encode_input(&input).pooled)[target_class];

    let offs = cfg.offsets(side);
    let positions: Vec<(usize, usize)> = offs.iter().flat_map(|&r| offs.iter().map(move |&c| (r, c))).collect();
    let drops: Vec<T> = positions
        .par_iter()
        .map(|&(r0, c0)| {
            let mut x = input.clone();
            for (c, &f) in fill.iter().enumerate() {
                for r in r0..r0 + cfg.window {
                    let row = c * n + r * side;
                    x[row + c0..row + c0 + cfg.window].iter_mut().for_each(|v| *v = f);
                }
            }
            base - m.class_scores(&m.encode_input(&x).pooled)[target_class]
        })
        .collect();

    let area = T::of_usize(cfg.window * cfg.window);
    let mut field = vec![T::zero(); n];
    for (&(r0, c0), &d) in positions.iter().zip(&drops) {
        let share = d / area;
        for r in r0..r0 + cfg.window {
            field[r * side + c0..r * side + c0 + cfg.window]
                .iter_mut()
                .for_each(|v| *v = *v + share);
        }
    }
    let peak = field.iter().fold(T::zero(), |a, v| a.max(v.abs()));
    if peak > T::zero() {
        field.iter_mut().for_each(|v| *v = *v / peak);
    }
    Ok(field)
}

/// Mean of `field` (side x side) over the input pixels that map to each
/// cell of an `h x h` grid under nearest-neighbour indexing.
fn pool_to<T: Scalar>(field: &[T], side: usize, h: usize) -> Vec<T> {
    let mut sums = vec![T::zero(); h * h];
    let mut counts = vec![0usize; h * h];
    for r in 0..side {
        let i = r * h / side;
        for c in 0..side {
            let j = c * h / side;
            sums[i * h + j] = sums[i * h + j] + field[r * side + c];
            counts[i * h + j] += 1;
        }
    }
    sums.iter().zip(&counts).map(|(&s, &k)| s / T::of_usize(k.max(1))).collect()
}

/// Occlusion-based class evidence: each channel's activation weighted by the
/// attribution field pooled to the block's resolution.
pub fn prediction_difference<T: Scalar>(
    m: &ModelSnapshot<T>,
    image_id: &str,
    image: &Image,
    target_class: usize,
    cfg: &OcclusionConfig,
) -> Result<FeatureStack<T>> {
    let field = occlusion_attribution(m, image, target_class, cfg)?;
    let side = m.descriptor.input_size;
    let enc = m.encode(image)?;
    let mut blocks = Vec::with_capacity(enc.blocks.len());
    for (i, b) in enc.blocks.iter().enumerate() {
        let weight = pool_to(&field, side, b.height);
        let maps = (0..b.channels)
            .map(|c| {
                let vals = b.channel(c).iter().zip(&weight).map(|(&a, &w)| a * w).collect();
                EvidenceMap::new(i + 1, c, b.height, b.width, vals)
            })
            .collect::<Result<Vec<_>>>()?;
        blocks.push(maps);
    }
    let tag = format!("occlusion-w{}-s{}-c{target_class}", cfg.window, cfg.stride);
    FeatureStack::new(source_id(m, &tag), image_id, blocks)
}

/// Evidence stack for `image` under `source`; `class` conditions occlusion.
pub fn evidence_for<T: Scalar>(
    m: &ModelSnapshot<T>,
    image_id: &str,
    image: &Image,
    class: usize,
    source: &EvidenceSource,
) -> Result<FeatureStack<T>> {
    match source {
        EvidenceSource::Activations => raw_activations(m, image_id, image),
        EvidenceSource::Occlusion(cfg) => prediction_difference(m, image_id, image, class, cfg),
    }
}
