//! Binary-mask IoU arithmetic and representative-map selection.
//!
//! Everything here is a pure function over immutable values. IoU is computed
//! from exact integer pixel counts followed by a single division, so results
//! are reproducible bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{CfdError, Result};
use crate::scalar::Scalar;

/// Boolean grid at input resolution, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    grid: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, grid: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(CfdError::InvalidShape(format!(
                "mask dims must be positive, got {height}x{width}"
            )));
        }
        if grid.len() != height * width {
            return Err(CfdError::InvalidShape(format!(
                "mask grid has {} cells, expected {}",
                grid.len(),
                height * width
            )));
        }
        Ok(Self {
            height,
            width,
            grid,
        })
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![false; height * width])
    }

    pub fn full(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![true; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let grid = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self::new(height, width, grid)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.grid[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.grid[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.grid
    }

    pub fn popcount(&self) -> usize {
        self.grid.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.grid.iter().any(|&b| b)
    }

    /// Pixelwise OR; used to union multi-instance ground truth.
    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        check_dims(self, other)?;
        let grid = self
            .grid
            .iter()
            .zip(&other.grid)
            .map(|(&a, &b)| a || b)
            .collect();
        BinaryMask::new(self.height, self.width, grid)
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.grid.iter().zip(&other.grid).all(|(&a, &b)| !a || b)
    }
}

/// Signed per-pixel relevance for one (block, channel) at native block resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceMap<T> {
    pub block: usize,
    pub channel: usize,
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Scalar> EvidenceMap<T> {
    pub fn new(block: usize, channel: usize, height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(CfdError::InvalidShape(format!(
                "evidence map {height}x{width} with {} values",
                values.len()
            )));
        }
        if block == 0 {
            return Err(CfdError::InvalidShape("block index is 1-based".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CfdError::InvalidShape(format!(
                "non-finite evidence in block {block} channel {channel}"
            )));
        }
        Ok(Self {
            block,
            channel,
            height,
            width,
            values,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Applies `f` to every value, keeping block/channel/dims.
    pub fn map_values(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::new(
            self.block,
            self.channel,
            self.height,
            self.width,
            self.values.iter().map(|&v| f(v)).collect(),
        )
    }
}

/// How real-valued evidence becomes a set of pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum ThresholdPolicy {
    /// Keep the top `q` fraction of strictly positive values (ties at the cut included).
    PositiveQuantile(f64),
    /// Keep values strictly greater than `tau` (and strictly positive).
    Absolute(f64),
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::PositiveQuantile(0.2)
    }
}

impl ThresholdPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ThresholdPolicy::PositiveQuantile(q) if !(q > 0.0 && q < 1.0) => {
                Err(CfdError::InvalidPolicy(format!("quantile {q} not in (0,1)")))
            }
            ThresholdPolicy::Absolute(tau) if !(tau >= 0.0) => {
                Err(CfdError::InvalidPolicy(format!("absolute threshold {tau} < 0")))
            }
            _ => Ok(()),
        }
    }
}

/// Channel of a block whose mask best matches a reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepresentativeSelection {
    pub block: usize,
    pub channel: usize,
    pub iou: f64,
}

fn check_dims(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(CfdError::DimensionMismatch {
            left: a.dims(),
            right: b.dims(),
        });
    }
    Ok(())
}

/// Intersection over union of two equally sized masks.
pub fn iou<T: Scalar>(a: &BinaryMask, b: &BinaryMask) -> Result<T> {
    check_dims(a, b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.grid.iter().zip(&b.grid) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Err(CfdError::DegenerateMasks);
    }
    Ok(T::of_usize(inter) / T::of_usize(union))
}

pub fn binarize_evidence<T: Scalar>(e: &EvidenceMap<T>, policy: ThresholdPolicy) -> Result<BinaryMask> {
    policy.validate()?;
    let (h, w) = e.dims();
    let grid = match policy {
        ThresholdPolicy::Absolute(tau) => {
            let tau = T::from_f64_lossy(tau);
            e.values.iter().map(|&v| v > T::zero() && v > tau).collect()
        }
        ThresholdPolicy::PositiveQuantile(q) => {
            let mut positive: Vec<T> = e.values.iter().copied().filter(|&v| v > T::zero()).collect();
            if positive.is_empty() {
                return BinaryMask::empty(h, w);
            }
            positive.sort_by(|a, b| b.partial_cmp(a).expect("finite evidence"));
            // Number of values kept before tie expansion; the epsilon absorbs
            // representation error in q (e.g. 1/3 * 3).
            let keep = ((q * positive.len() as f64) - 1e-9).ceil().max(1.0) as usize;
            let cut = positive[keep.min(positive.len()) - 1];
            e.values.iter().map(|&v| v > T::zero() && v >= cut).collect()
        }
    };
    BinaryMask::new(h, w, grid)
}

/// Nearest-neighbour upsampling: target cell `(i, j)` copies source
/// `(floor(i * h / H), floor(j * w / W))`.
pub fn upsample_mask(m: &BinaryMask, target: (usize, usize)) -> Result<BinaryMask> {
    let (h, w) = m.dims();
    let (th, tw) = target;
    if th < h || tw < w {
        return Err(CfdError::InvalidTarget {
            from: (h, w),
            target,
        });
    }
    if (th, tw) == (h, w) {
        return Ok(m.clone());
    }
    BinaryMask::from_fn(th, tw, |i, j| m.get(i * h / th, j * w / tw))
}

/// Binarizes and upsamples one evidence map to `target` resolution.
pub fn evidence_mask<T: Scalar>(
    e: &EvidenceMap<T>,
    policy: ThresholdPolicy,
    target: (usize, usize),
) -> Result<BinaryMask> {
    upsample_mask(&binarize_evidence(e, policy)?, target)
}

/// Selects the channel whose binarized, upsampled map has the highest IoU
/// against `reference`. Ties go to the lowest channel index; channels whose
/// IoU is undefined (both masks empty) score 0.
pub fn best_map_vs_reference<T: Scalar>(
    maps: &[EvidenceMap<T>],
    reference: &BinaryMask,
    policy: ThresholdPolicy,
) -> Result<RepresentativeSelection> {
    let masks = maps
        .iter()
        .map(|m| evidence_mask(m, policy, reference.dims()))
        .collect::<Result<Vec<_>>>()?;
    let block = maps.first().map(|m| m.block).unwrap_or(0);
    if let Some(other) = maps.iter().find(|m| m.block != block) {
        return Err(CfdError::InvalidShape(format!(
            "maps from blocks {block} and {} mixed in one selection",
            other.block
        )));
    }
    let (idx, score) = best_mask_vs_reference(&masks, reference)?.ok_or(CfdError::EmptyBlock(block))?;
    Ok(RepresentativeSelection {
        block,
        channel: maps[idx].channel,
        iou: score,
    })
}

/// Index-level selection over already binarized masks. `None` when `masks` is empty.
pub fn best_mask_vs_reference(masks: &[BinaryMask], reference: &BinaryMask) -> Result<Option<(usize, f64)>> {
    let mut best: Option<(usize, f64)> = None;
    for (i, mask) in masks.iter().enumerate() {
        let score = match iou::<f64>(mask, reference) {
            Ok(v) => v,
            Err(CfdError::DegenerateMasks) => 0.0,
            Err(e) => return Err(e),
        };
        if best.map_or(true, |(_, s)| score > s) {
            best = Some((i, score));
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows_mask(h: usize, w: usize, rows: &[usize]) -> BinaryMask {
        BinaryMask::from_fn(h, w, |r, _| rows.contains(&r)).unwrap()
    }

    /// Independent pixel-counting oracle, no shared code with `iou`.
    fn brute_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
        let (h, w) = a.dims();
        let mut inter = 0u32;
        let mut uni = 0u32;
        for r in 0..h {
            for c in 0..w {
                if a.get(r, c) && b.get(r, c) {
                    inter += 1;
                }
                if a.get(r, c) || b.get(r, c) {
                    uni += 1;
                }
            }
        }
        f64::from(inter) / f64::from(uni)
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = rows_mask(4, 4, &[0, 1]);
        assert_eq!(iou::<f64>(&a, &a).unwrap(), 1.0);
        let b = rows_mask(4, 4, &[2, 3]);
        assert_eq!(iou::<f64>(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn iou_overlapping_rows() {
        let a = rows_mask(4, 4, &[0, 1]);
        let b = rows_mask(4, 4, &[1, 2]);
        let expected = brute_iou(&a, &b);
        assert_eq!(expected, 4.0 / 12.0);
        assert_eq!(iou::<f64>(&a, &b).unwrap(), expected);
        assert_eq!(iou::<f32>(&a, &b).unwrap(), 4.0f32 / 12.0);
    }

    #[test]
    fn iou_errors() {
        let a = BinaryMask::empty(3, 3).unwrap();
        assert!(matches!(iou::<f64>(&a, &a), Err(CfdError::DegenerateMasks)));
        let b = BinaryMask::full(3, 4).unwrap();
        assert!(matches!(iou::<f64>(&a, &b), Err(CfdError::DimensionMismatch { .. })));
    }

    #[test]
    fn mask_rejects_bad_dims() {
        assert!(BinaryMask::new(0, 3, vec![]).is_err());
        assert!(BinaryMask::new(2, 2, vec![true; 3]).is_err());
    }

    fn map(h: usize, w: usize, values: Vec<f64>) -> EvidenceMap<f64> {
        EvidenceMap::new(1, 0, h, w, values).unwrap()
    }

    #[test]
    fn binarize_no_positive_evidence() {
        let e = map(2, 2, vec![0.0, -1.0, -0.5, 0.0]);
        let m = binarize_evidence(&e, ThresholdPolicy::default()).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn binarize_constant_positive_keeps_everything() {
        let e = map(3, 3, vec![0.7; 9]);
        let m = binarize_evidence(&e, ThresholdPolicy::PositiveQuantile(0.2)).unwrap();
        assert_eq!(m.popcount(), 9);
    }

    #[test]
    fn binarize_third_quantile_hand_enumerated() {
        // positives sorted: 4, 3, 2; top third = 1 value -> cut at 4.
        let e = map(2, 2, vec![4.0, 3.0, 2.0, -1.0]);
        let m = binarize_evidence(&e, ThresholdPolicy::PositiveQuantile(1.0 / 3.0)).unwrap();
        assert_eq!(m.as_slice(), &[true, false, false, false]);
        // a tie with the maximum is included
        let e = map(2, 2, vec![4.0, 4.0, 2.0, -1.0]);
        let m = binarize_evidence(&e, ThresholdPolicy::PositiveQuantile(1.0 / 3.0)).unwrap();
        assert_eq!(m.as_slice(), &[true, true, false, false]);
    }

    #[test]
    fn binarize_absolute() {
        let e = map(1, 4, vec![0.0, 0.5, 1.0, -2.0]);
        let m = binarize_evidence(&e, ThresholdPolicy::Absolute(0.5)).unwrap();
        assert_eq!(m.as_slice(), &[false, false, true, false]);
        let m = binarize_evidence(&e, ThresholdPolicy::Absolute(0.0)).unwrap();
        assert_eq!(m.as_slice(), &[false, true, true, false]);
    }

    #[test]
    fn binarize_rejects_bad_policy() {
        let e = map(1, 1, vec![1.0]);
        for p in [
            ThresholdPolicy::PositiveQuantile(0.0),
            ThresholdPolicy::PositiveQuantile(1.0),
            ThresholdPolicy::Absolute(-0.1),
        ] {
            assert!(matches!(binarize_evidence(&e, p), Err(CfdError::InvalidPolicy(_))));
        }
    }

    #[test]
    fn evidence_rejects_non_finite() {
        assert!(EvidenceMap::new(1, 0, 1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(EvidenceMap::new(0, 0, 1, 1, vec![1.0]).is_err());
    }

    #[test]
    fn upsample_replicates_blocks() {
        let full = BinaryMask::full(2, 2).unwrap();
        assert_eq!(upsample_mask(&full, (4, 4)).unwrap(), BinaryMask::full(4, 4).unwrap());

        let one = BinaryMask::from_fn(2, 2, |r, c| r == 1 && c == 0).unwrap();
        let up = upsample_mask(&one, (4, 4)).unwrap();
        assert_eq!(up.popcount(), 4);
        let expected = BinaryMask::from_fn(4, 4, |r, c| r >= 2 && c < 2).unwrap();
        assert_eq!(up, expected);
    }

    #[test]
    fn upsample_three_to_seven() {
        // floor(i*3/7) for i in 0..7, enumerated by hand
        let table = [0usize, 0, 0, 1, 1, 2, 2];
        let src = BinaryMask::from_fn(3, 3, |r, c| (r * 3 + c) % 2 == 0).unwrap();
        let up = upsample_mask(&src, (7, 7)).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                assert_eq!(up.get(i, j), src.get(table[i], table[j]), "cell {i},{j}");
            }
        }
        assert!(matches!(
            upsample_mask(&src, (2, 7)),
            Err(CfdError::InvalidTarget { .. })
        ));
    }

    fn block_map(channel: usize, mask: &BinaryMask) -> EvidenceMap<f64> {
        let (h, w) = mask.dims();
        let values = mask.as_slice().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        EvidenceMap::new(2, channel, h, w, values).unwrap()
    }

    #[test]
    fn best_map_single_and_exact() {
        let reference = rows_mask(4, 5, &[0, 1]);
        let sel = best_map_vs_reference(
            &[block_map(0, &rows_mask(4, 5, &[1]))],
            &reference,
            ThresholdPolicy::Absolute(0.5),
        )
        .unwrap();
        assert_eq!(sel.channel, 0);
        assert_eq!(sel.iou, 0.5);

        let maps = [
            block_map(0, &rows_mask(4, 5, &[3])),
            block_map(1, &reference),
            block_map(2, &rows_mask(4, 5, &[2])),
        ];
        let sel = best_map_vs_reference(&maps, &reference, ThresholdPolicy::Absolute(0.5)).unwrap();
        assert_eq!((sel.block, sel.channel, sel.iou), (2, 1, 1.0));
    }

    #[test]
    fn best_map_tie_breaks_to_lowest_channel() {
        // reference: first 10 pixels of a 4x5 grid
        let reference = BinaryMask::from_fn(4, 5, |r, c| r * 5 + c < 10).unwrap();
        let m0 = BinaryMask::from_fn(4, 5, |r, c| r * 5 + c < 2).unwrap();
        let m1 = BinaryMask::from_fn(4, 5, |r, c| r * 5 + c < 6).unwrap();
        let m2 = BinaryMask::from_fn(4, 5, |r, c| (4..10).contains(&(r * 5 + c))).unwrap();
        let oracle: Vec<f64> = [&m0, &m1, &m2].iter().map(|m| brute_iou(m, &reference)).collect();
        assert_eq!(oracle, vec![0.2, 0.6, 0.6]);
        let maps = [block_map(0, &m0), block_map(1, &m1), block_map(2, &m2)];
        for _ in 0..3 {
            let sel = best_map_vs_reference(&maps, &reference, ThresholdPolicy::Absolute(0.5)).unwrap();
            assert_eq!(sel.channel, 1);
            assert_eq!(sel.iou, 0.6);
        }
    }

    #[test]
    fn best_map_degenerate_channels_score_zero() {
        let reference = rows_mask(2, 2, &[0]);
        let maps = [
            EvidenceMap::new(1, 0, 2, 2, vec![-1.0; 4]).unwrap(),
            EvidenceMap::new(1, 1, 2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap(),
        ];
        let sel = best_map_vs_reference(&maps, &reference, ThresholdPolicy::default()).unwrap();
        assert_eq!((sel.channel, sel.iou), (0, 0.0));
        let empty: [EvidenceMap<f64>; 0] = [];
        assert!(matches!(
            best_map_vs_reference(&empty, &reference, ThresholdPolicy::default()),
            Err(CfdError::EmptyBlock(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn mask_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
            (1usize..=8, 1usize..=8).prop_flat_map(|(h, w)| {
                (
                    proptest::collection::vec(any::<bool>(), h * w),
                    proptest::collection::vec(any::<bool>(), h * w),
                )
                    .prop_map(move |(a, b)| {
                        (BinaryMask::new(h, w, a).unwrap(), BinaryMask::new(h, w, b).unwrap())
                    })
            })
        }

        proptest! {
            #[test]
            fn iou_matches_brute_force_and_is_symmetric((a, b) in mask_pair()) {
                prop_assume!(!(a.is_empty() && b.is_empty()));
                let v = iou::<f64>(&a, &b).unwrap();
                prop_assert_eq!(v, brute_iou(&a, &b));
                prop_assert_eq!(v, iou::<f64>(&b, &a).unwrap());
                prop_assert!((0.0..=1.0).contains(&v));
            }

            #[test]
            fn iou_self_is_one((a, _) in mask_pair()) {
                prop_assume!(!a.is_empty());
                prop_assert_eq!(iou::<f64>(&a, &a).unwrap(), 1.0);
            }

            #[test]
            fn subset_law((a, b) in mask_pair()) {
                let sub = BinaryMask::new(a.height(), a.width(),
                    a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| x && y).collect()).unwrap();
                prop_assume!(!b.is_empty());
                prop_assert!(sub.is_subset_of(&b));
                let expected = sub.popcount() as f64 / b.popcount() as f64;
                prop_assert_eq!(iou::<f64>(&sub, &b).unwrap(), expected);
            }

            #[test]
            fn selection_invariant_under_monotone_maps(
                values in proptest::collection::vec(-4.0f64..4.0, 3 * 16),
                reference in proptest::collection::vec(any::<bool>(), 64),
                q in 0.05f64..0.95,
            ) {
                let reference = BinaryMask::new(8, 8, reference).unwrap();
                prop_assume!(!reference.is_empty());
                let maps: Vec<_> = values.chunks(16).enumerate()
                    .map(|(c, v)| EvidenceMap::new(3, c, 4, 4, v.to_vec()).unwrap()).collect();
                let policy = ThresholdPolicy::PositiveQuantile(q);
                let base = best_map_vs_reference(&maps, &reference, policy).unwrap();
                // strictly increasing maps that fix the sign of every value
                let transforms: [fn(f64) -> f64; 3] = [|x| x * x * x, |x| 5.0 * x, f64::sinh];
                for t in transforms {
                    let mapped: Vec<_> = maps.iter().map(|m| m.map_values(t).unwrap()).collect();
                    let sel = best_map_vs_reference(&mapped, &reference, policy).unwrap();
                    prop_assert_eq!(sel, base);
                }
            }
        }
    }
}
