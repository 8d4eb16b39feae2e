//! Per-image IoU chains between an old and a new snapshot, the drop rule,
//! and mode aggregation into the forgetting block.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{atomic_write, ImageRecord};
use crate::error::{CfdError, Result};
use crate::evidence::{evidence_for, EvidenceSource};
use crate::masks::{best_map_vs_reference, best_mask_vs_reference, evidence_mask, BinaryMask, RepresentativeSelection, ThresholdPolicy};
use crate::model::ModelSnapshot;
use crate::plot;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DissectConfig {
    pub policy: ThresholdPolicy,
    pub source: EvidenceSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerImageDissection {
    pub image_id: String,
    /// `ious[l - 1]`: best IoU of a new-model map against the old model's
    /// representative map at block `l`.
    pub ious: Vec<f64>,
    pub rm_old: Vec<RepresentativeSelection>,
    pub rm_new: Vec<RepresentativeSelection>,
    pub drop_block: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissectionReport {
    pub sample_set_id: String,
    pub old_snapshot_id: String,
    pub new_snapshot_id: String,
    pub forgetting_block: usize,
    pub per_image: Vec<PerImageDissection>,
}

impl DissectionReport {
    pub fn drop_blocks(&self) -> Vec<usize> {
        self.per_image.iter().map(|p| p.drop_block).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_json()?.as_bytes())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CfdError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Block `j` in `[2, K]` with the largest `ious[j-1] - ious[j]` (1-based);
/// ties go to the smallest `j`.
pub fn find_drop_block(ious: &[f64]) -> Result<usize> {
    if ious.len() < 2 {
        return Err(CfdError::TooFewBlocks(ious.len()));
    }
    let mut best = (2, ious[0] - ious[1]);
    for j in 3..=ious.len() {
        let drop = ious[j - 2] - ious[j - 1];
        if drop > best.1 {
            best = (j, drop);
        }
    }
    Ok(best.0)
}

/// Most frequent block; ties go to the smallest.
pub fn mode_block(drops: &[usize]) -> Result<usize> {
    let max = *drops.iter().max().ok_or(CfdError::EmptySampleSet)?;
    let mut counts = vec![0usize; max + 1];
    drops.iter().for_each(|&b| counts[b] += 1);
    let top = *counts.iter().max().expect("nonempty");
    Ok(counts.iter().position(|&c| c == top).expect("present"))
}

fn check_pair<T: Scalar>(a: &ModelSnapshot<T>, b: &ModelSnapshot<T>, k: usize) -> Result<()> {
    let (da, db) = (&a.descriptor, &b.descriptor);
    if da.block_channels != db.block_channels || da.input_size != db.input_size {
        return Err(CfdError::ArchitectureMismatch(format!(
            "encoders differ: {:?}@{} vs {:?}@{}",
            da.block_channels, da.input_size, db.block_channels, db.input_size
        )));
    }
    if k != da.block_count() {
        return Err(CfdError::ArchitectureMismatch(format!(
            "asked for {k} blocks, snapshots have {}",
            da.block_count()
        )));
    }
    if k < 2 {
        return Err(CfdError::TooFewBlocks(k));
    }
    Ok(())
}

fn class_index<T: Scalar>(m: &ModelSnapshot<T>, class: &str, source: &EvidenceSource) -> Result<usize> {
    match m.classes.iter().position(|c| c == class) {
        Some(i) => Ok(i),
        None if matches!(source, EvidenceSource::Activations) => Ok(0),
        None => Err(CfdError::MissingClass(class.to_string())),
    }
}

/// IoU chain of one image across all `k` blocks.
pub fn dissect_image<T: Scalar>(
    m_old: &ModelSnapshot<T>,
    m_new: &ModelSnapshot<T>,
    record: &ImageRecord,
    gt: &BinaryMask,
    k: usize,
    cfg: &DissectConfig,
) -> Result<PerImageDissection> {
    check_pair(m_old, m_new, k)?;
    if gt.is_empty() {
        return Err(CfdError::DegenerateGroundTruth(record.image_id.clone()));
    }
    let side = m_old.descriptor.input_size;
    if gt.dims() != (side, side) {
        return Err(CfdError::DimensionMismatch {
            left: gt.dims(),
            right: (side, side),
        });
    }
    let class = class_index(m_old, &record.class, &cfg.source)?;
    let old = evidence_for(m_old, &record.image_id, &record.image, class, &cfg.source)?;
    let new = evidence_for(m_new, &record.image_id, &record.image, class, &cfg.source)?;

    let mut ious = Vec::with_capacity(k);
    let mut rm_old = Vec::with_capacity(k);
    let mut rm_new = Vec::with_capacity(k);
    for l in 1..=k {
        let sel_old = best_map_vs_reference(old.block(l), gt, cfg.policy)?;
        let reference = evidence_mask(&old.block(l)[sel_old.channel], cfg.policy, (side, side))?;
        let new_masks = new
            .block(l)
            .iter()
            .map(|e| evidence_mask(e, cfg.policy, (side, side)))
            .collect::<Result<Vec<_>>>()?;
        let (channel, iou) = best_mask_vs_reference(&new_masks, &reference)?.ok_or(CfdError::EmptyBlock(l))?;
        rm_old.push(sel_old);
        rm_new.push(RepresentativeSelection { block: l, channel, iou });
        ious.push(iou);
    }
    let drop_block = find_drop_block(&ious)?;
    Ok(PerImageDissection {
        image_id: record.image_id.clone(),
        ious,
        rm_old,
        rm_new,
        drop_block,
    })
}

fn short_hash(parts: impl IntoIterator<Item = String>) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs `dissect_image` over the sample set in parallel and takes the mode
/// of the per-image drop blocks.
pub fn dissect<T: Scalar>(
    samples: &[ImageRecord],
    gts: &[BinaryMask],
    m_old: &ModelSnapshot<T>,
    m_new: &ModelSnapshot<T>,
    k: usize,
    cfg: &DissectConfig,
) -> Result<DissectionReport> {
    if samples.is_empty() {
        return Err(CfdError::EmptySampleSet);
    }
    if samples.len() != gts.len() {
        return Err(CfdError::LengthMismatch(format!(
            "{} samples, {} ground-truth masks",
            samples.len(),
            gts.len()
        )));
    }
    check_pair(m_old, m_new, k)?;
    let per_image = samples
        .par_iter()
        .zip(gts)
        .map(|(r, gt)| dissect_image(m_old, m_new, r, gt, k, cfg).map_err(|e| CfdError::in_image(&r.image_id, e)))
        .collect::<Result<Vec<_>>>()?;
    let drops: Vec<usize> = per_image.iter().map(|p| p.drop_block).collect();
    Ok(DissectionReport {
        sample_set_id: short_hash(samples.iter().map(|r| r.image_id.clone())),
        old_snapshot_id: m_old.content_hash()[..16].to_string(),
        new_snapshot_id: m_new.content_hash()[..16].to_string(),
        forgetting_block: mode_block(&drops)?,
        per_image,
    })
}

/// Dissects with each record's own mask as ground truth.
pub fn dissect_records<T: Scalar>(
    samples: &[ImageRecord],
    m_old: &ModelSnapshot<T>,
    m_new: &ModelSnapshot<T>,
    cfg: &DissectConfig,
) -> Result<DissectionReport> {
    let gts: Vec<BinaryMask> = samples.iter().map(|r| r.mask.clone()).collect();
    dissect(samples, &gts, m_old, m_new, m_old.block_count(), cfg)
}

/// File-name-safe form of an image id.
pub fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn curve_rows(p: &PerImageDissection) -> Vec<(usize, f64, Option<f64>)> {
    p.ious
        .iter()
        .enumerate()
        .map(|(i, &v)| (i + 1, v, (i > 0).then(|| p.ious[i - 1] - v)))
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `iou_<id>.csv` and `iou_<id>.png` per image plus `iou_curves.csv`.
pub fn export_iou_curves(report: &DissectionReport, dir: &Path) -> Result<Vec<PathBuf>> {
    if report.per_image.is_empty() {
        return Err(CfdError::EmptySampleSet);
    }
    fs::create_dir_all(dir).map_err(|e| CfdError::io(dir, e))?;
    let mut written = Vec::new();
    let mut all = String::from("image_id,block,iou,drop\n");
    for p in &report.per_image {
        let stem = file_stem(&p.image_id);
        let mut csv = String::from("block,iou,drop\n");
        for (b, v, d) in curve_rows(p) {
            let _ = writeln!(csv, "{b},{v},{}", fmt_opt(d));
            let _ = writeln!(all, "{},{b},{v},{}", p.image_id, fmt_opt(d));
        }
        let path = dir.join(format!("iou_{stem}.csv"));
        fs::write(&path, csv).map_err(|e| CfdError::io(&path, e))?;
        written.push(path);
        let png = dir.join(format!("iou_{stem}.png"));
        plot::save_line_plot(&png, std::slice::from_ref(&p.ious), 0.0, 1.0)?;
        written.push(png);
    }
    let path = dir.join("iou_curves.csv");
    fs::write(&path, all).map_err(|e| CfdError::io(&path, e))?;
    written.push(path);
    Ok(written)
}

/// Parses a per-image curve CSV back into `(block, iou)` pairs.
pub fn read_iou_csv(path: &Path) -> Result<Vec<(usize, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| CfdError::io(path, e))?;
    text.lines()
        .skip(1)
        .enumerate()
        .map(|(i, line)| {
            let bad = || CfdError::ManifestParseError {
                line: i + 2,
                msg: format!("bad curve row {line:?}"),
            };
            let mut it = line.split(',');
            let b = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let v = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            Ok((b, v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn drop_rule_examples() {
        assert_eq!(find_drop_block(&[0.80, 0.642, 0.388, 0.35, 0.30]).unwrap(), 3);
        assert_eq!(find_drop_block(&[0.125, 0.25, 0.375, 0.5, 0.625]).unwrap(), 2);
        assert_eq!(find_drop_block(&[1.0, 0.5, 0.5, 0.0, 0.0]).unwrap(), 2);
        assert_eq!(find_drop_block(&[1.0; 5]).unwrap(), 2);
        assert!(matches!(find_drop_block(&[0.4]), Err(CfdError::TooFewBlocks(1))));
    }

    #[test]
    fn mode_with_smallest_tie_break() {
        assert_eq!(mode_block(&[3, 3, 4, 3]).unwrap(), 3);
        assert_eq!(mode_block(&[3, 4, 3, 4]).unwrap(), 3);
        assert_eq!(mode_block(&[5, 2]).unwrap(), 2);
        assert!(matches!(mode_block(&[]), Err(CfdError::EmptySampleSet)));
    }

    proptest! {
        #[test]
        fn drop_block_is_an_argmax(ious in prop::collection::vec(0.0f64..=1.0, 2..8)) {
            let b = find_drop_block(&ious).unwrap();
            prop_assert!(b >= 2 && b <= ious.len());
            let d = ious[b - 2] - ious[b - 1];
            for j in 2..=ious.len() {
                let dj = ious[j - 2] - ious[j - 1];
                prop_assert!(dj <= d);
                if j < b {
                    prop_assert!(dj < d);
                }
            }
        }

        #[test]
        fn mode_is_permutation_invariant(mut drops in prop::collection::vec(2usize..6, 1..20), seed in any::<u64>()) {
            let before = mode_block(&drops).unwrap();
            let n = drops.len();
            for i in 0..n {
                let j = (seed as usize).wrapping_mul(i + 7) % n;
                drops.swap(i, j);
            }
            prop_assert_eq!(mode_block(&drops).unwrap(), before);
        }
    }

    #[test]
    fn csv_round_trip() {
        let p = PerImageDissection {
            image_id: "img/1".into(),
            ious: vec![1.0, 0.1 + 0.2, 1.0 / 3.0, 0.0, 0.25],
            rm_old: vec![],
            rm_new: vec![],
            drop_block: 3,
        };
        let report = DissectionReport {
            sample_set_id: "s".into(),
            old_snapshot_id: "o".into(),
            new_snapshot_id: "n".into(),
            forgetting_block: 3,
            per_image: vec![p.clone()],
        };
        let dir = tempfile::tempdir().unwrap();
        let files = export_iou_curves(&report, dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        let back = read_iou_csv(&dir.path().join("iou_img_1.csv")).unwrap();
        assert_eq!(back.len(), 5);
        assert_eq!(back.iter().map(|x| x.1).collect::<Vec<_>>(), p.ious);
        let agg = fs::read_to_string(dir.path().join("iou_curves.csv")).unwrap();
        assert_eq!(agg.lines().count(), 1 + 5);
    }
}
