use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::record::{load_entry, read_manifest, ImageRecord, ManifestEntry, Split};
use crate::error::Result;
use crate::model::vocab::tokenize;

/// How the class set of a manifest entry is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClearImageMode {
    /// Annotation categories when present, caption words otherwise.
    #[default]
    Auto,
    Annotations,
    Lexical,
}

/// Universe classes mentioned in the captions. A class name (possibly
/// several words) matches a contiguous token run; a trailing "s" on the
/// last word is accepted as a plural.
fn lexical_classes(captions: &[String], universe: &[String]) -> BTreeSet<String> {
    let mut found = BTreeSet::new();
    for cap in captions {
        let toks = tokenize(cap);
        for class in universe {
            let name = tokenize(class);
            if name.is_empty() || name.len() > toks.len() {
                continue;
            }
            let hit = toks.windows(name.len()).any(|w| {
                let last = name.len() - 1;
                w[..last] == name[..last] && (w[last] == name[last] || w[last] == format!("{}s", name[last]))
            });
            if hit {
                found.insert(class.clone());
            }
        }
    }
    found
}

/// The entry's classes intersected with `universe`.
pub fn universe_classes(e: &ManifestEntry, universe: &[String], mode: ClearImageMode) -> BTreeSet<String> {
    let from_annotations = |cats: &Vec<String>| -> BTreeSet<String> {
        cats.iter().filter(|c| universe.contains(c)).cloned().collect()
    };
    match (mode, &e.categories) {
        (ClearImageMode::Lexical, _) | (ClearImageMode::Auto, None) => lexical_classes(&e.captions, universe),
        (_, Some(cats)) => from_annotations(cats),
        (ClearImageMode::Annotations, None) => std::iter::once(e.class.clone()).filter(|c| universe.contains(c)).collect(),
    }
}

/// Keeps entries whose class set meets the universe in exactly one class.
pub fn clear_image_filter(entries: &[ManifestEntry], universe: &[String], mode: ClearImageMode) -> Vec<ManifestEntry> {
    entries
        .iter()
        .filter(|e| universe_classes(e, universe, mode).len() == 1)
        .cloned()
        .collect()
}

/// Per-class train/val/test records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassSplits {
    pub train: Vec<ImageRecord>,
    pub val: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
}

/// Split of `n` validation records into (val, test); val takes the extra one.
pub fn halve(n: usize) -> (usize, usize) {
    (n.div_ceil(2), n / 2)
}

/// Reads a manifest, filters clear images, resizes, and halves each class's
/// validation records into val and test (sorted by image id).
pub fn build_split(
    manifest: &Path,
    universe: &[String],
    resize_to: usize,
    mode: ClearImageMode,
) -> Result<BTreeMap<String, ClassSplits>> {
    let entries = read_manifest(manifest)?;
    let kept = clear_image_filter(&entries, universe, mode);
    let mut records: Vec<ImageRecord> = kept
        .par_iter()
        .map(|e| {
            let mut rec = load_entry(manifest, e)?.resized(resize_to);
            if let Some(c) = universe_classes(e, universe, mode).into_iter().next() {
                rec.class = c;
            }
            Ok(rec)
        })
        .collect::<Result<_>>()?;
    records.retain(|r| {
        if r.mask.is_empty() {
            warn!("dropping {}: empty mask", r.image_id);
        }
        !r.mask.is_empty()
    });
    records.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    let mut out: BTreeMap<String, ClassSplits> = universe.iter().map(|c| (c.clone(), ClassSplits::default())).collect();
    let mut held_out: BTreeMap<String, Vec<ImageRecord>> = BTreeMap::new();
    for r in records {
        let slot = out.get_mut(&r.class).expect("class in universe");
        match r.split {
            Split::Train => slot.train.push(r),
            Split::Test => slot.test.push(r),
            Split::Val => held_out.entry(r.class.clone()).or_default().push(r),
        }
    }
    for (class, val) in held_out {
        let (n_val, _) = halve(val.len());
        let slot = out.get_mut(&class).expect("class in universe");
        for (i, mut r) in val.into_iter().enumerate() {
            if i < n_val {
                slot.val.push(r);
            } else {
                r.split = Split::Test;
                slot.test.push(r);
            }
        }
    }
    Ok(out)
}
