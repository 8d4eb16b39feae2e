use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{atomic_write, ImageRecord};
use crate::error::{CfdError, Result};
use crate::model::{Caption, ModelSnapshot};
use crate::scalar::Scalar;

/// Greedy captions of an old model on new-task images.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoLabels {
    pub snapshot_hash: String,
    pub labels: BTreeMap<String, Caption>,
    /// Captions decoded by this call (zero on a full cache hit).
    pub computed: usize,
}

impl PseudoLabels {
    pub fn get(&self, image_id: &str) -> Option<&Caption> {
        self.labels.get(image_id)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    image_id: String,
    caption: Caption,
}

fn cache_path(dir: &Path, hash: &str) -> PathBuf {
    dir.join(format!("pseudo_{}.jsonl", &hash[..16]))
}

fn read_cache(path: &Path) -> Result<BTreeMap<String, Caption>> {
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let text = fs::read_to_string(path).map_err(|e| CfdError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let c: CacheLine = serde_json::from_str(l)?;
            Ok((c.image_id, c.caption))
        })
        .collect()
}

/// Captions `images` with `old`, reusing and extending the on-disk cache
/// keyed by the snapshot hash when `cache_dir` is given.
pub fn generate_pseudo_labels<T: Scalar>(
    old: &ModelSnapshot<T>,
    images: &[ImageRecord],
    max_len: usize,
    cache_dir: Option<&Path>,
) -> Result<PseudoLabels> {
    let hash = old.content_hash();
    let path = cache_dir.map(|d| cache_path(d, &hash));
    let mut cached = match &path {
        Some(p) => read_cache(p)?,
        None => BTreeMap::new(),
    };
    let todo: Vec<&ImageRecord> = images.iter().filter(|r| !cached.contains_key(&r.image_id)).collect();
    let fresh = todo
        .par_iter()
        .map(|r| {
            let img = r.image.resize(old.descriptor.input_size, old.descriptor.input_size);
            old.generate_caption(&img, max_len)
                .map(|c| (r.image_id.clone(), c))
                .map_err(|e| CfdError::in_image(&r.image_id, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let computed = fresh.len();
    debug!("pseudo labels: {computed} decoded, {} cached", images.len() - computed);
    cached.extend(fresh);
    if let (Some(p), true) = (&path, computed > 0) {
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| CfdError::io(dir, e))?;
        }
        let mut body = Vec::new();
        for (id, c) in &cached {
            serde_json::to_writer(
                &mut body,
                &CacheLine {
                    image_id: id.clone(),
                    caption: c.clone(),
                },
            )?;
            body.push(b'\n');
        }
        atomic_write(p, &body)?;
    }
    let labels = images
        .iter()
        .map(|r| (r.image_id.clone(), cached[&r.image_id].clone()))
        .collect();
    Ok(PseudoLabels {
        snapshot_hash: hash,
        labels,
        computed,
    })
}
