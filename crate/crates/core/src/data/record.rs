use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::{read_png, write_png, Image};
use crate::error::{CfdError, Result};
use crate::masks::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Default for Split {
    fn default() -> Self {
        Split::Train
    }
}

/// One image with its class, reference captions and class mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub image: Image,
    pub class: String,
    pub captions: Vec<String>,
    pub mask: BinaryMask,
    pub split: Split,
}

impl ImageRecord {
    pub fn new(
        image_id: impl Into<String>,
        image: Image,
        class: impl Into<String>,
        captions: Vec<String>,
        mask: BinaryMask,
        split: Split,
    ) -> Result<Self> {
        let image_id = image_id.into();
        if mask.dims() != (image.height, image.width) {
            return Err(CfdError::DimensionMismatch {
                left: mask.dims(),
                right: (image.height, image.width),
            });
        }
        if captions.is_empty() {
            return Err(CfdError::InvalidShape(format!("record {image_id} has no captions")));
        }
        Ok(Self {
            image_id,
            image,
            class: class.into(),
            captions,
            mask,
            split,
        })
    }

    /// Nearest-neighbour resize of image and mask.
    pub fn resized(&self, side: usize) -> ImageRecord {
        ImageRecord {
            image: self.image.resize(side, side),
            mask: resize_mask(&self.mask, side, side),
            ..self.clone()
        }
    }
}

pub fn resize_mask(m: &BinaryMask, height: usize, width: usize) -> BinaryMask {
    let (h, w) = m.dims();
    BinaryMask::from_fn(height, width, |r, c| m.get(r * h / height, c * w / width)).expect("positive dims")
}

pub fn save_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = mask.as_slice().iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_png(path, mask.width(), mask.height(), png::ColorType::Grayscale, &bytes)
}

/// Any first-channel value above 127 counts as foreground.
pub fn load_mask_png(path: &Path) -> Result<BinaryMask> {
    let (w, h, ch, raw) = read_png(path)?;
    BinaryMask::new(h, w, raw.chunks_exact(ch).map(|p| p[0] > 127).collect())
}

/// One JSON-lines manifest row; file paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub file: String,
    pub class: String,
    pub captions: Vec<String>,
    pub mask_file: String,
    #[serde(default)]
    pub split: Split,
    /// Annotated category names, when the source dataset provides them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CfdError::ManifestParseError {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| CfdError::io(path, e))?;
    parse_manifest(&text)
}

/// Writes via a temporary file and rename.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut body = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut body, e)?;
        body.push(b'\n');
    }
    atomic_write(path, &body)
}

pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| CfdError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| CfdError::io(&tmp, e))?;
    f.sync_all().map_err(|e| CfdError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CfdError::io(path, e))
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Loads the image and mask of one entry.
pub fn load_entry(manifest: &Path, e: &ManifestEntry) -> Result<ImageRecord> {
    let dir = base_dir(manifest);
    let image = Image::load(&dir.join(&e.file)).map_err(|err| match err {
        CfdError::MissingImage(_) => CfdError::MissingImage(e.image_id.clone()),
        other => CfdError::in_image(&e.image_id, other),
    })?;
    let mask = load_mask_png(&dir.join(&e.mask_file)).map_err(|err| match err {
        CfdError::MissingImage(_) => CfdError::MissingImage(format!("{} (mask)", e.image_id)),
        other => CfdError::in_image(&e.image_id, other),
    })?;
    ImageRecord::new(&e.image_id, image, &e.class, e.captions.clone(), mask, e.split)
}

/// Writes records as PNG pairs under `dir/images` plus `dir/manifest.jsonl`.
pub fn export_records(dir: &Path, records: &[ImageRecord]) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| CfdError::io(&img_dir, e))?;
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        let file = format!("images/{}.png", r.image_id);
        let mask_file = format!("images/{}_mask.png", r.image_id);
        r.image.save_png(&dir.join(&file))?;
        save_mask_png(&r.mask, &dir.join(&mask_file))?;
        entries.push(ManifestEntry {
            image_id: r.image_id.clone(),
            file,
            class: r.class.clone(),
            captions: r.captions.clone(),
            mask_file,
            split: r.split,
            categories: Some(vec![r.class.clone()]),
        });
    }
    let path = dir.join("manifest.jsonl");
    write_manifest(&path, &entries)?;
    Ok(path)
}
