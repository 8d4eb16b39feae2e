//! Coloured shapes on textured backgrounds with exact masks and templated captions.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::image::Image;
use super::record::{ImageRecord, Split};
use crate::error::{CfdError, Result};
use crate::masks::BinaryMask;

/// Shape grammar, in the default class order.
pub const SHAPES: [&str; 12] = [
    "circle",
    "square",
    "triangle",
    "diamond",
    "cross",
    "ring",
    "star",
    "hexagon",
    "ellipse",
    "bar",
    "crescent",
    "semicircle",
];

const COLOURS: [(&str, [u8; 3]); 8] = [
    ("red", [220, 40, 40]),
    ("green", [40, 190, 70]),
    ("blue", [40, 80, 230]),
    ("yellow", [240, 220, 40]),
    ("purple", [150, 50, 200]),
    ("orange", [250, 140, 20]),
    ("white", [250, 250, 250]),
    ("black", [15, 15, 15]),
];

const BACKGROUNDS: [(&str, [u8; 3]); 4] = [
    ("gray", [128, 128, 128]),
    ("brown", [120, 90, 60]),
    ("teal", [60, 125, 125]),
    ("olive", [110, 110, 50]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    fn split_of(&self, i: usize) -> Split {
        if i < self.train {
            Split::Train
        } else if i < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 200,
            val: 40,
            test: 40,
        }
    }
}

/// Rasterizes `shape` centred at `(cy, cx)` with size `r`, sampling pixel centres.
pub fn render_shape(shape: &str, cy: f64, cx: f64, r: f64, side: usize) -> Result<BinaryMask> {
    let inside: Box<dyn Fn(f64, f64) -> bool> = match shape {
        "circle" => Box::new(move |dy, dx| dx * dx + dy * dy <= r * r),
        "square" => Box::new(move |dy, dx| dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r),
        "triangle" => Box::new(move |dy, dx| {
            let t = (dy + r) / (1.8 * r);
            (0.0..=1.0).contains(&t) && dx.abs() <= t * r
        }),
        "diamond" => Box::new(move |dy, dx| dx.abs() + dy.abs() <= r),
        "cross" => Box::new(move |dy, dx| {
            (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r)
        }),
        "ring" => Box::new(move |dy, dx| {
            let d = (dx * dx + dy * dy).sqrt();
            d <= r && d >= 0.55 * r
        }),
        "star" => Box::new(move |dy, dx| {
            let d = (dx * dx + dy * dy).sqrt();
            let th = dy.atan2(dx) + PI / 2.0;
            d <= r * (0.6 + 0.4 * (5.0 * th).cos())
        }),
        "hexagon" => Box::new(move |dy, dx| {
            let h = r * 0.866;
            dy.abs() <= h && dx.abs() * 0.866 + dy.abs() * 0.5 <= h
        }),
        "ellipse" => Box::new(move |dy, dx| (dx / r).powi(2) + (dy / (0.55 * r)).powi(2) <= 1.0),
        "bar" => Box::new(move |dy, dx| dx.abs() <= r && dy.abs() <= 0.35 * r),
        "crescent" => Box::new(move |dy, dx| {
            let ox = dx - 0.45 * r;
            dx * dx + dy * dy <= r * r && ox * ox + dy * dy > 0.5625 * r * r
        }),
        "semicircle" => Box::new(move |dy, dx| dx * dx + dy * dy <= r * r && dy >= -0.2 * r),
        other => return Err(CfdError::UnknownShape(other.to_string())),
    };
    BinaryMask::from_fn(side, side, |row, col| {
        inside(row as f64 + 0.5 - cy, col as f64 + 0.5 - cx)
    })
}

fn record_seed(seed: u64, class: &str, i: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(class.as_bytes());
    h.update((i as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn clamp_u8(v: i32) -> u8 {
    v.clamp(0, 255) as u8
}

fn synth_one(class: &str, i: usize, side: usize, seed: u64, split: Split) -> Result<ImageRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(record_seed(seed, class, i));
    let s = side as f64;
    let r = rng.random_range(0.16 * s..0.3 * s);
    let cy = rng.random_range(r + 1.0..s - r - 1.0);
    let cx = rng.random_range(r + 1.0..s - r - 1.0);
    let mask = render_shape(class, cy, cx, r, side)?;
    let (bg_name, bg) = BACKGROUNDS[rng.random_range(0..BACKGROUNDS.len())];
    let (fg_name, fg) = COLOURS[rng.random_range(0..COLOURS.len())];
    let period = rng.random_range(5..12) as i32;
    let phase = rng.random_range(0..period);
    let mut image = Image::filled(side, side, bg);
    for row in 0..side {
        for col in 0..side {
            let rgb = if mask.get(row, col) {
                let jitter = rng.random_range(-12..=12);
                fg.map(|v| clamp_u8(i32::from(v) + jitter))
            } else {
                let stripe = if ((row + col) as i32 + phase) / period % 2 == 0 { 14 } else { -14 };
                let noise = rng.random_range(-10..=10);
                bg.map(|v| clamp_u8(i32::from(v) + stripe + noise))
            };
            image.put(row, col, rgb);
        }
    }
    let size = if r >= 0.23 * s { "large" } else { "small" };
    let captions = vec![
        format!("a {fg_name} {class} on a {bg_name} background"),
        format!("a {size} {fg_name} {class}"),
        format!("there is a {fg_name} {class} in the picture"),
    ];
    ImageRecord::new(format!("{class}_{i:04}"), image, class, captions, mask, split)
}

/// `counts.total()` records per class, ids `<class>_<index>`; the first
/// `counts.train` indices are training records, then validation, then test.
pub fn synth_generate(classes: &[String], counts: SplitCounts, side: usize, seed: u64) -> Result<Vec<ImageRecord>> {
    if let Some(bad) = classes.iter().find(|c| !SHAPES.contains(&c.as_str())) {
        return Err(CfdError::UnknownShape(bad.clone()));
    }
    if side < 16 {
        return Err(CfdError::InvalidConfig(format!("synthetic images need side >= 16, got {side}")));
    }
    let jobs: Vec<(&String, usize)> = classes
        .iter()
        .flat_map(|c| (0..counts.total()).map(move |i| (c, i)))
        .collect();
    jobs.par_iter()
        .map(|&(c, i)| synth_one(c, i, side, seed, counts.split_of(i)))
        .collect()
}
