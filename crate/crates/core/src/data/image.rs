use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CfdError, Result};
use crate::scalar::Scalar;

/// 8-bit RGB image, row-major `(height, width, 3)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width * 3 {
            return Err(CfdError::InvalidShape(format!(
                "image {height}x{width} with {} bytes",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel-major tensor scaled to `[-1, 1]`.
    pub fn to_chw<T: Scalar>(&self) -> Vec<T> {
        let n = self.height * self.width;
        let scale = T::from_f64_lossy(1.0 / 127.5);
        let mut out = vec![T::zero(); 3 * n];
        for (p, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + p] = T::from_f64_lossy(f64::from(px[c])) * scale - T::one();
            }
        }
        out
    }

    /// Per-channel mean colour, rounded.
    pub fn mean_rgb(&self) -> [u8; 3] {
        let n = (self.height * self.width) as u64;
        let mut sums = [0u64; 3];
        for px in self.pixels.chunks_exact(3) {
            for c in 0..3 {
                sums[c] += u64::from(px[c]);
            }
        }
        sums.map(|s| ((s + n / 2) / n) as u8)
    }

    /// Nearest-neighbour resize.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let mut out = Image::filled(height, width, [0, 0, 0]);
        for r in 0..height {
            for c in 0..width {
                out.put(r, c, self.get(r * self.height / height, c * self.width / width));
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_png(path, self.width, self.height, png::ColorType::Rgb, &self.pixels)
    }

    /// Loads an 8-bit PNG (gray, gray+alpha, RGB or RGBA) as RGB.
    pub fn load(path: &Path) -> Result<Image> {
        let (width, height, channels, raw) = read_png(path)?;
        let pixels = match channels {
            1 => raw.iter().flat_map(|&g| [g, g, g]).collect(),
            2 => raw.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            3 => raw,
            4 => raw.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            n => return Err(CfdError::Image(format!("{}: {n} channels", path.display()))),
        };
        Image::new(height, width, pixels)
    }
}

pub(crate) fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| CfdError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let codec = |e: png::EncodingError| CfdError::Image(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(codec)?;
    writer.write_image_data(data).map_err(codec)?;
    writer.finish().map_err(codec)
}

/// Returns `(width, height, channels, bytes)` of an 8-bit PNG.
pub(crate) fn read_png(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    if !path.exists() {
        return Err(CfdError::MissingImage(path.display().to_string()));
    }
    let file = File::open(path).map_err(|e| CfdError::io(path, e))?;
    let codec = |e: png::DecodingError| CfdError::Image(format!("{}: {e}", path.display()));
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(codec)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(codec)?;
    buf.truncate(info.buffer_size());
    let channels = info.color_type.samples();
    Ok((info.width as usize, info.height as usize, channels, buf))
}
