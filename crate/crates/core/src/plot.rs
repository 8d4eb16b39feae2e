//! Minimal raster line plots written as PNG.

use std::path::Path;

use crate::data::Image;
use crate::error::Result;

const PALETTE: [[u8; 3]; 6] = [
    [200, 40, 40],
    [40, 90, 200],
    [30, 150, 60],
    [220, 140, 20],
    [140, 60, 170],
    [20, 160, 160],
];

/// Plots each series over `x = 1..=len` with the y axis fixed to `[y_min, y_max]`.
pub fn line_plot(series: &[Vec<f64>], y_min: f64, y_max: f64, width: usize, height: usize) -> Image {
    let mut img = Image::filled(height, width, [255, 255, 255]);
    let (left, right, top, bottom) = (24usize, 12usize, 12usize, 20usize);
    let pw = width.saturating_sub(left + right).max(1);
    let ph = height.saturating_sub(top + bottom).max(1);
    let grey = [215, 215, 215];
    for g in 0..=4 {
        let y = top + ph * g / 4;
        for x in left..left + pw {
            img.put(y, x, grey);
        }
    }
    for y in top..=top + ph {
        img.put(y.min(height - 1), left, [0, 0, 0]);
    }
    for x in left..left + pw {
        img.put((top + ph).min(height - 1), x, [0, 0, 0]);
    }
    let points = series.iter().map(Vec::len).max().unwrap_or(0);
    let span = (y_max - y_min).max(f64::EPSILON);
    let to_px = |i: usize, v: f64| -> (i64, i64) {
        let x = if points <= 1 {
            left + pw / 2
        } else {
            left + pw * i / (points - 1)
        };
        let t = ((v - y_min) / span).clamp(0.0, 1.0);
        let y = top as f64 + (1.0 - t) * ph as f64;
        (x as i64, y.round() as i64)
    };
    for (s, ys) in series.iter().enumerate() {
        let colour = PALETTE[s % PALETTE.len()];
        let pts: Vec<(i64, i64)> = ys.iter().enumerate().map(|(i, &v)| to_px(i, v)).collect();
        for w in pts.windows(2) {
            draw_line(&mut img, w[0], w[1], colour);
        }
        for &(x, y) in &pts {
            for dy in -2..=2 {
                for dx in -2..=2 {
                    put_checked(&mut img, x + dx, y + dy, colour);
                }
            }
        }
    }
    img
}

pub fn save_line_plot(path: &Path, series: &[Vec<f64>], y_min: f64, y_max: f64) -> Result<()> {
    line_plot(series, y_min, y_max, 320, 200).save_png(path)
}

fn put_checked(img: &mut Image, x: i64, y: i64, rgb: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height {
        img.put(y as usize, x as usize, rgb);
    }
}

fn draw_line(img: &mut Image, (x0, y0): (i64, i64), (x1, y1): (i64, i64), rgb: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put_checked(img, x, y, rgb);
        put_checked(img, x, y + 1, rgb);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plot_marks_points() {
        let img = line_plot(&[vec![1.0, 0.0]], 0.0, 1.0, 100, 80);
        // first point sits at the top-left of the plot area
        assert_eq!(img.get(12, 24), PALETTE[0]);
        assert_eq!(img.get(60, 88), PALETTE[0]);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        save_line_plot(&p, &[vec![0.2, 0.9, 0.4]], 0.0, 1.0).unwrap();
        let back = Image::load(&p).unwrap();
        assert_eq!(back, line_plot(&[vec![0.2, 0.9, 0.4]], 0.0, 1.0, 320, 200));
    }
}
