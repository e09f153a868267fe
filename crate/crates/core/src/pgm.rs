//! Binary 8-bit PGM output.

use std::fs;
use std::path::Path;

use crate::error::Result;

/// Quantizes unit-interval pixels to 8 bits.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn pgm_bytes(width: usize, height: usize, pixels: &[f64], comment: &str) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count");
    let mut out = Vec::with_capacity(pixels.len() + 64);
    out.extend_from_slice(b"P5\n");
    if !comment.is_empty() {
        out.extend_from_slice(format!("# config_hash {comment}\n").as_bytes());
    }
    out.extend_from_slice(format!("{width} {height}\n255\n").as_bytes());
    out.extend(pixels.iter().map(|&v| to_u8(v)));
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[f64], comment: &str) -> Result<()> {
    fs::write(path, pgm_bytes(width, height, pixels, comment))?;
    Ok(())
}

/// Tiles equally sized images into one grid, `rows[r][c]` at row r, column c,
/// with a one pixel gap filled with `gap`.
pub fn tile(rows: &[Vec<&[f64]>], width: usize, height: usize, gap: f64) -> (usize, usize, Vec<f64>) {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let total_w = cols * (width + 1) - usize::from(cols > 0);
    let total_h = rows.len() * (height + 1) - usize::from(!rows.is_empty());
    let mut grid = vec![gap; total_w * total_h];
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            for y in 0..height {
                let dst = (r * (height + 1) + y) * total_w + c * (width + 1);
                grid[dst..dst + width].copy_from_slice(&img[y * width..(y + 1) * width]);
            }
        }
    }
    (total_w, total_h, grid)
}
