//! Binary PGM/PPM heatmaps with nearest-neighbour upsampling.

use std::fs;
use std::path::Path;

use crate::error::CliError;

/// Row-major `rows x cols` values.
pub struct Grid<'a> {
    pub rows: usize,
    pub cols: usize,
    pub values: &'a [f64],
}

impl Grid<'_> {
    fn upsampled(&self, factor: usize) -> impl Iterator<Item = f64> + '_ {
        let (h, w) = (self.rows * factor, self.cols * factor);
        (0..h * w).map(move |i| self.values[(i / w / factor) * self.cols + (i % w) / factor])
    }

    fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

fn scale(v: f64, max: f64) -> u8 {
    if max > 0.0 {
        (v / max * 255.0).round().clamp(0.0, 255.0) as u8
    } else {
        0
    }
}

/// Grayscale, black at zero and white at the maximum. Negative values clip to black.
pub fn grayscale(grid: &Grid, factor: usize) -> Vec<u8> {
    let max = grid.values.iter().fold(0.0f64, |m, &v| m.max(v));
    let mut out = format!("P5\n{} {}\n255\n", grid.cols * factor, grid.rows * factor).into_bytes();
    out.extend(grid.upsampled(factor).map(|v| scale(v, max)));
    out
}

/// Diverging, white at zero: red for positive, blue for negative, saturated at
/// the largest magnitude.
pub fn diverging(grid: &Grid, factor: usize) -> Vec<u8> {
    let max = grid.max_abs();
    let mut out = format!("P6\n{} {}\n255\n", grid.cols * factor, grid.rows * factor).into_bytes();
    for v in grid.upsampled(factor) {
        let fade = 255 - scale(v.abs(), max);
        let px = if v >= 0.0 {
            [255, fade, fade]
        } else {
            [fade, fade, 255]
        };
        out.extend(px);
    }
    out
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(CliError::io(path))
}
