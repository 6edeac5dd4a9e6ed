//! Saliency evaluation: Otsu binarization, mask scoring at relaxed IoU and
//! perturbation (token deletion) curves.

mod otsu;
mod perturbation;
mod segmentation;

pub use otsu::{binarize, binarize_and_upsample, otsu_threshold, BinarizationConfig};
pub use perturbation::{
    perturbation_curve, PerturbationResult, PerturbationTarget, Polarity, REMOVAL_FRACTIONS,
};
pub use segmentation::{
    score_masks, score_suite, ImageCase, Prediction, SegmentationConfig, SegmentationScore,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("scores are constant: no threshold separates them")]
    NoSeparation,
    #[error("non-finite score")]
    NonFinite,
    #[error("saliency map has no patch grid")]
    MissingGrid,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("mask is {got:?}, expected {expected:?}")]
    Dimension {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("no ground-truth masks to score against")]
    NoGroundTruth,
    #[error("requested removal of {requested} of {available} tokens")]
    RemovesEverything { requested: usize, available: usize },
    #[error("sample {sample}: {scores} scores for {tokens} tokens")]
    ScoreLength {
        sample: usize,
        scores: usize,
        tokens: usize,
    },
}

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    rows: usize,
    cols: usize,
    cells: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, cells: Vec<bool>) -> Self {
        assert_eq!(rows * cols, cells.len(), "mask cell count");
        Mask { rows, cols, cells }
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        Mask::new(rows, cols, vec![false; rows * cols])
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let cells = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Mask { rows, cols, cells }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.cells[r * self.cols + c] = v;
    }

    pub fn area(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dim() == other.dim() && self.cells.iter().zip(&other.cells).all(|(&a, &b)| !a || b)
    }

    pub fn iou(&self, other: &Mask) -> Result<f64, EvalError> {
        if self.dim() != other.dim() {
            return Err(EvalError::Dimension {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.cells.iter().zip(&other.cells) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Ok(if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        })
    }

    /// Nearest-neighbor resize: output pixel `(y, x)` copies cell
    /// `(y * rows / height, x * cols / width)`.
    pub fn upsample_nearest(&self, height: usize, width: usize) -> Mask {
        Mask::from_fn(height, width, |y, x| {
            self.get(y * self.rows / height, x * self.cols / width)
        })
    }
}
