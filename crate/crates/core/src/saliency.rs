use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::trace::{PatchGrid, StreamId};

/// Attribution scores over the tokens of one source stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    /// Stream whose tokens the scores refer to.
    pub stream: StreamId,
    pub label: String,
    pub scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<PatchGrid>,
}

impl SaliencyMap {
    /// Scores of the grid tokens reshaped to `[rows, cols]`.
    pub fn grid_scores(&self) -> Option<Array2<f64>> {
        let g = self.grid?;
        let slice = self.scores.get(g.token_range())?;
        Array2::from_shape_vec((g.rows, g.cols), slice.to_vec()).ok()
    }

    pub fn scaled(&self, factor: f64) -> SaliencyMap {
        SaliencyMap {
            scores: self.scores.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    /// Token indices sorted by descending score; ties keep index order.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        idx
    }
}
