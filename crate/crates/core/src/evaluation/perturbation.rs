//! Token-deletion faithfulness curves.

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::exec::Exec;

/// Fractions of removable tokens deleted at each curve point.
pub const REMOVAL_FRACTIONS: [f64; 10] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    /// Remove highest-scored tokens first.
    Positive,
    /// Remove lowest-scored tokens first.
    Negative,
}

impl Polarity {
    pub fn name(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
        }
    }
}

/// One sample that can be re-evaluated with some of its tokens removed.
pub trait PerturbationTarget: Sync {
    /// Tokens in the perturbed stream.
    fn token_count(&self) -> usize;
    /// Token indices eligible for removal (e.g. everything but CLS).
    fn removable(&self) -> Vec<usize>;
    /// Attribution score per token of the perturbed stream.
    fn scores(&self) -> &[f64];
    fn label(&self) -> usize;
    /// Top-1 prediction with `removed` tokens masked out.
    fn predict(&self, removed: &[usize]) -> usize;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationResult {
    pub polarity: Polarity,
    pub fractions: Vec<f64>,
    /// Top-1 accuracy over the sample set at each fraction.
    pub curve: Vec<f64>,
    /// Trapezoidal area under `curve` over `fractions`.
    pub auc: f64,
}

/// Removal order for one sample. Ties keep index order.
fn removal_order(scores: &[f64], removable: &[usize], polarity: Polarity) -> Vec<usize> {
    let mut order = removable.to_vec();
    match polarity {
        Polarity::Positive => order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a])),
        Polarity::Negative => order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b])),
    }
    order
}

fn removal_count(fraction: f64, removable: usize) -> usize {
    // tolerance so that 0.3 * 10 removes 3, not 2
    ((fraction * removable as f64) + 1e-9).floor() as usize
}

pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum()
}

/// Accuracy curve under progressive token removal, on the standard grid.
pub fn perturbation_curve<T: PerturbationTarget>(
    samples: &[T],
    polarity: Polarity,
    exec: Exec,
) -> Result<PerturbationResult, EvalError> {
    let fractions = REMOVAL_FRACTIONS.to_vec();
    for (i, s) in samples.iter().enumerate() {
        if s.scores().len() != s.token_count() {
            return Err(EvalError::ScoreLength {
                sample: i,
                scores: s.scores().len(),
                tokens: s.token_count(),
            });
        }
        let removable = s.removable().len();
        let most = removal_count(*fractions.last().unwrap(), removable);
        if most >= s.token_count() {
            return Err(EvalError::RemovesEverything {
                requested: most,
                available: s.token_count(),
            });
        }
    }
    if samples.is_empty() {
        return Err(EvalError::Config("no samples".into()));
    }

    // hits[sample][fraction]
    let hits: Vec<Vec<bool>> = exec.map(samples, |s| {
        let removable = s.removable();
        let order = removal_order(s.scores(), &removable, polarity);
        fractions
            .iter()
            .map(|&f| s.predict(&order[..removal_count(f, removable.len())]) == s.label())
            .collect()
    });
    let curve: Vec<f64> = (0..fractions.len())
        .map(|k| hits.iter().filter(|h| h[k]).count() as f64 / samples.len() as f64)
        .collect();
    let auc = trapezoid(&fractions, &curve);
    Ok(PerturbationResult {
        polarity,
        fractions,
        curve,
        auc,
    })
}
