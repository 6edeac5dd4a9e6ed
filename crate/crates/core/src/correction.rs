//! Head-wise gradient correction of attention maps.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// How the loss gradient modulates an attention map before head averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectionMode {
    /// `max(grad, 0) * A`
    Positive,
    /// `grad * A`, signed
    Full,
    /// `|grad| * A`
    Absolute,
}

impl CorrectionMode {
    pub const ALL: [CorrectionMode; 3] = [
        CorrectionMode::Positive,
        CorrectionMode::Full,
        CorrectionMode::Absolute,
    ];

    #[inline]
    pub fn apply(self, grad: f64) -> f64 {
        match self {
            CorrectionMode::Positive => grad.max(0.0),
            CorrectionMode::Full => grad,
            CorrectionMode::Absolute => grad.abs(),
        }
    }

    /// True when the corrected map is guaranteed entrywise nonnegative.
    pub fn is_nonnegative(self) -> bool {
        !matches!(self, CorrectionMode::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            CorrectionMode::Positive => "pos",
            CorrectionMode::Full => "full",
            CorrectionMode::Absolute => "abs",
        }
    }
}

impl fmt::Display for CorrectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorrectionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pos" | "positive" => Ok(CorrectionMode::Positive),
            "full" => Ok(CorrectionMode::Full),
            "abs" | "absolute" => Ok(CorrectionMode::Absolute),
            other => Err(format!(
                "unknown correction mode {other:?} (pos, full, abs)"
            )),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CorrectionError {
    #[error("attention is {attention:?} but gradient is {gradient:?} ([heads, n_query, n_key])")]
    ShapeMismatch {
        attention: (usize, usize, usize),
        gradient: (usize, usize, usize),
    },
    #[error("attention has no heads")]
    NoHeads,
}

/// Head mean of `f(grad) ⊙ attention`, shaped `[n_query, n_key]`.
///
/// Generic over the element type so that traces stored in `f32` and model
/// internals in `f64` share one code path; the arithmetic is always `f64`.
pub fn correct_and_average<T>(
    attention: ArrayView3<'_, T>,
    gradient: ArrayView3<'_, T>,
    mode: CorrectionMode,
) -> Result<Array2<f64>, CorrectionError>
where
    T: Copy + Into<f64>,
{
    if attention.dim() != gradient.dim() {
        return Err(CorrectionError::ShapeMismatch {
            attention: attention.dim(),
            gradient: gradient.dim(),
        });
    }
    let (heads, nq, nk) = attention.dim();
    if heads == 0 {
        return Err(CorrectionError::NoHeads);
    }
    let mut acc = Array2::<f64>::zeros((nq, nk));
    for (a, g) in attention
        .axis_iter(Axis(0))
        .zip(gradient.axis_iter(Axis(0)))
    {
        Zip::from(&mut acc).and(&a).and(&g).for_each(|o, &a, &g| {
            *o += mode.apply(g.into()) * a.into();
        });
    }
    acc.mapv_inplace(|v| v / heads as f64);
    Ok(acc)
}
