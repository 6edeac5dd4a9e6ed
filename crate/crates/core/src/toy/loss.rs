use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use super::ToyError;

/// Denominator magnitude below which ratio losses are rejected.
const MIN_DENOMINATOR: f64 = 1e-12;

/// Scalar objective over one row of logits whose gradient drives the
/// attention correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    SingleLogit {
        target: usize,
    },
    /// `logit_a - logit_b`
    Difference {
        first: usize,
        second: usize,
    },
    /// `logit_a / logit_b`
    Ratio {
        first: usize,
        second: usize,
    },
    /// `(logit_a - logit_b) / logit_b`
    NormalizedDifference {
        first: usize,
        second: usize,
    },
}

impl LossSpec {
    pub fn targets(&self) -> Vec<usize> {
        match *self {
            LossSpec::SingleLogit { target } => vec![target],
            LossSpec::Difference { first, second }
            | LossSpec::Ratio { first, second }
            | LossSpec::NormalizedDifference { first, second } => vec![first, second],
        }
    }

    /// Loss value and its gradient w.r.t. `logits`.
    pub fn value_and_grad(
        &self,
        logits: ArrayView1<'_, f64>,
    ) -> Result<(f64, Array1<f64>), ToyError> {
        let classes = logits.len();
        if let Some(&t) = self.targets().iter().find(|&&t| t >= classes) {
            return Err(ToyError::LossTarget { target: t, classes });
        }
        let mut grad = Array1::zeros(classes);
        let value = match *self {
            LossSpec::SingleLogit { target } => {
                grad[target] = 1.0;
                logits[target]
            }
            LossSpec::Difference { first, second } => {
                grad[first] += 1.0;
                grad[second] -= 1.0;
                logits[first] - logits[second]
            }
            LossSpec::Ratio { first, second }
            | LossSpec::NormalizedDifference { first, second } => {
                let (a, b) = (logits[first], logits[second]);
                if b.abs() < MIN_DENOMINATOR {
                    return Err(ToyError::ZeroDenominator { class: second });
                }
                // (a - b) / b = a / b - 1: same gradient as the ratio
                grad[first] += 1.0 / b;
                grad[second] -= a / (b * b);
                match self {
                    LossSpec::Ratio { .. } => a / b,
                    _ => (a - b) / b,
                }
            }
        };
        Ok((value, grad))
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LossSpec::SingleLogit { target } => write!(f, "single:{target}"),
            LossSpec::Difference { first, second } => write!(f, "diff:{first},{second}"),
            LossSpec::Ratio { first, second } => write!(f, "ratio:{first},{second}"),
            LossSpec::NormalizedDifference { first, second } => {
                write!(f, "normdiff:{first},{second}")
            }
        }
    }
}

impl FromStr for LossSpec {
    type Err = String;

    /// `single:T`, `diff:A,B`, `ratio:A,B` or `normdiff:A,B`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, args) = s
            .split_once(':')
            .ok_or_else(|| format!("loss {s:?}: expected KIND:ARGS"))?;
        let nums = args
            .split(',')
            .map(|a| {
                a.trim()
                    .parse::<usize>()
                    .map_err(|e| format!("loss {s:?}: {e}"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        match (kind, nums.as_slice()) {
            ("single", &[target]) => Ok(LossSpec::SingleLogit { target }),
            ("diff", &[first, second]) => Ok(LossSpec::Difference { first, second }),
            ("ratio", &[first, second]) => Ok(LossSpec::Ratio { first, second }),
            ("normdiff", &[first, second]) => Ok(LossSpec::NormalizedDifference { first, second }),
            _ => Err(format!("loss {s:?}: unknown kind or wrong argument count")),
        }
    }
}
