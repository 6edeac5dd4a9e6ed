//! Central finite-difference check of attention gradients.
//!
//! Each attention entry is perturbed on its own through the post-softmax
//! override hook, leaving every other entry of that layer untouched; the rest
//! of the network recomputes normally. Layers before the perturbed one, and
//! layers the perturbation cannot reach, are not replayed.

use super::{LossSpec, ToyError, ToyInputs, ToyModel};
use crate::exec::Exec;

pub const FD_EPSILON: f64 = 1e-3;

/// Gradients below this magnitude are compared in absolute terms.
const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: usize,
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`
    pub max_rel_error: f64,
    /// `(layer, head, row, col)` of the worst entry.
    pub worst: (usize, usize, usize, usize),
    pub worst_values: (f64, f64),
}

pub fn gradient_check(
    model: &ToyModel,
    inputs: &ToyInputs,
    loss: &LossSpec,
    eps: f64,
    exec: Exec,
) -> Result<GradCheckReport, ToyError> {
    let (out, grads) = model.attention_gradients(inputs, loss)?;

    let mut index = Vec::new();
    for (l, a) in out.attentions.iter().enumerate() {
        let (h, nq, nk) = a.dim();
        for head in 0..h {
            for i in 0..nq {
                for j in 0..nk {
                    index.push((l, head, i, j));
                }
            }
        }
    }

    let results = exec.map(&index, |&(l, h, i, j)| -> Result<f64, ToyError> {
        let eval = |delta: f64| {
            let mut att = out.attentions[l].clone();
            att[[h, i, j]] += delta;
            model.loss_with_override(&out, inputs, loss, l, &att)
        };
        Ok((eval(eps)? - eval(-eps)?) / (2.0 * eps))
    });

    let mut report = GradCheckReport {
        entries: index.len(),
        max_rel_error: 0.0,
        worst: (0, 0, 0, 0),
        worst_values: (0.0, 0.0),
    };
    for (&(l, h, i, j), numeric) in index.iter().zip(results) {
        let numeric = numeric?;
        let analytic = grads[l][[h, i, j]];
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
        if err > report.max_rel_error || !err.is_finite() {
            report.max_rel_error = err;
            report.worst = (l, h, i, j);
            report.worst_values = (analytic, numeric);
        }
    }
    Ok(report)
}
