//! Brute-force reference implementations.
//!
//! Everything here is written with plain index loops and shares no code with
//! the production paths it checks (no ndarray products, no cumulative
//! histograms). Used by the test suites and by `selftest`.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::correction::CorrectionMode;
use crate::propagation::{propagate_with, PropagateOptions, PropagationError};
use crate::trace::{AttentionTrace, SourceSlot, StreamId};

pub fn matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    assert_eq!(a.ncols(), b.nrows(), "matmul shape");
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    for i in 0..a.nrows() {
        for j in 0..b.ncols() {
            let mut s = 0.0;
            for k in 0..a.ncols() {
                s += a[[i, k]] * b[[k, j]];
            }
            out[[i, j]] = s;
        }
    }
    out
}

pub fn add_identity(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for i in 0..a.nrows().min(a.ncols()) {
        out[[i, i]] += 1.0;
    }
    out
}

/// `max |a - b| / max(max |b|, 1e-300)`; infinite on shape mismatch.
pub fn max_rel_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    if a.dim() != b.dim() {
        return f64::INFINITY;
    }
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        diff = diff.max((x - y).abs());
        scale = scale.max(y.abs());
    }
    diff / scale.max(1e-300)
}

/// Scalar head-mean of `f(grad) * attention` for one layer.
pub fn corrected_map(trace: &AttentionTrace, layer: usize, mode: CorrectionMode) -> Array2<f64> {
    let rec = &trace.layers[layer];
    let (h, nq, nk) = rec.attention.dim();
    let mut out = Array2::zeros((nq, nk));
    for i in 0..nq {
        for j in 0..nk {
            let mut s = 0.0;
            for head in 0..h {
                let g = rec.gradient[[head, i, j]] as f64;
                let f = match mode {
                    CorrectionMode::Positive => {
                        if g > 0.0 {
                            g
                        } else {
                            0.0
                        }
                    }
                    CorrectionMode::Full => g,
                    CorrectionMode::Absolute => {
                        if g < 0.0 {
                            -g
                        } else {
                            g
                        }
                    }
                };
                s += f * rec.attention[[head, i, j]] as f64;
            }
            out[[i, j]] = s / h as f64;
        }
    }
    out
}

pub fn noise_link_scalar(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut out = a.clone();
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..n {
            s += a[[i, j]] - if i == j { 1.0 } else { 0.0 };
        }
        if s != 0.0 {
            for j in 0..n {
                let add = a[[i, j]] - if i == j { 1.0 } else { 0.0 };
                out[[i, j]] = add / s + if i == j { 1.0 } else { 0.0 };
            }
        }
    }
    out
}

/// End-to-end propagation by plain rollout on the block system.
///
/// All streams are concatenated into one token space of size `N`, and the
/// two sources into one column space `N1 + N2`. Each layer becomes an
/// `N x N` matrix `I + E` where `E` holds the corrected map in the
/// (query rows, key/value columns) block and is zero elsewhere; the global
/// state is left-multiplied by it. Returns per-stream `(to_source1, to_source2)`
/// blocks for every stream.
pub fn block_rollout(
    trace: &AttentionTrace,
    mode: CorrectionMode,
    noise_link: bool,
) -> BTreeMap<StreamId, (Array2<f64>, Array2<f64>)> {
    let mut offsets = BTreeMap::new();
    let mut total = 0;
    for meta in &trace.tokens {
        offsets.insert(meta.stream, (total, meta.count));
        total += meta.count;
    }
    let src = |slot| {
        trace
            .tokens
            .iter()
            .find(|m| m.source == Some(slot))
            .expect("source stream")
    };
    let (s1, s2) = (src(SourceSlot::First), src(SourceSlot::Second));
    let (n1, n2) = (s1.count, s2.count);
    let col_offset = |slot| match slot {
        SourceSlot::First => 0,
        SourceSlot::Second => n1,
    };

    let mut global = Array2::<f64>::zeros((total, n1 + n2));
    for meta in &trace.tokens {
        if let Some(slot) = meta.source {
            let (r0, n) = offsets[&meta.stream];
            for i in 0..n {
                global[[r0 + i, col_offset(slot) + i]] = 1.0;
            }
        }
    }

    let link_point = |id: StreamId| trace.layers.iter().rposition(|l| l.query_stream == id);
    let apply_link = |global: &mut Array2<f64>, id: StreamId| {
        let meta = trace.tokens.iter().find(|m| m.stream == id).unwrap();
        let slot = meta.source.expect("noise link on source stream");
        let (r0, n) = offsets[&id];
        let c0 = col_offset(slot);
        let mut block = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                block[[i, j]] = global[[r0 + i, c0 + j]];
            }
        }
        let linked = noise_link_scalar(&block);
        for i in 0..n {
            for j in 0..n {
                global[[r0 + i, c0 + j]] = linked[[i, j]];
            }
        }
    };
    let linked: Vec<StreamId> = if noise_link {
        trace
            .tokens
            .iter()
            .filter(|m| m.noise_link)
            .map(|m| m.stream)
            .collect()
    } else {
        Vec::new()
    };
    for &id in &linked {
        if link_point(id).is_none() {
            apply_link(&mut global, id);
        }
    }

    for (pos, layer) in trace.layers.iter().enumerate() {
        let map = corrected_map(trace, pos, mode);
        let (q0, nq) = offsets[&layer.query_stream];
        let (k0, nk) = offsets[&layer.kv_stream];
        let mut step = Array2::<f64>::zeros((total, total));
        for i in 0..total {
            step[[i, i]] = 1.0;
        }
        for i in 0..nq {
            for j in 0..nk {
                step[[q0 + i, k0 + j]] += map[[i, j]];
            }
        }
        global = matmul(&step, &global);
        for &id in &linked {
            if link_point(id) == Some(pos) {
                apply_link(&mut global, id);
            }
        }
    }

    let mut out = BTreeMap::new();
    for meta in &trace.tokens {
        let (r0, n) = offsets[&meta.stream];
        let mut a = Array2::zeros((n, n1));
        let mut b = Array2::zeros((n, n2));
        for i in 0..n {
            for j in 0..n1 {
                a[[i, j]] = global[[r0 + i, j]];
            }
            for j in 0..n2 {
                b[[i, j]] = global[[r0 + i, n1 + j]];
            }
        }
        out.insert(meta.stream, (a, b));
    }
    out
}

/// Largest [`max_rel_diff`] between the engine's final states and
/// [`block_rollout`], over every stream the engine reports and both sources.
pub fn block_discrepancy(
    trace: &AttentionTrace,
    mode: CorrectionMode,
    noise_link: bool,
) -> Result<f64, PropagationError> {
    let opts = PropagateOptions::new(mode).with_noise_link(noise_link);
    let engine = propagate_with(trace, &opts)?;
    let oracle = block_rollout(trace, mode, noise_link);
    let mut worst = 0.0f64;
    for (id, state) in &engine.states {
        let (a, b) = &oracle[id];
        worst = worst
            .max(max_rel_diff(&state.to_source1, a))
            .max(max_rel_diff(&state.to_source2, b));
    }
    Ok(worst)
}

/// Exhaustive Otsu scan: for every interior bin boundary, recomputes both
/// class weights and means directly from the binned values. Returns the
/// lowest boundary value whose between-class variance is within a relative
/// `1e-12` of the maximum.
pub fn otsu_brute_force(values: &[f64], bins: usize) -> Option<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) || bins < 2 {
        return None;
    }
    let width = (hi - lo) / bins as f64;
    let bin_of = |v: f64| (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1);
    let center = |b: usize| lo + (b as f64 + 0.5) * width;

    let mut scores = Vec::with_capacity(bins - 1);
    for t in 1..bins {
        let (mut n0, mut s0, mut n1, mut s1) = (0.0, 0.0, 0.0, 0.0);
        for &v in values {
            let b = bin_of(v);
            if b < t {
                n0 += 1.0;
                s0 += center(b);
            } else {
                n1 += 1.0;
                s1 += center(b);
            }
        }
        let var = if n0 == 0.0 || n1 == 0.0 {
            0.0
        } else {
            let total = n0 + n1;
            let (w0, w1) = (n0 / total, n1 / total);
            let d = s0 / n0 - s1 / n1;
            w0 * w1 * d * d
        };
        scores.push((t, var));
    }
    let best = scores.iter().map(|s| s.1).fold(0.0, f64::max);
    let t = scores
        .iter()
        .find(|s| s.1 >= best - 1e-12 * best)
        .map(|s| s.0)?;
    Some(lo + t as f64 * width)
}
