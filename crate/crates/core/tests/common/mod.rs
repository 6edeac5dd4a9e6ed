//! Random valid traces for property tests.
#![allow(dead_code)]

use hetattr::trace::{PatchGrid, SourceSlot};
use hetattr::{AttentionTrace, LayerKind, LayerRecord, StreamId, TokenMeta};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Shape knobs of [`random_trace`].
#[derive(Debug, Clone, Copy)]
pub struct TraceShape {
    pub layers: usize,
    /// Adds a third, non-source stream fed only by cross-attention.
    pub derived_stream: bool,
    pub noise_link: bool,
}

/// Row-stochastic `f32` attention from a softmax over Gaussian logits; about
/// one row in four is sharply peaked.
pub fn random_attention(rng: &mut ChaCha8Rng, heads: usize, nq: usize, nk: usize) -> Array3<f32> {
    let normal = Normal::new(0.0, 1.5).unwrap();
    let mut a = Array3::zeros((heads, nq, nk));
    for h in 0..heads {
        for i in 0..nq {
            let temp = if rng.random_bool(0.25) { 6.0 } else { 1.0 };
            let logits: Vec<f64> = (0..nk).map(|_| normal.sample(rng) * temp).collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..nk {
                a[[h, i, j]] = (e[j] / z) as f32;
            }
        }
    }
    a
}

pub fn random_gradient(rng: &mut ChaCha8Rng, heads: usize, nq: usize, nk: usize) -> Array3<f32> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    Array3::from_shape_simple_fn((heads, nq, nk), || normal.sample(rng) as f32)
}

/// A trace with random stream sizes and a random layer DAG that satisfies
/// every structural invariant: kinds follow from the query/key streams and
/// whether the query stream has been fused.
pub fn random_trace(seed: u64, shape: TraceShape) -> AttentionTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = rng.random_range(1..=3);
    let rows = rng.random_range(1..=3);
    let cols = rng.random_range(1..=3);
    let n1 = rows * cols + rng.random_range(0..=1);
    let n2 = rng.random_range(2..=5);
    let mut tokens = vec![
        TokenMeta {
            stream: StreamId(0),
            label: "image".into(),
            count: n1,
            cls_index: None,
            grid: Some(PatchGrid {
                rows,
                cols,
                offset: n1 - rows * cols,
            }),
            source: Some(SourceSlot::First),
            noise_link: shape.noise_link,
        },
        TokenMeta {
            stream: StreamId(1),
            label: "text".into(),
            count: n2,
            cls_index: Some(0),
            grid: None,
            source: Some(SourceSlot::Second),
            noise_link: false,
        },
    ];
    if shape.derived_stream {
        tokens.push(TokenMeta {
            stream: StreamId(2),
            label: "query".into(),
            count: rng.random_range(1..=4),
            cls_index: None,
            grid: None,
            source: None,
            noise_link: false,
        });
    }
    let counts: Vec<usize> = tokens.iter().map(|t| t.count).collect();
    let streams = tokens.len();

    let mut fused = vec![false; streams];
    let mut layers = Vec::with_capacity(shape.layers);
    for index in 0..shape.layers {
        // the derived stream has no self-information until it is fused
        let q = loop {
            let q = rng.random_range(0..streams);
            if q < 2 || fused[q] || rng.random_bool(0.5) {
                break q;
            }
        };
        let kv = if q == 2 && !fused[q] {
            rng.random_range(0..2)
        } else if rng.random_bool(0.5) {
            q
        } else {
            (q + rng.random_range(1..streams)) % streams
        };
        let kind = if q != kv {
            fused[q] = true;
            LayerKind::TypeB
        } else if fused[q] {
            LayerKind::TypeC
        } else {
            LayerKind::TypeA
        };
        let (nq, nk) = (counts[q], counts[kv]);
        layers.push(LayerRecord {
            index,
            kind,
            query_stream: StreamId(q as u32),
            kv_stream: StreamId(kv as u32),
            attention: random_attention(&mut rng, heads, nq, nk),
            gradient: random_gradient(&mut rng, heads, nq, nk),
        });
    }
    AttentionTrace {
        tokens,
        layers,
        loss_descriptor: format!("random seed={seed}"),
    }
}
