//! Attention trace data model: token streams, per-layer attention records
//! and the invariants a trace must satisfy before attribution.

use std::collections::{HashMap, HashSet};
use std::fmt;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

/// Row sums of recorded attention may deviate from 1 by at most this much.
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StreamId(pub u32);

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stream {}", self.0)
    }
}

/// Structural class of an attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    /// Self-attention on a stream that has not yet received cross-stream input.
    #[serde(rename = "A")]
    TypeA,
    /// Cross (co-)attention: queries from one stream, keys/values from another.
    #[serde(rename = "B")]
    TypeB,
    /// Self-attention on a stream already fused by an earlier `TypeB` layer.
    #[serde(rename = "C")]
    TypeC,
}

impl LayerKind {
    pub fn is_heterogeneous(self) -> bool {
        !matches!(self, LayerKind::TypeA)
    }

    pub fn letter(self) -> char {
        match self {
            LayerKind::TypeA => 'A',
            LayerKind::TypeB => 'B',
            LayerKind::TypeC => 'C',
        }
    }
}

/// Which of the two information sources a stream originates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SourceSlot {
    #[serde(rename = "source1")]
    First,
    #[serde(rename = "source2")]
    Second,
}

/// 2-D patch layout of a contiguous token range `offset..offset + rows * cols`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenMeta {
    pub stream: StreamId,
    pub label: String,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cls_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<PatchGrid>,
    /// Set on exactly two streams: the information sources attribution is split over.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<SourceSlot>,
    /// Apply the noise link to this stream once its last self-update is done
    /// (encoder output of an encoder-decoder topology).
    #[serde(default)]
    pub noise_link: bool,
}

/// One attention layer: probabilities and loss gradients w.r.t. those
/// probabilities, both shaped `[heads, n_query, n_key]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub index: usize,
    pub kind: LayerKind,
    pub query_stream: StreamId,
    pub kv_stream: StreamId,
    pub attention: Array3<f32>,
    pub gradient: Array3<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub tokens: Vec<TokenMeta>,
    pub layers: Vec<LayerRecord>,
    pub loss_descriptor: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Invariant {
    StreamUnique,
    TwoSources,
    ClsRange,
    GridRange,
    NoiseLinkSource,
    KnownStream,
    LayerOrder,
    KindStreams,
    FusionOrdering,
    UnfusedSelf,
    HeadCount,
    ShapeMatch,
    TokenCount,
    Finite,
    Nonnegative,
    RowStochastic,
}

impl Invariant {
    pub fn name(self) -> &'static str {
        match self {
            Invariant::StreamUnique => "stream-unique",
            Invariant::TwoSources => "two-sources",
            Invariant::ClsRange => "cls-range",
            Invariant::GridRange => "grid-range",
            Invariant::NoiseLinkSource => "noise-link-source",
            Invariant::KnownStream => "known-stream",
            Invariant::LayerOrder => "layer-order",
            Invariant::KindStreams => "kind-streams",
            Invariant::FusionOrdering => "fusion-ordering",
            Invariant::UnfusedSelf => "unfused-self",
            Invariant::HeadCount => "head-count",
            Invariant::ShapeMatch => "shape-match",
            Invariant::TokenCount => "token-count",
            Invariant::Finite => "finite",
            Invariant::Nonnegative => "nonnegative",
            Invariant::RowStochastic => "row-stochastic",
        }
    }
}

impl fmt::Display for Invariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub invariant: Invariant,
    /// Position in `AttentionTrace::layers`, when the violation is layer-local.
    pub layer: Option<usize>,
    pub stream: Option<StreamId>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.layer, self.stream) {
            (Some(l), _) => write!(f, "layer {l}: {}: {}", self.invariant, self.detail),
            (None, Some(s)) => write!(f, "{s}: {}: {}", self.invariant, self.detail),
            (None, None) => write!(f, "{}: {}", self.invariant, self.detail),
        }
    }
}

impl AttentionTrace {
    pub fn token_meta(&self, stream: StreamId) -> Option<&TokenMeta> {
        self.tokens.iter().find(|t| t.stream == stream)
    }

    /// The (source1, source2) streams, if exactly one stream holds each slot.
    pub fn sources(&self) -> Option<(StreamId, StreamId)> {
        let pick = |slot| {
            let mut it = self.tokens.iter().filter(move |t| t.source == Some(slot));
            match (it.next(), it.next()) {
                (Some(t), None) => Some(t.stream),
                _ => None,
            }
        };
        Some((pick(SourceSlot::First)?, pick(SourceSlot::Second)?))
    }

    /// Checks every structural and numerical invariant. Never aborts early;
    /// all violations found are returned.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |invariant, layer, stream, detail: String| {
            out.push(Violation {
                invariant,
                layer,
                stream,
                detail,
            })
        };

        let mut counts: HashMap<StreamId, usize> = HashMap::new();
        for meta in &self.tokens {
            if counts.insert(meta.stream, meta.count).is_some() {
                push(
                    Invariant::StreamUnique,
                    None,
                    Some(meta.stream),
                    "declared more than once".into(),
                );
            }
            if let Some(cls) = meta.cls_index {
                if cls >= meta.count {
                    push(
                        Invariant::ClsRange,
                        None,
                        Some(meta.stream),
                        format!("cls index {cls} >= token count {}", meta.count),
                    );
                }
            }
            if let Some(grid) = meta.grid {
                if grid.is_empty() || grid.offset + grid.len() > meta.count {
                    push(
                        Invariant::GridRange,
                        None,
                        Some(meta.stream),
                        format!(
                            "grid {}x{} at offset {} does not fit {} tokens",
                            grid.rows, grid.cols, grid.offset, meta.count
                        ),
                    );
                }
            }
            if meta.noise_link && meta.source.is_none() {
                push(
                    Invariant::NoiseLinkSource,
                    None,
                    Some(meta.stream),
                    "noise link flagged on a non-source stream".into(),
                );
            }
        }
        for slot in [SourceSlot::First, SourceSlot::Second] {
            let n = self
                .tokens
                .iter()
                .filter(|t| t.source == Some(slot))
                .count();
            if n != 1 {
                push(
                    Invariant::TwoSources,
                    None,
                    None,
                    format!("{n} streams declared as {slot:?} source, expected 1"),
                );
            }
        }

        let mut fused: HashSet<StreamId> = HashSet::new();
        for (pos, layer) in self.layers.iter().enumerate() {
            let at = Some(pos);
            if layer.index != pos {
                push(
                    Invariant::LayerOrder,
                    at,
                    None,
                    format!("record index {} at position {pos}", layer.index),
                );
            }
            let nq = counts.get(&layer.query_stream).copied();
            let nk = counts.get(&layer.kv_stream).copied();
            for (role, id, n) in [
                ("query", layer.query_stream, nq),
                ("key/value", layer.kv_stream, nk),
            ] {
                if n.is_none() {
                    push(
                        Invariant::KnownStream,
                        at,
                        Some(id),
                        format!("{role} stream not declared"),
                    );
                }
            }

            let same = layer.query_stream == layer.kv_stream;
            match layer.kind {
                LayerKind::TypeA | LayerKind::TypeC if !same => push(
                    Invariant::KindStreams,
                    at,
                    None,
                    format!("self-attention kind {:?} with distinct streams", layer.kind),
                ),
                LayerKind::TypeB if same => push(
                    Invariant::KindStreams,
                    at,
                    None,
                    "cross-attention with identical query and key/value streams".into(),
                ),
                _ => {}
            }
            match layer.kind {
                LayerKind::TypeC if !fused.contains(&layer.query_stream) => push(
                    Invariant::FusionOrdering,
                    at,
                    Some(layer.query_stream),
                    "fused self-attention before any cross-attention into this stream".into(),
                ),
                LayerKind::TypeA if fused.contains(&layer.query_stream) => push(
                    Invariant::UnfusedSelf,
                    at,
                    Some(layer.query_stream),
                    "homogeneous self-attention on an already fused stream".into(),
                ),
                _ => {}
            }
            if layer.kind == LayerKind::TypeB {
                fused.insert(layer.query_stream);
            }

            let (h, rows, cols) = layer.attention.dim();
            if h == 0 {
                push(Invariant::HeadCount, at, None, "zero heads".into());
            }
            if layer.attention.dim() != layer.gradient.dim() {
                push(
                    Invariant::ShapeMatch,
                    at,
                    None,
                    format!(
                        "attention {:?} vs gradient {:?}",
                        layer.attention.dim(),
                        layer.gradient.dim()
                    ),
                );
            }
            if let (Some(nq), Some(nk)) = (nq, nk) {
                if rows != nq || cols != nk {
                    push(
                        Invariant::TokenCount,
                        at,
                        None,
                        format!("attention is {rows}x{cols}, streams have {nq}x{nk} tokens"),
                    );
                }
            }

            let finite = layer.attention.iter().all(|v| v.is_finite())
                && layer.gradient.iter().all(|v| v.is_finite());
            if !finite {
                push(
                    Invariant::Finite,
                    at,
                    None,
                    "non-finite tensor entry".into(),
                );
                continue;
            }
            if let Some(v) = layer.attention.iter().find(|&&v| v < 0.0) {
                push(
                    Invariant::Nonnegative,
                    at,
                    None,
                    format!("negative attention probability {v}"),
                );
            }
            let mut worst: Option<(usize, usize, f64)> = None;
            for (head, mat) in layer.attention.axis_iter(Axis(0)).enumerate() {
                for (row, r) in mat.axis_iter(Axis(0)).enumerate() {
                    let sum: f64 = r.iter().map(|&v| v as f64).sum();
                    let dev = (sum - 1.0).abs();
                    if dev > ROW_SUM_TOLERANCE && worst.is_none_or(|w| dev > (w.2 - 1.0).abs()) {
                        worst = Some((head, row, sum));
                    }
                }
            }
            if let Some((head, row, sum)) = worst {
                push(
                    Invariant::RowStochastic,
                    at,
                    None,
                    format!("head {head} row {row} sums to {sum}"),
                );
            }
        }
        out
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use ndarray::Array3;

    pub(crate) fn uniform(h: usize, nq: usize, nk: usize) -> Array3<f32> {
        Array3::from_elem((h, nq, nk), 1.0 / nk as f32)
    }

    fn meta(id: u32, count: usize, source: Option<SourceSlot>) -> TokenMeta {
        TokenMeta {
            stream: StreamId(id),
            label: format!("s{id}"),
            count,
            cls_index: None,
            grid: None,
            source,
            noise_link: false,
        }
    }

    fn layer(index: usize, kind: LayerKind, q: u32, kv: u32, nq: usize, nk: usize) -> LayerRecord {
        LayerRecord {
            index,
            kind,
            query_stream: StreamId(q),
            kv_stream: StreamId(kv),
            attention: uniform(2, nq, nk),
            gradient: Array3::zeros((2, nq, nk)),
        }
    }

    /// Two sources (3 and 4 tokens): A on 0, B 1<-0, C on 1, B 0<-1.
    fn well_formed() -> AttentionTrace {
        AttentionTrace {
            tokens: vec![
                meta(0, 3, Some(SourceSlot::First)),
                meta(1, 4, Some(SourceSlot::Second)),
            ],
            layers: vec![
                layer(0, LayerKind::TypeA, 0, 0, 3, 3),
                layer(1, LayerKind::TypeB, 1, 0, 4, 3),
                layer(2, LayerKind::TypeC, 1, 1, 4, 4),
                layer(3, LayerKind::TypeB, 0, 1, 3, 4),
            ],
            loss_descriptor: "single:0".into(),
        }
    }

    fn only(trace: &AttentionTrace) -> Violation {
        let v = trace.validate();
        assert_eq!(v.len(), 1, "expected exactly one violation, got {v:?}");
        v.into_iter().next().unwrap()
    }

    #[test]
    fn two_layer_type_a_trace_is_clean() {
        let trace = AttentionTrace {
            tokens: vec![
                meta(0, 5, Some(SourceSlot::First)),
                meta(1, 2, Some(SourceSlot::Second)),
            ],
            layers: vec![
                layer(0, LayerKind::TypeA, 0, 0, 5, 5),
                layer(1, LayerKind::TypeA, 0, 0, 5, 5),
            ],
            loss_descriptor: String::new(),
        };
        assert!(trace.validate().is_empty());
        assert!(well_formed().validate().is_empty());
    }

    #[test]
    fn row_sum_violation_names_layer() {
        let mut t = well_formed();
        t.layers[3].attention[[1, 2, 0]] -= 0.2;
        let v = only(&t);
        assert_eq!(v.invariant, Invariant::RowStochastic);
        assert_eq!(v.layer, Some(3));
        assert!(v.detail.contains("head 1 row 2"), "{}", v.detail);
    }

    #[test]
    fn within_tolerance_row_sum_is_accepted() {
        let mut t = well_formed();
        t.layers[0].attention[[0, 0, 0]] += 5e-6;
        assert!(t.validate().is_empty());
    }

    #[test]
    fn type_c_before_cross_is_fusion_ordering() {
        let mut t = well_formed();
        t.layers.swap(1, 2);
        t.layers[1].index = 1;
        t.layers[2].index = 2;
        let v = only(&t);
        assert_eq!(v.invariant, Invariant::FusionOrdering);
        assert_eq!(v.layer, Some(1));
    }

    #[test]
    fn type_a_after_fusion_is_reported() {
        let mut t = well_formed();
        t.layers.push(layer(4, LayerKind::TypeA, 1, 1, 4, 4));
        assert_eq!(only(&t).invariant, Invariant::UnfusedSelf);
    }

    type Breakage = Box<dyn Fn(&mut AttentionTrace)>;

    #[test]
    fn each_invariant_has_a_fixture() {
        let cases: Vec<(Invariant, Breakage)> = vec![
            (
                Invariant::StreamUnique,
                Box::new(|t| {
                    let mut m = meta(1, 4, None);
                    m.label = "dup".into();
                    t.tokens.push(m);
                }),
            ),
            (
                Invariant::TwoSources,
                Box::new(|t| t.tokens.push(meta(7, 1, Some(SourceSlot::First)))),
            ),
            (
                Invariant::ClsRange,
                Box::new(|t| t.tokens[0].cls_index = Some(3)),
            ),
            (
                Invariant::GridRange,
                Box::new(|t| {
                    t.tokens[1].grid = Some(PatchGrid {
                        rows: 2,
                        cols: 2,
                        offset: 1,
                    })
                }),
            ),
            (
                Invariant::NoiseLinkSource,
                Box::new(|t| {
                    let mut m = meta(9, 2, None);
                    m.noise_link = true;
                    t.tokens.push(m);
                }),
            ),
            (
                Invariant::KnownStream,
                Box::new(|t| {
                    t.layers.push(LayerRecord {
                        index: 4,
                        kind: LayerKind::TypeB,
                        query_stream: StreamId(0),
                        kv_stream: StreamId(5),
                        attention: uniform(2, 3, 2),
                        gradient: Array3::zeros((2, 3, 2)),
                    })
                }),
            ),
            (Invariant::LayerOrder, Box::new(|t| t.layers[2].index = 7)),
            (
                Invariant::KindStreams,
                Box::new(|t| t.layers[2].kind = LayerKind::TypeB),
            ),
            (
                Invariant::HeadCount,
                Box::new(|t| {
                    t.layers[0].attention = Array3::zeros((0, 3, 3));
                    t.layers[0].gradient = Array3::zeros((0, 3, 3));
                }),
            ),
            (
                Invariant::ShapeMatch,
                Box::new(|t| t.layers[0].gradient = Array3::zeros((1, 3, 3))),
            ),
            (
                Invariant::TokenCount,
                Box::new(|t| {
                    t.layers[0].attention = uniform(2, 2, 2);
                    t.layers[0].gradient = Array3::zeros((2, 2, 2));
                }),
            ),
            (
                Invariant::Finite,
                Box::new(|t| t.layers[2].gradient[[0, 0, 0]] = f32::NAN),
            ),
            (
                Invariant::Nonnegative,
                Box::new(|t| {
                    let a0 = t.layers[0].attention[[0, 0, 0]];
                    t.layers[0].attention[[0, 0, 0]] = -0.1;
                    t.layers[0].attention[[0, 0, 1]] += a0 + 0.1;
                }),
            ),
            (
                Invariant::RowStochastic,
                Box::new(|t| t.layers[1].attention[[0, 0, 0]] = 0.0),
            ),
        ];
        for (invariant, corrupt) in cases {
            let mut t = well_formed();
            corrupt(&mut t);
            let v = t.validate();
            assert!(
                v.iter().any(|x| x.invariant == invariant),
                "{invariant} not reported: {v:?}"
            );
            assert_eq!(v.len(), 1, "{invariant}: {v:?}");
        }
    }

    #[test]
    fn sources_are_resolved() {
        let t = well_formed();
        assert_eq!(t.sources(), Some((StreamId(0), StreamId(1))));
    }
}
