//! Connects per-layer corrected attention into end-to-end attribution.
//!
//! Every stream carries two matrices: its attribution toward the tokens of
//! source 1 and toward the tokens of source 2. Homogeneous layers compose by
//! rollout `S <- (I + Ā) S`; heterogeneous layers update the query stream with
//! `S_q <- S_q + Ā S_kv`, separately per source, so the two sources never mix.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Axis};
use thiserror::Error;

use crate::correction::{correct_and_average, CorrectionError, CorrectionMode};
use crate::exec::Exec;
use crate::saliency::SaliencyMap;
use crate::trace::{AttentionTrace, LayerKind, SourceSlot, StreamId, TokenMeta, Violation};

#[derive(Debug, Error)]
pub enum PropagationError {
    #[error("trace fails validation ({} violations), first: {}", .0.len(), .0[0])]
    InvalidTrace(Vec<Violation>),
    #[error("layer {layer}: {source}")]
    Correction {
        layer: usize,
        #[source]
        source: CorrectionError,
    },
    #[error("rollout needs a square map matching {rows} state rows, got {got:?}")]
    NotSquare { rows: usize, got: (usize, usize) },
    #[error("map is {map:?}, query state has {q_rows} rows and key/value state {kv_rows}")]
    Shape {
        map: (usize, usize),
        q_rows: usize,
        kv_rows: usize,
    },
    #[error("state column counts differ: {0:?} vs {1:?}")]
    SourceWidth((usize, usize), (usize, usize)),
    #[error("{0} has no state in this result")]
    UnknownStream(StreamId),
    #[error("{0} has no CLS index")]
    MissingCls(StreamId),
    #[error("{0} has no patch grid")]
    MissingGrid(StreamId),
    #[error("{0} is not a source stream")]
    NotSource(StreamId),
    #[error("row {row} out of range for {stream} with {count} tokens")]
    RowOutOfRange {
        stream: StreamId,
        row: usize,
        count: usize,
    },
}

/// Attribution of every token of `stream` toward the two sources.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamState {
    pub stream: StreamId,
    /// `[n_stream, n_source1]`
    pub to_source1: Array2<f64>,
    /// `[n_stream, n_source2]`
    pub to_source2: Array2<f64>,
}

impl StreamState {
    pub fn rows(&self) -> usize {
        self.to_source1.nrows()
    }

    pub fn toward(&self, slot: SourceSlot) -> &Array2<f64> {
        match slot {
            SourceSlot::First => &self.to_source1,
            SourceSlot::Second => &self.to_source2,
        }
    }

    fn toward_mut(&mut self, slot: SourceSlot) -> &mut Array2<f64> {
        match slot {
            SourceSlot::First => &mut self.to_source1,
            SourceSlot::Second => &mut self.to_source2,
        }
    }

    /// Entry state: identity toward its own source, zero toward the other.
    /// Streams that are not sources start at zero toward both.
    pub fn initial(
        stream: StreamId,
        rows: usize,
        slot: Option<SourceSlot>,
        n1: usize,
        n2: usize,
    ) -> Self {
        let mut s = StreamState {
            stream,
            to_source1: Array2::zeros((rows, n1)),
            to_source2: Array2::zeros((rows, n2)),
        };
        if let Some(slot) = slot {
            s.toward_mut(slot).diag_mut().fill(1.0);
        }
        s
    }

    pub fn is_finite(&self) -> bool {
        self.to_source1
            .iter()
            .chain(self.to_source2.iter())
            .all(|v| v.is_finite())
    }

    pub fn min_entry(&self) -> f64 {
        self.to_source1
            .iter()
            .chain(self.to_source2.iter())
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagateOptions {
    pub mode: CorrectionMode,
    /// Apply the noise link on streams flagged for it in the trace.
    pub noise_link: bool,
    pub exec: Exec,
}

impl PropagateOptions {
    pub fn new(mode: CorrectionMode) -> Self {
        PropagateOptions {
            mode,
            noise_link: false,
            exec: Exec::default(),
        }
    }

    pub fn with_noise_link(mut self, on: bool) -> Self {
        self.noise_link = on;
        self
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }
}

#[derive(Debug, Clone)]
pub struct PropagationResult {
    pub sources: (StreamId, StreamId),
    /// Final state of every stream touched by at least one layer.
    pub states: BTreeMap<StreamId, StreamState>,
    /// Own-source matrix of each source stream just before its first
    /// heterogeneous layer (or at the end, if it has none).
    pub homogeneous: BTreeMap<StreamId, Array2<f64>>,
    /// Corrected, head-averaged map of every layer, in trace order.
    pub layer_maps: Vec<Array2<f64>>,
    /// Streams the noise link was actually applied to.
    pub noise_linked: Vec<StreamId>,
    pub tokens: Vec<TokenMeta>,
}

impl PropagationResult {
    pub fn state(&self, stream: StreamId) -> Result<&StreamState, PropagationError> {
        self.states
            .get(&stream)
            .ok_or(PropagationError::UnknownStream(stream))
    }

    fn meta(&self, stream: StreamId) -> Result<&TokenMeta, PropagationError> {
        self.tokens
            .iter()
            .find(|t| t.stream == stream)
            .ok_or(PropagationError::UnknownStream(stream))
    }

    fn source_meta(&self, slot: SourceSlot) -> &TokenMeta {
        let id = match slot {
            SourceSlot::First => self.sources.0,
            SourceSlot::Second => self.sources.1,
        };
        self.meta(id).expect("sources are always declared")
    }

    /// Row `row` of the stream's final attribution, one map per source.
    pub fn row_interpretation(
        &self,
        stream: StreamId,
        row: usize,
    ) -> Result<(SaliencyMap, SaliencyMap), PropagationError> {
        let state = self.state(stream)?;
        if row >= state.rows() {
            return Err(PropagationError::RowOutOfRange {
                stream,
                row,
                count: state.rows(),
            });
        }
        let make = |slot| {
            let meta = self.source_meta(slot);
            SaliencyMap {
                stream: meta.stream,
                label: meta.label.clone(),
                scores: state.toward(slot).row(row).to_vec(),
                grid: meta.grid,
            }
        };
        Ok((make(SourceSlot::First), make(SourceSlot::Second)))
    }

    /// The CLS row of `stream` toward source 1 and source 2.
    pub fn cls_interpretation(
        &self,
        stream: StreamId,
    ) -> Result<(SaliencyMap, SaliencyMap), PropagationError> {
        let cls = self
            .meta(stream)?
            .cls_index
            .ok_or(PropagationError::MissingCls(stream))?;
        self.row_interpretation(stream, cls)
    }

    /// Total attention each token of a gridded source stream receives within
    /// that stream's homogeneous stage: column sums of its own-source matrix.
    pub fn patch_total_attention(&self, stream: StreamId) -> Result<SaliencyMap, PropagationError> {
        let meta = self.meta(stream)?;
        let grid = meta.grid.ok_or(PropagationError::MissingGrid(stream))?;
        let own = self
            .homogeneous
            .get(&stream)
            .ok_or(PropagationError::NotSource(stream))?;
        Ok(SaliencyMap {
            stream,
            label: meta.label.clone(),
            scores: own.sum_axis(Axis(0)).to_vec(),
            grid: Some(grid),
        })
    }
}

/// `out = q + Ā · kv` per source. The shared kernel of both step kinds.
fn residual_update(
    q: &StreamState,
    kv: &StreamState,
    map: &Array2<f64>,
) -> Result<StreamState, PropagationError> {
    if map.nrows() != q.rows() || map.ncols() != kv.rows() {
        return Err(PropagationError::Shape {
            map: map.dim(),
            q_rows: q.rows(),
            kv_rows: kv.rows(),
        });
    }
    if q.to_source1.ncols() != kv.to_source1.ncols()
        || q.to_source2.ncols() != kv.to_source2.ncols()
    {
        return Err(PropagationError::SourceWidth(
            (q.to_source1.ncols(), q.to_source2.ncols()),
            (kv.to_source1.ncols(), kv.to_source2.ncols()),
        ));
    }
    Ok(StreamState {
        stream: q.stream,
        to_source1: &q.to_source1 + &map.dot(&kv.to_source1),
        to_source2: &q.to_source2 + &map.dot(&kv.to_source2),
    })
}

/// Homogeneous rollout step: `(I + Ā) · state` for both source matrices.
pub fn rollout_step(
    state: &StreamState,
    map: &Array2<f64>,
) -> Result<StreamState, PropagationError> {
    if map.nrows() != map.ncols() || map.nrows() != state.rows() {
        return Err(PropagationError::NotSquare {
            rows: state.rows(),
            got: map.dim(),
        });
    }
    residual_update(state, state, map)
}

/// Heterogeneous step: the query stream keeps its own attribution (residual)
/// and adds `Ā` applied to the key/value stream's attribution, per source.
pub fn hetero_step(
    q_state: &StreamState,
    v_state: &StreamState,
    map: &Array2<f64>,
) -> Result<StreamState, PropagationError> {
    residual_update(q_state, v_state, map)
}

/// Removes the residual identity, normalizes each row of the remainder by its
/// sum and adds the identity back. Rows summing to zero pass through as is.
pub fn noise_link(a: &Array2<f64>) -> Result<Array2<f64>, PropagationError> {
    if a.nrows() != a.ncols() {
        return Err(PropagationError::NotSquare {
            rows: a.nrows(),
            got: a.dim(),
        });
    }
    let mut out = a.clone();
    out.diag_mut().mapv_inplace(|v| v - 1.0);
    for mut row in out.rows_mut() {
        let s: f64 = row.sum();
        if s != 0.0 {
            row.mapv_inplace(|v| v / s);
        }
    }
    out.diag_mut().mapv_inplace(|v| v + 1.0);
    Ok(out)
}

/// Runs correction and propagation over every layer of `trace`.
pub fn propagate(
    trace: &AttentionTrace,
    mode: CorrectionMode,
) -> Result<PropagationResult, PropagationError> {
    propagate_with(trace, &PropagateOptions::new(mode))
}

pub fn propagate_with(
    trace: &AttentionTrace,
    opts: &PropagateOptions,
) -> Result<PropagationResult, PropagationError> {
    let violations = trace.validate();
    if !violations.is_empty() {
        return Err(PropagationError::InvalidTrace(violations));
    }
    let sources = trace.sources().expect("validated trace has two sources");
    let count = |id| trace.token_meta(id).map(|m| m.count).unwrap_or(0);
    let (n1, n2) = (count(sources.0), count(sources.1));

    let layer_maps = opts
        .exec
        .map(&trace.layers, |l| {
            correct_and_average(l.attention.view(), l.gradient.view(), opts.mode)
        })
        .into_iter()
        .enumerate()
        .map(|(layer, r)| r.map_err(|source| PropagationError::Correction { layer, source }))
        .collect::<Result<Vec<_>, _>>()?;

    let mut states: BTreeMap<StreamId, StreamState> = trace
        .tokens
        .iter()
        .map(|m| {
            (
                m.stream,
                StreamState::initial(m.stream, m.count, m.source, n1, n2),
            )
        })
        .collect();

    // Noise link fires after the flagged stream's last layer as query (or
    // up front when it never is a query).
    let mut link_after: BTreeMap<Option<usize>, Vec<StreamId>> = BTreeMap::new();
    if opts.noise_link {
        for meta in trace.tokens.iter().filter(|m| m.noise_link) {
            let last = trace
                .layers
                .iter()
                .rposition(|l| l.query_stream == meta.stream);
            link_after.entry(last).or_default().push(meta.stream);
        }
    }
    let mut noise_linked = Vec::new();
    let mut apply_link = |states: &mut BTreeMap<StreamId, StreamState>,
                          streams: &[StreamId]|
     -> Result<(), PropagationError> {
        for &id in streams {
            let slot = trace
                .token_meta(id)
                .and_then(|m| m.source)
                .ok_or(PropagationError::NotSource(id))?;
            let st = states.get_mut(&id).expect("declared stream");
            let linked = noise_link(st.toward(slot))?;
            *st.toward_mut(slot) = linked;
            noise_linked.push(id);
        }
        Ok(())
    };
    if let Some(streams) = link_after.get(&None) {
        apply_link(&mut states, streams)?;
    }

    let mut homogeneous: BTreeMap<StreamId, Array2<f64>> = BTreeMap::new();
    let snapshot = |homogeneous: &mut BTreeMap<StreamId, Array2<f64>>,
                    states: &BTreeMap<StreamId, StreamState>,
                    id: StreamId| {
        if homogeneous.contains_key(&id) {
            return;
        }
        if let Some(slot) = trace.token_meta(id).and_then(|m| m.source) {
            homogeneous.insert(id, states[&id].toward(slot).clone());
        }
    };

    let mut touched = BTreeSet::new();
    for (pos, (layer, map)) in trace.layers.iter().zip(&layer_maps).enumerate() {
        touched.insert(layer.query_stream);
        touched.insert(layer.kv_stream);
        let next = match layer.kind {
            LayerKind::TypeA => rollout_step(&states[&layer.query_stream], map)?,
            LayerKind::TypeB | LayerKind::TypeC => {
                snapshot(&mut homogeneous, &states, layer.query_stream);
                hetero_step(&states[&layer.query_stream], &states[&layer.kv_stream], map)?
            }
        };
        states.insert(layer.query_stream, next);
        if let Some(streams) = link_after.get(&Some(pos)) {
            apply_link(&mut states, streams)?;
        }
    }
    for id in [sources.0, sources.1] {
        snapshot(&mut homogeneous, &states, id);
    }
    states.retain(|id, _| touched.contains(id));

    Ok(PropagationResult {
        sources,
        states,
        homogeneous,
        layer_maps,
        noise_linked,
        tokens: trace.tokens.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::trace::{LayerRecord, PatchGrid};
    use ndarray::{array, Array3};

    fn state(stream: u32, s1: Array2<f64>, s2: Array2<f64>) -> StreamState {
        StreamState {
            stream: StreamId(stream),
            to_source1: s1,
            to_source2: s2,
        }
    }

    fn eye(n: usize) -> Array2<f64> {
        Array2::eye(n)
    }

    #[test]
    fn rollout_zero_map_is_residual_only() {
        let s = state(0, array![[1.0, 2.0], [3.0, 4.0]], array![[0.5], [0.25]]);
        let out = rollout_step(&s, &Array2::zeros((2, 2))).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn rollout_identity_doubles() {
        let s = state(0, eye(3), Array2::zeros((3, 2)));
        let out = rollout_step(&s, &eye(3)).unwrap();
        assert_eq!(out.to_source1, eye(3) * 2.0);
        assert!(out.to_source2.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_rollout_steps_match_dense_product() {
        let a1 = array![[0.2, 0.1, 0.0], [0.3, 0.3, 0.4], [0.0, 0.5, 0.1]];
        let a2 = array![[0.6, 0.0, 0.2], [0.1, 0.1, 0.1], [0.7, 0.2, 0.0]];
        let s0 = state(
            0,
            array![[1.0, 0.5], [0.0, 2.0], [1.5, 0.25]],
            array![[1.0], [2.0], [3.0]],
        );
        let s = rollout_step(&rollout_step(&s0, &a1).unwrap(), &a2).unwrap();
        let m = oracle::matmul(&oracle::add_identity(&a2), &oracle::add_identity(&a1));
        for (got, init) in [
            (&s.to_source1, &s0.to_source1),
            (&s.to_source2, &s0.to_source2),
        ] {
            let want = oracle::matmul(&m, init);
            assert!(oracle::max_rel_diff(got, &want) < 1e-14);
        }
    }

    #[test]
    fn rollout_rejects_non_square() {
        let s = state(0, eye(2), Array2::zeros((2, 1)));
        assert!(matches!(
            rollout_step(&s, &Array2::zeros((2, 3))),
            Err(PropagationError::NotSquare { .. })
        ));
    }

    #[test]
    fn hetero_with_same_state_equals_rollout_bitwise() {
        let s = state(
            1,
            array![[0.3, 0.7], [0.1, 0.2]],
            array![[0.9, 0.0, 0.1], [0.4, 0.4, 0.2]],
        );
        let map = array![[0.123, 0.456], [0.789, 0.012]];
        assert_eq!(
            hetero_step(&s, &s, &map).unwrap(),
            rollout_step(&s, &map).unwrap()
        );
    }

    #[test]
    fn hetero_zero_kv_is_pure_residual() {
        let q = state(1, array![[0.3, 0.7]], array![[0.9, 0.1, 0.0]]);
        let v = state(0, Array2::zeros((4, 2)), Array2::zeros((4, 3)));
        let map = Array2::from_elem((1, 4), 0.25);
        assert_eq!(hetero_step(&q, &v, &map).unwrap(), q);
    }

    #[test]
    fn hetero_shape_mismatch() {
        let q = state(1, eye(2), Array2::zeros((2, 2)));
        let v = state(0, eye(2), Array2::zeros((2, 2)));
        assert!(matches!(
            hetero_step(&q, &v, &Array2::zeros((2, 3))),
            Err(PropagationError::Shape { .. })
        ));
    }

    #[test]
    fn noise_link_cases() {
        assert_eq!(noise_link(&eye(4)).unwrap(), eye(4));

        // I + R, every row of R sums to s = 2
        let r = array![[1.0, 0.5, 0.5], [0.0, 2.0, 0.0], [1.5, 0.25, 0.25]];
        let out = noise_link(&(eye(3) + &r)).unwrap();
        let want = eye(3) + &(r / 2.0);
        assert!(oracle::max_rel_diff(&out, &want) < 1e-15);

        assert!(noise_link(&Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn noise_link_zero_row_passes_through() {
        let a = array![[1.0, 0.0], [0.5, 1.5]];
        let out = noise_link(&a).unwrap();
        assert_eq!(out.row(0), a.row(0));
        assert_eq!(out[[1, 1]], 1.5); // row 1 of A - I is [0.5, 0.5]: sum 1
    }

    fn single_stream_trace(
        att: Array3<f32>,
        grad: Array3<f32>,
        grid: Option<PatchGrid>,
    ) -> AttentionTrace {
        let n = att.dim().1;
        AttentionTrace {
            tokens: vec![
                TokenMeta {
                    stream: StreamId(0),
                    label: "image".into(),
                    count: n,
                    cls_index: Some(0),
                    grid,
                    source: Some(SourceSlot::First),
                    noise_link: false,
                },
                TokenMeta {
                    stream: StreamId(1),
                    label: "text".into(),
                    count: 2,
                    cls_index: None,
                    grid: None,
                    source: Some(SourceSlot::Second),
                    noise_link: false,
                },
            ],
            layers: vec![LayerRecord {
                index: 0,
                kind: LayerKind::TypeA,
                query_stream: StreamId(0),
                kv_stream: StreamId(0),
                attention: att,
                gradient: grad,
            }],
            loss_descriptor: String::new(),
        }
    }

    #[test]
    fn patch_totals_uniform_layer_sum_to_two() {
        let n = 4;
        let att = Array3::from_elem((2, n, n), 0.25f32);
        let grad = Array3::ones((2, n, n));
        let grid = Some(PatchGrid {
            rows: 2,
            cols: 2,
            offset: 0,
        });
        let res = propagate(
            &single_stream_trace(att, grad, grid),
            CorrectionMode::Positive,
        )
        .unwrap();
        let totals = res.patch_total_attention(StreamId(0)).unwrap();
        assert!(
            totals.scores.iter().all(|&v| (v - 2.0).abs() < 1e-12),
            "{totals:?}"
        );
        assert!(matches!(
            res.patch_total_attention(StreamId(1)),
            Err(PropagationError::MissingGrid(_))
        ));
    }

    #[test]
    fn zero_gradient_keeps_identity_and_cls_one_hot() {
        let n = 3;
        let att = Array3::from_elem((1, n, n), 1.0 / 3.0);
        let grad = Array3::zeros((1, n, n));
        let res = propagate(&single_stream_trace(att, grad, None), CorrectionMode::Full).unwrap();
        let st = res.state(StreamId(0)).unwrap();
        assert_eq!(st.to_source1, eye(3));
        let (own, other) = res.cls_interpretation(StreamId(0)).unwrap();
        assert_eq!(own.scores, vec![1.0, 0.0, 0.0]);
        assert!(other.scores.iter().all(|&v| v == 0.0));
        // stream 1 has no layers, so no state
        assert!(res.state(StreamId(1)).is_err());
    }

    #[test]
    fn missing_cls_is_an_error() {
        let n = 3;
        let mut t = single_stream_trace(
            Array3::from_elem((1, n, n), 1.0 / 3.0),
            Array3::zeros((1, n, n)),
            None,
        );
        t.tokens[0].cls_index = None;
        let res = propagate(&t, CorrectionMode::Full).unwrap();
        assert!(matches!(
            res.cls_interpretation(StreamId(0)),
            Err(PropagationError::MissingCls(_))
        ));
    }

    #[test]
    fn invalid_trace_rejected() {
        let n = 3;
        let t = single_stream_trace(
            Array3::from_elem((1, n, n), 0.5),
            Array3::zeros((1, n, n)),
            None,
        );
        assert!(matches!(
            propagate(&t, CorrectionMode::Full),
            Err(PropagationError::InvalidTrace(_))
        ));
    }
}
