use std::collections::BTreeMap;

use ndarray::{s, Array2, Array3, Axis};

use super::{LossSpec, Topology, ToyError, ToyModel, IMAGE, SECOND};
use crate::trace::{AttentionTrace, LayerRecord, PatchGrid, SourceSlot, StreamId, TokenMeta};

/// Model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyInputs {
    /// Patch features `[grid rows * cols, d_model]`, row-major over the grid.
    pub patches: Array2<f64>,
    /// Text token ids (lxmert; token 0 is CLS). Empty for detr.
    pub text: Vec<usize>,
    /// Logit row the loss reads: always 0 for lxmert, a query index for detr.
    pub focus: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Tokens masked out as keys in every layer, per stream index.
    pub removed: [Vec<usize>; 2],
    /// Post-softmax attention substituted for the computed one, per layer.
    pub overrides: BTreeMap<usize, Array3<f64>>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    overridden: bool,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[output rows, classes]`
    pub logits: Array2<f64>,
    /// Post-softmax attention actually used, `[heads, n_query, n_key]` per layer.
    pub attentions: Vec<Array3<f64>>,
    caches: Vec<LayerCache>,
    /// Residual streams entering each layer, then the final streams.
    residuals: Vec<[Array2<f64>; 2]>,
}

impl ForwardOutput {
    pub fn prediction(&self, row: usize) -> usize {
        argmax(self.logits.row(row).iter().copied())
    }

    /// Softmax class probabilities of one output row.
    pub fn probabilities(&self, row: usize) -> Vec<f64> {
        let r = self.logits.row(row);
        let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = r.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }
}

pub(crate) fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

impl ToyModel {
    fn check_inputs(&self, inputs: &ToyInputs) -> Result<(), ToyError> {
        let cfg = &self.config;
        let want = (cfg.image_tokens(), cfg.d_model);
        if inputs.patches.dim() != want {
            return Err(ToyError::Input(format!(
                "patches are {:?}, expected {want:?}",
                inputs.patches.dim()
            )));
        }
        match cfg.topology {
            Topology::LxmertMini { .. } => {
                if inputs.text.len() != cfg.text_len {
                    return Err(ToyError::Input(format!(
                        "{} text tokens, expected {}",
                        inputs.text.len(),
                        cfg.text_len
                    )));
                }
                if let Some(&t) = inputs.text.iter().find(|&&t| t >= cfg.vocab) {
                    return Err(ToyError::Input(format!(
                        "token id {t} >= vocab {}",
                        cfg.vocab
                    )));
                }
            }
            Topology::DetrMini { .. } => {
                if !inputs.text.is_empty() {
                    return Err(ToyError::Input("detr_mini takes no text".into()));
                }
            }
        }
        if inputs.focus >= self.output_rows() {
            return Err(ToyError::Input(format!(
                "focus row {} >= {} output rows",
                inputs.focus,
                self.output_rows()
            )));
        }
        Ok(())
    }

    fn embed(&self, inputs: &ToyInputs) -> [Array2<f64>; 2] {
        let image = &inputs.patches + &self.image_pos;
        let second = match self.config.topology {
            Topology::LxmertMini { .. } => {
                let mut x = self.text_embed.select(Axis(0), &inputs.text);
                x += &self.text_pos;
                x
            }
            Topology::DetrMini { .. } => self.query_embed.clone(),
        };
        [image, second]
    }

    pub fn forward(
        &self,
        inputs: &ToyInputs,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput, ToyError> {
        self.check_inputs(inputs)?;
        let mut key_mask = [
            vec![false; self.config.tokens(IMAGE)],
            vec![false; self.config.tokens(SECOND)],
        ];
        for (stream, removed) in opts.removed.iter().enumerate() {
            for &t in removed {
                let n = key_mask[stream].len();
                *key_mask[stream]
                    .get_mut(t)
                    .ok_or_else(|| ToyError::Input(format!("removed token {t} >= {n}")))? = true;
            }
            if key_mask[stream].iter().all(|&m| m) {
                return Err(ToyError::AllKeysRemoved { stream });
            }
        }

        let mut x = self.embed(inputs);
        let mut attentions = Vec::with_capacity(self.plan.len());
        let mut caches = Vec::with_capacity(self.plan.len());
        let mut residuals = Vec::with_capacity(self.plan.len() + 1);
        for l in 0..self.plan.len() {
            residuals.push(x.clone());
            let (attn, cache) = self.layer(l, &mut x, &key_mask, opts.overrides.get(&l))?;
            attentions.push(attn);
            caches.push(cache);
        }
        residuals.push(x.clone());
        Ok(ForwardOutput {
            logits: self.readout(&x),
            attentions,
            caches,
            residuals,
        })
    }

    /// Loss with layer `layer`'s attention replaced by `attention`, replaying
    /// only what the replacement can change. `out` must be an unmasked pass
    /// on `inputs`.
    ///
    /// Layers that cannot reach the readout are skipped, and a later layer
    /// whose streams are both untouched takes its cached output.
    pub(crate) fn loss_with_override(
        &self,
        out: &ForwardOutput,
        inputs: &ToyInputs,
        loss: &LossSpec,
        layer: usize,
        attention: &Array3<f64>,
    ) -> Result<f64, ToyError> {
        let live = self.live_layers();
        if !live[layer] {
            return Ok(loss.value_and_grad(out.logits.row(inputs.focus))?.0);
        }
        let mut x = out.residuals[layer].clone();
        let no_mask = [
            vec![false; self.config.tokens(IMAGE)],
            vec![false; self.config.tokens(SECOND)],
        ];
        self.layer(layer, &mut x, &no_mask, Some(attention))?;
        let mut dirty = [false; 2];
        dirty[self.plan[layer].query] = true;
        for (l, &plan) in self.plan.iter().enumerate().skip(layer + 1) {
            if !live[l] {
                continue;
            }
            if dirty[plan.query] || dirty[plan.kv] {
                self.layer(l, &mut x, &no_mask, None)?;
                dirty[plan.query] = true;
            } else {
                x[plan.query].assign(&out.residuals[l + 1][plan.query]);
            }
        }
        let logits = self.readout(&x);
        Ok(loss.value_and_grad(logits.row(inputs.focus))?.0)
    }

    /// Whether each layer's output can influence the logits.
    fn live_layers(&self) -> Vec<bool> {
        let mut needed = [false; 2];
        needed[SECOND] = true;
        let mut live = vec![false; self.plan.len()];
        for (l, plan) in self.plan.iter().enumerate().rev() {
            if needed[plan.query] {
                live[l] = true;
                needed[plan.kv] = true;
            }
        }
        live
    }

    /// Applies layer `l` to the residual streams in place.
    fn layer(
        &self,
        l: usize,
        x: &mut [Array2<f64>; 2],
        key_mask: &[Vec<bool>; 2],
        override_attn: Option<&Array3<f64>>,
    ) -> Result<(Array3<f64>, LayerCache), ToyError> {
        let heads = self.config.heads;
        let dh = self.config.d_model / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let plan = &self.plan[l];
        let p = &self.layers[l];
        let q = x[plan.query].dot(&p.wq);
        let k = x[plan.kv].dot(&p.wk);
        let v = x[plan.kv].dot(&p.wv);
        let (nq, nk) = (q.nrows(), k.nrows());

        let (attn, overridden) = match override_attn {
            Some(ov) => {
                if ov.dim() != (heads, nq, nk) {
                    return Err(ToyError::Override {
                        layer: l,
                        expected: (heads, nq, nk),
                        got: ov.dim(),
                    });
                }
                (ov.clone(), true)
            }
            None => {
                let mut attn = Array3::zeros((heads, nq, nk));
                let mask = &key_mask[plan.kv];
                for h in 0..heads {
                    let cols = s![.., h * dh..(h + 1) * dh];
                    let scores = q.slice(cols).dot(&k.slice(cols).t());
                    for (i, row) in scores.outer_iter().enumerate() {
                        let m = row
                            .iter()
                            .zip(mask)
                            .filter(|(_, &masked)| !masked)
                            .map(|(&s, _)| s * scale)
                            .fold(f64::NEG_INFINITY, f64::max);
                        let mut z = 0.0;
                        for j in 0..nk {
                            if !mask[j] {
                                let e = (row[j] * scale - m).exp();
                                attn[[h, i, j]] = e;
                                z += e;
                            }
                        }
                        attn.slice_mut(s![h, i, ..]).mapv_inplace(|e| e / z);
                    }
                }
                (attn, false)
            }
        };

        let mut o = Array2::zeros((nq, self.config.d_model));
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            o.slice_mut(cols)
                .assign(&attn.index_axis(Axis(0), h).dot(&v.slice(cols)));
        }
        x[plan.query] += &o.dot(&p.wo);
        Ok((
            attn,
            LayerCache {
                q,
                k,
                v,
                overridden,
            },
        ))
    }

    fn readout(&self, x: &[Array2<f64>; 2]) -> Array2<f64> {
        match self.config.topology {
            Topology::LxmertMini { .. } => {
                let cls = x[SECOND].row(0);
                self.classifier.dot(&cls).insert_axis(Axis(0))
            }
            Topology::DetrMini { .. } => x[SECOND].dot(&self.classifier.t()),
        }
    }

    /// Reverse pass: gradient of `sum(dlogits * logits)` with respect to every
    /// layer's post-softmax attention tensor.
    pub fn backward(&self, out: &ForwardOutput, dlogits: &Array2<f64>) -> Vec<Array3<f64>> {
        let heads = self.config.heads;
        let d = self.config.d_model;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut dx = [
            Array2::<f64>::zeros((self.config.tokens(IMAGE), d)),
            Array2::<f64>::zeros((self.config.tokens(SECOND), d)),
        ];
        match self.config.topology {
            Topology::LxmertMini { .. } => {
                let g = dlogits.row(0).dot(&self.classifier);
                dx[SECOND].row_mut(0).assign(&g);
            }
            Topology::DetrMini { .. } => dx[SECOND] = dlogits.dot(&self.classifier),
        }

        let mut grads = vec![Array3::zeros((0, 0, 0)); self.plan.len()];
        for l in (0..self.plan.len()).rev() {
            let plan = self.plan[l];
            let p = &self.layers[l];
            let cache = &out.caches[l];
            let attn = &out.attentions[l];
            let g = dx[plan.query].clone();
            let d_o = g.dot(&p.wo.t());

            let (nq, nk) = (cache.q.nrows(), cache.k.nrows());
            let mut d_attn = Array3::zeros((heads, nq, nk));
            let mut dq = Array2::<f64>::zeros((nq, d));
            let mut dk = Array2::<f64>::zeros((nk, d));
            let mut dv = Array2::<f64>::zeros((nk, d));
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let ph = attn.index_axis(Axis(0), h);
                let doh = d_o.slice(cols);
                let dph = doh.dot(&cache.v.slice(cols).t());
                dv.slice_mut(cols).assign(&ph.t().dot(&doh));
                if !cache.overridden {
                    // softmax backward: dS = P * (dP - rowsum(dP * P))
                    let inner = (&dph * &ph).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ds = &ph * &(&dph - &inner);
                    dq.slice_mut(cols)
                        .assign(&(ds.dot(&cache.k.slice(cols)) * scale));
                    dk.slice_mut(cols)
                        .assign(&(ds.t().dot(&cache.q.slice(cols)) * scale));
                }
                d_attn.index_axis_mut(Axis(0), h).assign(&dph);
            }
            dx[plan.query] = &g + &dq.dot(&p.wq.t());
            let kv_grad = dk.dot(&p.wk.t()) + dv.dot(&p.wv.t());
            dx[plan.kv] += &kv_grad;
            grads[l] = d_attn;
        }
        grads
    }

    /// Scalar loss for `inputs` under `opts`.
    pub fn loss(
        &self,
        inputs: &ToyInputs,
        loss: &LossSpec,
        opts: &ForwardOptions,
    ) -> Result<f64, ToyError> {
        let out = self.forward(inputs, opts)?;
        Ok(loss.value_and_grad(out.logits.row(inputs.focus))?.0)
    }

    /// Forward pass plus analytic gradients of `loss` w.r.t. every layer's
    /// attention probabilities.
    pub fn attention_gradients(
        &self,
        inputs: &ToyInputs,
        loss: &LossSpec,
    ) -> Result<(ForwardOutput, Vec<Array3<f64>>), ToyError> {
        let out = self.forward(inputs, &ForwardOptions::default())?;
        let (_, g) = loss.value_and_grad(out.logits.row(inputs.focus))?;
        let mut dlogits = Array2::zeros(out.logits.dim());
        dlogits.row_mut(inputs.focus).assign(&g);
        let grads = self.backward(&out, &dlogits);
        Ok((out, grads))
    }

    /// Token metadata of the two streams as they appear in traces.
    pub fn token_meta(&self) -> Vec<TokenMeta> {
        let cfg = &self.config;
        let (rows, cols) = cfg.grid;
        let image = TokenMeta {
            stream: StreamId(IMAGE as u32),
            label: "image".into(),
            count: cfg.image_tokens(),
            cls_index: None,
            grid: Some(PatchGrid {
                rows,
                cols,
                offset: 0,
            }),
            source: Some(SourceSlot::First),
            noise_link: matches!(cfg.topology, Topology::DetrMini { .. }),
        };
        let second = match cfg.topology {
            Topology::LxmertMini { .. } => TokenMeta {
                stream: StreamId(SECOND as u32),
                label: "text".into(),
                count: cfg.text_len,
                cls_index: Some(0),
                grid: None,
                source: Some(SourceSlot::Second),
                noise_link: false,
            },
            Topology::DetrMini { .. } => TokenMeta {
                stream: StreamId(SECOND as u32),
                label: "query".into(),
                count: cfg.num_queries,
                cls_index: None,
                grid: None,
                source: Some(SourceSlot::Second),
                noise_link: false,
            },
        };
        vec![image, second]
    }

    /// Runs forward and backward and packages the result as a trace
    /// (tensors narrowed to `f32`).
    pub fn make_trace(
        &self,
        inputs: &ToyInputs,
        loss: &LossSpec,
    ) -> Result<AttentionTrace, ToyError> {
        let (out, grads) = self.attention_gradients(inputs, loss)?;
        let layers = self
            .plan
            .iter()
            .zip(out.attentions.iter().zip(&grads))
            .enumerate()
            .map(|(index, (plan, (a, g)))| LayerRecord {
                index,
                kind: plan.kind,
                query_stream: StreamId(plan.query as u32),
                kv_stream: StreamId(plan.kv as u32),
                attention: a.mapv(|v| v as f32),
                gradient: g.mapv(|v| v as f32),
            })
            .collect();
        Ok(AttentionTrace {
            tokens: self.token_meta(),
            layers,
            loss_descriptor: format!(
                "{} row={} model={} seed={}",
                loss,
                inputs.focus,
                self.config.topology.name(),
                self.config.seed
            ),
        })
    }
}
