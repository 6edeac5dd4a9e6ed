//! Deterministic desk-scale transformers that emit real attention traces.
//!
//! Two topologies are provided:
//!
//! * `lxmert_mini`: an image stream and a text stream (CLS at token 0), each
//!   with its own self-attention stack, followed by cross blocks. One cross
//!   block is `text <- image`, `image <- text`, text self, image self, applied
//!   in that order. The classifier reads the text CLS token.
//! * `detr_mini`: an image encoder, then decoder layers over learned object
//!   queries (query self-attention, then `query <- image` cross-attention).
//!   A shared classifier is applied to every query.
//!
//! Attention sublayers are residual, `x_q += concat_h(P_h V_h) W_o` with
//! `P_h = softmax(Q_h K_h^T / sqrt(d_h))`; there are no feed-forward
//! sublayers. Parameters come from a seeded ChaCha stream; classifier rows are
//! wired to per-class patch patterns so that planted tasks are solvable
//! without training. All arithmetic is `f64`.

mod gradcheck;
mod loss;
mod model;
mod plant;

pub use gradcheck::{gradient_check, GradCheckReport, FD_EPSILON};
pub use loss::LossSpec;
pub use model::{ForwardOptions, ForwardOutput, ToyInputs};
pub use plant::{PlantedObject, PlantedTask};

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::LayerKind;

/// Stream index of the image tokens in both topologies.
pub const IMAGE: usize = 0;
/// Stream index of the text tokens (lxmert) or object queries (detr).
pub const SECOND: usize = 1;

#[derive(Debug, Error, PartialEq)]
pub enum ToyError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("input shape: {0}")]
    Input(String),
    #[error("attention override for layer {layer}: expected {expected:?}, got {got:?}")]
    Override {
        layer: usize,
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("loss target {target} out of range for {classes} classes")]
    LossTarget { target: usize, classes: usize },
    #[error("loss denominator logit {class} is zero")]
    ZeroDenominator { class: usize },
    #[error("every key of stream {stream} is removed")]
    AllKeysRemoved { stream: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Topology {
    LxmertMini {
        image_layers: usize,
        text_layers: usize,
        cross_layers: usize,
    },
    DetrMini {
        encoder_layers: usize,
        decoder_layers: usize,
    },
}

impl Topology {
    pub fn name(&self) -> &'static str {
        match self {
            Topology::LxmertMini { .. } => "lxmert_mini",
            Topology::DetrMini { .. } => "detr_mini",
        }
    }
}

/// Knobs of the hand wiring that makes planted tasks solvable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wiring {
    /// Std of projection weights is `weight_scale / sqrt(d_model)`.
    pub weight_scale: f64,
    /// Norm of the per-class patch pattern vectors.
    pub pattern_norm: f64,
    /// Per-dimension std of background patch features.
    pub background_sigma: f64,
    /// Norm of each classifier row.
    pub classifier_gain: f64,
    /// Per-head weight of the pattern-seeking term in cross layers read by
    /// the second stream.
    pub focus_gain: f64,
}

impl Default for Wiring {
    fn default() -> Self {
        Wiring {
            weight_scale: 0.5,
            pattern_norm: 4.0,
            background_sigma: 0.3,
            classifier_gain: 2.0,
            focus_gain: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub topology: Topology,
    pub d_model: usize,
    pub heads: usize,
    /// Image patch grid `(rows, cols)`; the image stream has `rows * cols` tokens.
    pub grid: (usize, usize),
    /// Text tokens including CLS (lxmert only).
    pub text_len: usize,
    pub vocab: usize,
    /// Object queries (detr only).
    pub num_queries: usize,
    pub num_classes: usize,
    pub seed: u64,
    #[serde(default)]
    pub wiring: Wiring,
}

impl ToyConfig {
    pub fn lxmert_mini(seed: u64) -> Self {
        ToyConfig {
            topology: Topology::LxmertMini {
                image_layers: 2,
                text_layers: 2,
                cross_layers: 2,
            },
            d_model: 16,
            heads: 2,
            grid: (6, 6),
            text_len: 8,
            vocab: 32,
            num_queries: 0,
            num_classes: 5,
            seed,
            wiring: Wiring::default(),
        }
    }

    pub fn detr_mini(seed: u64) -> Self {
        ToyConfig {
            topology: Topology::DetrMini {
                encoder_layers: 2,
                decoder_layers: 2,
            },
            num_queries: 4,
            text_len: 0,
            ..ToyConfig::lxmert_mini(seed)
        }
    }

    /// Reduced size used by exhaustive gradient checks: 8 tokens per stream.
    pub fn small(mut self) -> Self {
        self.grid = (2, 4);
        match self.topology {
            Topology::LxmertMini { .. } => self.text_len = 8,
            Topology::DetrMini { .. } => self.num_queries = 8,
        }
        self
    }

    pub fn image_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn second_tokens(&self) -> usize {
        match self.topology {
            Topology::LxmertMini { .. } => self.text_len,
            Topology::DetrMini { .. } => self.num_queries,
        }
    }

    pub fn tokens(&self, stream: usize) -> usize {
        if stream == IMAGE {
            self.image_tokens()
        } else {
            self.second_tokens()
        }
    }

    pub fn validate(&self) -> Result<(), ToyError> {
        let err = |m: String| Err(ToyError::Config(m));
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return err(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.image_tokens() == 0 {
            return err("empty image grid".into());
        }
        if self.num_classes < 2 || self.num_classes >= self.d_model {
            return err(format!(
                "num_classes {} must be in 2..d_model ({})",
                self.num_classes, self.d_model
            ));
        }
        match self.topology {
            Topology::LxmertMini {
                image_layers,
                text_layers,
                cross_layers,
            } => {
                if image_layers == 0 || text_layers == 0 || cross_layers == 0 {
                    return err("layer counts must be >= 1".into());
                }
                if self.text_len < 2 || self.vocab < 2 {
                    return err("need CLS plus at least one text token and vocab >= 2".into());
                }
            }
            Topology::DetrMini {
                encoder_layers,
                decoder_layers,
            } => {
                if encoder_layers == 0 || decoder_layers == 0 {
                    return err("layer counts must be >= 1".into());
                }
                if self.num_queries == 0 {
                    return err("need at least one query".into());
                }
            }
        }
        Ok(())
    }

    /// Layer schedule: (kind, query stream, key/value stream).
    pub fn plan(&self) -> Vec<PlanLayer> {
        let l = |kind, q, kv| PlanLayer { kind, query: q, kv };
        let mut plan = Vec::new();
        match self.topology {
            Topology::LxmertMini {
                image_layers,
                text_layers,
                cross_layers,
            } => {
                plan.extend((0..image_layers).map(|_| l(LayerKind::TypeA, IMAGE, IMAGE)));
                plan.extend((0..text_layers).map(|_| l(LayerKind::TypeA, SECOND, SECOND)));
                for _ in 0..cross_layers {
                    plan.push(l(LayerKind::TypeB, SECOND, IMAGE));
                    plan.push(l(LayerKind::TypeB, IMAGE, SECOND));
                    plan.push(l(LayerKind::TypeC, SECOND, SECOND));
                    plan.push(l(LayerKind::TypeC, IMAGE, IMAGE));
                }
            }
            Topology::DetrMini {
                encoder_layers,
                decoder_layers,
            } => {
                plan.extend((0..encoder_layers).map(|_| l(LayerKind::TypeA, IMAGE, IMAGE)));
                for d in 0..decoder_layers {
                    let kind = if d == 0 {
                        LayerKind::TypeA
                    } else {
                        LayerKind::TypeC
                    };
                    plan.push(l(kind, SECOND, SECOND));
                    plan.push(l(LayerKind::TypeB, SECOND, IMAGE));
                }
            }
        }
        plan
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanLayer {
    pub kind: LayerKind,
    pub query: usize,
    pub kv: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    config: ToyConfig,
    plan: Vec<PlanLayer>,
    layers: Vec<LayerParams>,
    image_pos: Array2<f64>,
    text_embed: Array2<f64>,
    text_pos: Array2<f64>,
    query_embed: Array2<f64>,
    /// `[classes, d_model]`
    classifier: Array2<f64>,
    /// `[classes, d_model]`
    patterns: Array2<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

/// Gram-Schmidt over Gaussian draws in the first `d - 1` coordinates; the last
/// coordinate is the bias slot of second-stream embeddings.
fn orthogonal_patterns(rng: &mut ChaCha8Rng, classes: usize, d: usize, norm: f64) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((classes, d));
    let mut c = 0;
    while c < classes {
        let mut v = gaussian(rng, 1, d, 1.0).row(0).to_owned();
        v[d - 1] = 0.0;
        for prev in out.rows().into_iter().take(c) {
            let proj = v.dot(&prev) / prev.dot(&prev);
            v.scaled_add(-proj, &prev);
        }
        if v.dot(&v).sqrt() > 1e-6 {
            out.row_mut(c).assign(&normalized(v, norm));
            c += 1;
        }
    }
    out
}

fn normalized(v: Array1<f64>, norm: f64) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        v * (norm / n)
    } else {
        v
    }
}

impl ToyModel {
    pub fn new(config: ToyConfig) -> Result<Self, ToyError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let w = config.wiring;
        let std = w.weight_scale / (d as f64).sqrt();
        let plan = config.plan();
        let layers = plan
            .iter()
            .map(|_| LayerParams {
                wq: gaussian(&mut rng, d, d, std),
                wk: gaussian(&mut rng, d, d, std),
                wv: gaussian(&mut rng, d, d, std),
                wo: gaussian(&mut rng, d, d, std),
            })
            .collect();
        let bias = d - 1;
        let image_pos = gaussian(&mut rng, config.image_tokens(), d, 0.1);
        let mut text_embed = gaussian(&mut rng, config.vocab.max(1), d, 1.0 / (d as f64).sqrt());
        let mut text_pos = gaussian(&mut rng, config.text_len, d, 0.1);
        let mut query_embed = gaussian(&mut rng, config.num_queries, d, 1.0 / (d as f64).sqrt());
        text_embed.column_mut(bias).fill(1.0);
        query_embed.column_mut(bias).fill(1.0);
        text_pos.column_mut(bias).fill(0.0);
        let patterns = orthogonal_patterns(&mut rng, config.num_classes, d, w.pattern_norm);

        let mut model = ToyModel {
            config,
            plan,
            layers,
            image_pos,
            text_embed,
            text_pos,
            query_embed,
            classifier: Array2::zeros((0, 0)),
            patterns,
        };
        model.wire_focus();
        model.wire_classifier();
        Ok(model)
    }

    /// Cross layers with the second stream as query get `q += g * x[bias] w`
    /// and `k += g * sum_c (x . u_c / |u_c|) w`, so queries prefer keys that
    /// carry a class pattern. `w` has unit norm within every head.
    fn wire_focus(&mut self) {
        let d = self.config.d_model;
        let heads = self.config.heads;
        let dh = d / heads;
        let g = self.config.wiring.focus_gain;
        let w = Array1::from_elem(d, 1.0 / (dh as f64).sqrt());
        let units: Vec<Array1<f64>> = self
            .patterns
            .rows()
            .into_iter()
            .map(|u| normalized(u.to_owned(), 1.0))
            .collect();
        for (plan, p) in self.plan.iter().zip(self.layers.iter_mut()) {
            if plan.kind == LayerKind::TypeB && plan.query == SECOND {
                let mut row = p.wq.row_mut(d - 1);
                row.scaled_add(g, &w);
                for u in &units {
                    for (i, &ui) in u.iter().enumerate() {
                        p.wk.row_mut(i).scaled_add(g * ui, &w);
                    }
                }
            }
        }
    }

    /// Classifier row `c` points along the image-pattern contribution of class
    /// `c` through the readout stream's cross layers: `sum_l u_c Wv_l Wo_l`.
    fn wire_classifier(&mut self) {
        let d = self.config.d_model;
        let mut classifier = Array2::zeros((self.config.num_classes, d));
        for (c, mut row) in classifier.rows_mut().into_iter().enumerate() {
            let u = self.patterns.row(c);
            let mut acc = Array1::zeros(d);
            for (plan, p) in self.plan.iter().zip(&self.layers) {
                if plan.kind == LayerKind::TypeB && plan.query == SECOND {
                    acc += &u.dot(&p.wv).dot(&p.wo);
                }
            }
            row.assign(&normalized(acc, self.config.wiring.classifier_gain));
        }
        self.classifier = classifier;
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn plan(&self) -> &[PlanLayer] {
        &self.plan
    }

    pub fn num_layers(&self) -> usize {
        self.plan.len()
    }

    pub fn layer_params(&self, layer: usize) -> &LayerParams {
        &self.layers[layer]
    }

    /// Direct parameter access, for constructing ablated models in tests.
    pub fn layer_params_mut(&mut self, layer: usize) -> &mut LayerParams {
        &mut self.layers[layer]
    }

    pub fn pattern(&self, class: usize) -> ndarray::ArrayView1<'_, f64> {
        self.patterns.row(class)
    }

    /// Rows of the logit matrix: 1 for lxmert (CLS), one per query for detr.
    pub fn output_rows(&self) -> usize {
        match self.config.topology {
            Topology::LxmertMini { .. } => 1,
            Topology::DetrMini { .. } => self.config.num_queries,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lxmert_plan_order() {
        let cfg = ToyConfig::lxmert_mini(1);
        let kinds: String = cfg.plan().iter().map(|p| p.kind.letter()).collect();
        assert_eq!(kinds, "AAAABBCCBBCC");
        let detr: String = ToyConfig::detr_mini(1)
            .plan()
            .iter()
            .map(|p| p.kind.letter())
            .collect();
        assert_eq!(detr, "AAABCB");
    }

    #[test]
    fn config_validation() {
        let mut cfg = ToyConfig::lxmert_mini(0);
        cfg.heads = 3;
        assert!(matches!(ToyModel::new(cfg), Err(ToyError::Config(_))));
        let mut cfg = ToyConfig::detr_mini(0);
        cfg.topology = Topology::DetrMini {
            encoder_layers: 0,
            decoder_layers: 1,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = ToyModel::new(ToyConfig::lxmert_mini(7)).unwrap();
        let b = ToyModel::new(ToyConfig::lxmert_mini(7)).unwrap();
        let c = ToyModel::new(ToyConfig::lxmert_mini(8)).unwrap();
        assert_eq!(a.layers, b.layers);
        assert_eq!(a.classifier, b.classifier);
        assert_ne!(a.layers, c.layers);
    }
}
