//! Segmentation and perturbation evaluation over planted fixtures.
//!
//! Explanations are always taken for a single logit: the predicted class of
//! each kept query for segmentation, the planted label for perturbation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correction::CorrectionMode;
use crate::evaluation::{
    binarize_and_upsample, perturbation_curve, score_suite, BinarizationConfig, EvalError,
    ImageCase, Mask, PerturbationResult, PerturbationTarget, Polarity, Prediction,
    SegmentationConfig, SegmentationScore,
};
use crate::exec::Exec;
use crate::fixtures::Fixture;
use crate::propagation::{propagate_with, PropagateOptions, PropagationError};
use crate::saliency::SaliencyMap;
use crate::toy::{ForwardOptions, LossSpec, ToyError, ToyInputs, ToyModel, IMAGE, SECOND};
use crate::trace::{AttentionTrace, StreamId};

/// Pixels per patch side when upsampling masks.
pub const MASK_UPSAMPLE: usize = 8;
/// Queries are kept for segmentation when their top class probability exceeds this.
pub const QUERY_MIN_PROBABILITY: f64 = 0.5;
/// The two binarization scales reported side by side.
pub const SEGMENTATION_SCALES: [f64; 2] = [1.0, 0.3];

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error("fixture {name}: {source}")]
    Toy { name: String, source: ToyError },
    #[error("fixture {name}: {source}")]
    Propagation {
        name: String,
        source: PropagationError,
    },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("no fixtures")]
    Empty,
}

/// A correction mode plus the noise-link switch, named as in reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Method {
    pub mode: CorrectionMode,
    pub noise_link: bool,
}

impl Method {
    pub const POS: Method = Method {
        mode: CorrectionMode::Positive,
        noise_link: false,
    };
    pub const ABS: Method = Method {
        mode: CorrectionMode::Absolute,
        noise_link: false,
    };
    pub const NOISED: Method = Method {
        mode: CorrectionMode::Positive,
        noise_link: true,
    };

    pub fn name(&self) -> String {
        if self.noise_link {
            match self.mode {
                CorrectionMode::Positive => "noised".into(),
                m => format!("{}+noise", m.name()),
            }
        } else {
            self.mode.name().into()
        }
    }

    fn options(&self, exec: Exec) -> PropagateOptions {
        PropagateOptions::new(self.mode)
            .with_noise_link(self.noise_link)
            .with_exec(exec)
    }
}

impl Fixture {
    fn toy_err(&self) -> impl FnOnce(ToyError) -> SuiteError + '_ {
        move |source| SuiteError::Toy {
            name: self.spec.name.clone(),
            source,
        }
    }

    fn prop_err(&self) -> impl FnOnce(PropagationError) -> SuiteError + '_ {
        move |source| SuiteError::Propagation {
            name: self.spec.name.clone(),
            source,
        }
    }

    /// Trace of `class`'s logit read at `row`. Reuses the stored trace when it
    /// is exactly that.
    fn single_logit_trace(&self, row: usize, class: usize) -> Result<AttentionTrace, SuiteError> {
        let loss = LossSpec::SingleLogit { target: class };
        if self.loss == loss && self.task.inputs.focus == row {
            return Ok(self.trace.clone());
        }
        let inputs = ToyInputs {
            focus: row,
            ..self.task.inputs.clone()
        };
        self.model
            .make_trace(&inputs, &loss)
            .map_err(self.toy_err())
    }

    /// Attribution of output row `row` toward the image and second streams.
    fn explain_row(
        &self,
        trace: &AttentionTrace,
        row: usize,
        method: Method,
        exec: Exec,
    ) -> Result<(SaliencyMap, SaliencyMap), SuiteError> {
        let result = propagate_with(trace, &method.options(exec)).map_err(self.prop_err())?;
        let second = StreamId(SECOND as u32);
        let token = self.model.token_meta()[SECOND].cls_index.unwrap_or(row);
        result
            .row_interpretation(second, token)
            .map_err(self.prop_err())
    }

    fn image_size(&self) -> (usize, usize) {
        let (r, c) = self.model.config().grid;
        (r * MASK_UPSAMPLE, c * MASK_UPSAMPLE)
    }

    fn ground_truths(&self) -> Vec<Mask> {
        let (rows, cols) = self.model.config().grid;
        let (h, w) = self.image_size();
        self.task
            .objects
            .iter()
            .map(|o| Mask::new(rows, cols, o.mask.clone()).upsample_nearest(h, w))
            .collect()
    }

    /// Segmentation predictions of every kept output row at each scale.
    /// Rows whose saliency is constant yield no prediction.
    pub fn segmentation_cases(
        &self,
        method: Method,
        scales: &[f64],
        exec: Exec,
    ) -> Result<Vec<ImageCase>, SuiteError> {
        let out = self
            .model
            .forward(&self.task.inputs, &ForwardOptions::default())
            .map_err(self.toy_err())?;
        let single_row = self.model.output_rows() == 1;
        let mut cases: Vec<ImageCase> = scales
            .iter()
            .map(|_| ImageCase {
                predictions: Vec::new(),
                ground_truths: self.ground_truths(),
            })
            .collect();
        for row in 0..self.model.output_rows() {
            let probs = out.probabilities(row);
            let class = out.prediction(row);
            if !single_row && probs[class] <= QUERY_MIN_PROBABILITY {
                continue;
            }
            let trace = self.single_logit_trace(row, class)?;
            let (image, _) = self.explain_row(&trace, row, method, exec)?;
            for (case, &scale) in cases.iter_mut().zip(scales) {
                match binarize_and_upsample(
                    &image,
                    &BinarizationConfig::new(scale),
                    self.image_size(),
                ) {
                    Ok(mask) => case.predictions.push(Prediction {
                        mask,
                        confidence: probs[class],
                    }),
                    Err(EvalError::NoSeparation) => {}
                    Err(e) => return Err(e.into()),
                }
            }
        }
        Ok(cases)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationRow {
    pub method: String,
    pub scale: f64,
    pub score: SegmentationScore,
}

/// One row per `(method, scale)`, methods outermost. All fixtures must share
/// an image size.
pub fn segmentation_report(
    fixtures: &[Fixture],
    methods: &[Method],
    scales: &[f64],
    exec: Exec,
) -> Result<Vec<SegmentationRow>, SuiteError> {
    let first = fixtures.first().ok_or(SuiteError::Empty)?;
    let (h, w) = first.image_size();
    let cfg = SegmentationConfig::for_image(h, w);
    let mut rows = Vec::new();
    for &method in methods {
        // per_fixture[f][scale]
        let per_fixture = exec
            .map(fixtures, |f| {
                f.segmentation_cases(method, scales, Exec::Sequential)
            })
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        for (k, &scale) in scales.iter().enumerate() {
            let cases: Vec<ImageCase> = per_fixture.iter().map(|c| c[k].clone()).collect();
            rows.push(SegmentationRow {
                method: method.name(),
                scale,
                score: score_suite(&cases, &cfg)?,
            });
        }
    }
    Ok(rows)
}

/// Token removal on one stream of a toy model input.
pub struct RemovalTarget<'a> {
    pub model: &'a ToyModel,
    pub inputs: &'a ToyInputs,
    pub stream: usize,
    pub scores: Vec<f64>,
    pub label: usize,
    pub removable: Vec<usize>,
}

impl PerturbationTarget for RemovalTarget<'_> {
    fn token_count(&self) -> usize {
        self.model.config().tokens(self.stream)
    }

    fn removable(&self) -> Vec<usize> {
        self.removable.clone()
    }

    fn scores(&self) -> &[f64] {
        &self.scores
    }

    fn label(&self) -> usize {
        self.label
    }

    fn predict(&self, removed: &[usize]) -> usize {
        let mut opts = ForwardOptions::default();
        opts.removed[self.stream] = removed.to_vec();
        // a failed pass counts as a miss
        self.model
            .forward(self.inputs, &opts)
            .map_or(usize::MAX, |out| out.prediction(self.inputs.focus))
    }
}

/// Perturbed stream, as labelled in reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Perturbed {
    Image,
    Text,
}

impl Perturbed {
    fn stream(self) -> usize {
        match self {
            Perturbed::Image => IMAGE,
            Perturbed::Text => SECOND,
        }
    }
}

impl Fixture {
    /// Whether the second stream is a text input that can be perturbed.
    pub fn has_text(&self) -> bool {
        self.model.token_meta()[SECOND].cls_index.is_some()
    }

    /// Removal target scored by `method`'s explanation of the planted label.
    pub fn removal_target(
        &self,
        stream: Perturbed,
        method: Method,
        exec: Exec,
    ) -> Result<RemovalTarget<'_>, SuiteError> {
        let focus = self.task.inputs.focus;
        let trace = self.single_logit_trace(focus, self.task.label)?;
        let (image, second) = self.explain_row(&trace, focus, method, exec)?;
        let scores = match stream {
            Perturbed::Image => image.scores,
            Perturbed::Text => second.scores,
        };
        Ok(self.target_with_scores(stream, scores))
    }

    /// Removal target with caller-supplied scores (e.g. a random baseline).
    /// Text targets never remove the CLS token.
    pub fn target_with_scores(&self, stream: Perturbed, scores: Vec<f64>) -> RemovalTarget<'_> {
        let s = stream.stream();
        let cls = self.model.token_meta()[s].cls_index;
        RemovalTarget {
            model: &self.model,
            inputs: &self.task.inputs,
            stream: s,
            scores,
            label: self.task.label,
            removable: (0..self.model.config().tokens(s))
                .filter(|&t| Some(t) != cls)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCurve {
    pub stream: Perturbed,
    pub samples: usize,
    pub result: PerturbationResult,
}

/// Negative and positive curves on image tokens (all fixtures), then on text
/// tokens (fixtures with a text stream, if any).
pub fn perturbation_report(
    fixtures: &[Fixture],
    method: Method,
    exec: Exec,
) -> Result<Vec<PerturbationCurve>, SuiteError> {
    if fixtures.is_empty() {
        return Err(SuiteError::Empty);
    }
    let mut curves = Vec::new();
    for stream in [Perturbed::Image, Perturbed::Text] {
        let chosen: Vec<&Fixture> = fixtures
            .iter()
            .filter(|f| stream == Perturbed::Image || f.has_text())
            .collect();
        if chosen.is_empty() {
            continue;
        }
        let targets = exec
            .map(&chosen, |f| {
                f.removal_target(stream, method, Exec::Sequential)
            })
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        for polarity in [Polarity::Negative, Polarity::Positive] {
            curves.push(PerturbationCurve {
                stream,
                samples: targets.len(),
                result: perturbation_curve(&targets, polarity, exec)?,
            });
        }
    }
    Ok(curves)
}

/// Mean positive-perturbation AUC over `draws` uniform random scorings.
pub fn random_baseline_auc(
    fixtures: &[Fixture],
    stream: Perturbed,
    draws: usize,
    seed: u64,
    exec: Exec,
) -> Result<f64, SuiteError> {
    if fixtures.is_empty() || draws == 0 {
        return Err(SuiteError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..draws {
        let targets: Vec<RemovalTarget<'_>> = fixtures
            .iter()
            .map(|f| {
                let n = f.model.config().tokens(stream.stream());
                f.target_with_scores(stream, (0..n).map(|_| rng.random::<f64>()).collect())
            })
            .collect();
        total += perturbation_curve(&targets, Polarity::Positive, exec)?.auc;
    }
    Ok(total / draws as f64)
}
