//! COCO-style mask AP/AR, simplified: single IoU threshold, no crowd
//! annotations, medium and large size buckets only.

use serde::{Deserialize, Serialize};

use super::{EvalError, Mask};

/// COCO bucket edges (32², 96² px) relative to a 640x480 reference image.
const COCO_MEDIUM_FRACTION: f64 = 1024.0 / 307_200.0;
const COCO_LARGE_FRACTION: f64 = 9216.0 / 307_200.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationConfig {
    pub iou_min: f64,
    /// Ground truths with area in `[medium_min_area, large_min_area)` form the medium bucket.
    pub medium_min_area: usize,
    pub large_min_area: usize,
}

impl SegmentationConfig {
    /// Default buckets scaled to an image of `height x width` pixels, IoU 0.2.
    pub fn for_image(height: usize, width: usize) -> Self {
        let area = (height * width) as f64;
        SegmentationConfig {
            iou_min: 0.2,
            medium_min_area: (COCO_MEDIUM_FRACTION * area).round() as usize,
            large_min_area: (COCO_LARGE_FRACTION * area).round() as usize,
        }
    }

    pub fn with_iou_min(mut self, iou_min: f64) -> Self {
        self.iou_min = iou_min;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mask: Mask,
    pub confidence: f64,
}

/// Predictions and ground truths of one image.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageCase {
    pub predictions: Vec<Prediction>,
    pub ground_truths: Vec<Mask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScore {
    pub iou_min: f64,
    pub ap: f64,
    pub ar: f64,
    /// `None` when the bucket holds no ground truth.
    pub ap_medium: Option<f64>,
    pub ar_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub ar_large: Option<f64>,
    pub num_ground_truths: usize,
    pub num_predictions: usize,
}

/// Scores a single image.
pub fn score_masks(
    predictions: &[Prediction],
    ground_truths: &[Mask],
    cfg: &SegmentationConfig,
) -> Result<SegmentationScore, EvalError> {
    score_suite(
        &[ImageCase {
            predictions: predictions.to_vec(),
            ground_truths: ground_truths.to_vec(),
        }],
        cfg,
    )
}

/// Scores a set of images, accumulating detections across images in
/// global confidence order.
pub fn score_suite(
    cases: &[ImageCase],
    cfg: &SegmentationConfig,
) -> Result<SegmentationScore, EvalError> {
    let dims = cases
        .iter()
        .flat_map(|c| {
            c.ground_truths
                .iter()
                .chain(c.predictions.iter().map(|p| &p.mask))
        })
        .map(Mask::dim)
        .collect::<Vec<_>>();
    if let Some(&first) = dims.first() {
        if let Some(&bad) = dims.iter().find(|&&d| d != first) {
            return Err(EvalError::Dimension {
                expected: first,
                got: bad,
            });
        }
    }

    let all = evaluate_range(cases, cfg, 0, usize::MAX).ok_or(EvalError::NoGroundTruth)?;
    let medium = evaluate_range(cases, cfg, cfg.medium_min_area, cfg.large_min_area);
    let large = evaluate_range(cases, cfg, cfg.large_min_area, usize::MAX);
    Ok(SegmentationScore {
        iou_min: cfg.iou_min,
        ap: all.0,
        ar: all.1,
        ap_medium: medium.map(|m| m.0),
        ar_medium: medium.map(|m| m.1),
        ap_large: large.map(|m| m.0),
        ar_large: large.map(|m| m.1),
        num_ground_truths: cases.iter().map(|c| c.ground_truths.len()).sum(),
        num_predictions: cases.iter().map(|c| c.predictions.len()).sum(),
    })
}

/// `(AP, AR)` over ground truths with area in `[lo, hi)`, or `None` if there
/// are none. Ground truths outside the range are ignored: predictions that
/// match them, and unmatched predictions whose own area is out of range,
/// count neither as true nor false positives.
fn evaluate_range(
    cases: &[ImageCase],
    cfg: &SegmentationConfig,
    lo: usize,
    hi: usize,
) -> Option<(f64, f64)> {
    let in_range = |m: &Mask| (lo..hi).contains(&m.area());
    let mut detections: Vec<(f64, bool)> = Vec::new();
    let mut num_gt = 0usize;

    for case in cases {
        let ignored: Vec<bool> = case.ground_truths.iter().map(|g| !in_range(g)).collect();
        num_gt += ignored.iter().filter(|&&i| !i).count();
        let mut matched = vec![false; case.ground_truths.len()];

        let mut order: Vec<usize> = (0..case.predictions.len()).collect();
        order.sort_by(|&a, &b| {
            case.predictions[b]
                .confidence
                .total_cmp(&case.predictions[a].confidence)
        });
        for p in order {
            let pred = &case.predictions[p];
            // best unmatched non-ignored GT, falling back to ignored ones
            let mut best: Option<(usize, f64)> = None;
            for want_ignored in [false, true] {
                for (g, gt) in case.ground_truths.iter().enumerate() {
                    if matched[g] || ignored[g] != want_ignored {
                        continue;
                    }
                    let iou = pred.mask.iou(gt).expect("dimensions checked");
                    if iou >= cfg.iou_min && best.is_none_or(|b| iou > b.1) {
                        best = Some((g, iou));
                    }
                }
                if best.is_some() {
                    break;
                }
            }
            match best {
                Some((g, _)) => {
                    matched[g] = true;
                    if !ignored[g] {
                        detections.push((pred.confidence, true));
                    }
                }
                None if in_range(&pred.mask) => detections.push((pred.confidence, false)),
                None => {}
            }
        }
    }
    if num_gt == 0 {
        return None;
    }

    // stable sort keeps image order among equal confidences
    detections.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(detections.len());
    for (k, &(_, hit)) in detections.iter().enumerate() {
        tp += hit as usize;
        points.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // all-point interpolation: precision envelope, summed over recall steps
    let mut envelope = vec![0.0; points.len()];
    let mut running = 0.0f64;
    for i in (0..points.len()).rev() {
        running = running.max(points[i].1);
        envelope[i] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(recall, _)) in points.iter().enumerate() {
        if recall > prev_recall {
            ap += (recall - prev_recall) * envelope[i];
            prev_recall = recall;
        }
    }
    let ar = tp as f64 / num_gt as f64;
    Some((ap, ar))
}
