use serde::{Deserialize, Serialize};

use super::{EvalError, Mask};
use crate::saliency::SaliencyMap;

/// Relative slack under which two between-class variances count as tied.
const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinarizationConfig {
    /// Histogram bins spanning `[min, max]` of the scores.
    pub bins: usize,
    /// Foreground is `score >= scale * otsu_threshold`.
    pub scale: f64,
}

impl BinarizationConfig {
    pub fn new(scale: f64) -> Self {
        BinarizationConfig { bins: 256, scale }
    }

    fn check(&self) -> Result<(), EvalError> {
        if self.bins < 2 {
            return Err(EvalError::Config(format!("bins = {} < 2", self.bins)));
        }
        if !(self.scale > 0.0) {
            return Err(EvalError::Config(format!(
                "scale = {} must be > 0",
                self.scale
            )));
        }
        Ok(())
    }
}

impl Default for BinarizationConfig {
    fn default() -> Self {
        BinarizationConfig::new(1.0)
    }
}

/// Otsu threshold over a `bins`-bin histogram spanning the data range.
///
/// Candidates are the interior bin boundaries; each class is summarized by
/// the centers of its bins. Among boundaries attaining the maximal
/// between-class variance the lowest one is returned.
pub fn otsu_threshold(values: &[f64], bins: usize) -> Result<f64, EvalError> {
    if bins < 2 {
        return Err(EvalError::Config(format!("bins = {bins} < 2")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(EvalError::NoSeparation);
    }
    let width = (hi - lo) / bins as f64;

    let mut hist = vec![0u64; bins];
    for &v in values {
        let b = (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1);
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let center = |b: usize| lo + (b as f64 + 0.5) * width;
    let grand: f64 = hist
        .iter()
        .enumerate()
        .map(|(b, &n)| n as f64 * center(b))
        .sum();

    // variance[t - 1] belongs to boundary t, i.e. classes [0, t) and [t, bins)
    let mut variance = Vec::with_capacity(bins - 1);
    let (mut n0, mut s0) = (0.0, 0.0);
    for t in 1..bins {
        n0 += hist[t - 1] as f64;
        s0 += hist[t - 1] as f64 * center(t - 1);
        let n1 = total - n0;
        if n0 == 0.0 || n1 == 0.0 {
            variance.push(0.0);
            continue;
        }
        let d = s0 / n0 - (grand - s0) / n1;
        variance.push((n0 / total) * (n1 / total) * d * d);
    }
    let best = variance.iter().copied().fold(0.0, f64::max);
    let t = variance
        .iter()
        .position(|&v| v >= best - TIE_TOLERANCE * best)
        .expect("non-empty")
        + 1;
    Ok(lo + t as f64 * width)
}

/// Patch-resolution foreground mask of a gridded saliency map.
pub fn binarize(map: &SaliencyMap, cfg: &BinarizationConfig) -> Result<Mask, EvalError> {
    cfg.check()?;
    let grid = map.grid_scores().ok_or(EvalError::MissingGrid)?;
    let values: Vec<f64> = grid.iter().copied().collect();
    let cut = cfg.scale * otsu_threshold(&values, cfg.bins)?;
    Ok(Mask::from_fn(grid.nrows(), grid.ncols(), |r, c| {
        grid[[r, c]] >= cut
    }))
}

/// Thresholds at patch resolution, then nearest-neighbor upsamples to
/// `target = (height, width)`.
pub fn binarize_and_upsample(
    map: &SaliencyMap,
    cfg: &BinarizationConfig,
    target: (usize, usize),
) -> Result<Mask, EvalError> {
    Ok(binarize(map, cfg)?.upsample_nearest(target.0, target.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::otsu_brute_force;
    use crate::trace::{PatchGrid, StreamId};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(rows: usize, cols: usize, scores: Vec<f64>) -> SaliencyMap {
        SaliencyMap {
            stream: StreamId(0),
            label: "image".into(),
            scores,
            grid: Some(PatchGrid {
                rows,
                cols,
                offset: 0,
            }),
        }
    }

    #[test]
    fn two_cluster_threshold_separates() {
        let t = otsu_threshold(&[0.0, 0.0, 0.0, 1.0, 1.0, 1.0], 256).unwrap();
        assert!(t > 0.0 && t < 1.0, "{t}");
        // all boundaries tie; lowest wins
        assert_eq!(t, 1.0 / 256.0);
    }

    #[test]
    fn constant_input_is_an_error() {
        assert_eq!(otsu_threshold(&[0.3; 10], 16), Err(EvalError::NoSeparation));
        assert_eq!(
            otsu_threshold(&[0.3, f64::NAN], 16),
            Err(EvalError::NonFinite)
        );
        assert!(otsu_threshold(&[0.0, 1.0], 1).is_err());
    }

    #[test]
    fn random_sample_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        for bins in [2, 7, 32, 256] {
            let values: Vec<f64> = (0..64).map(|_| rng.random::<f64>().powi(3)).collect();
            assert_eq!(
                otsu_threshold(&values, bins).unwrap(),
                otsu_brute_force(&values, bins).unwrap(),
                "bins {bins}"
            );
        }
    }

    #[test]
    fn lower_scale_gives_superset() {
        let m = map(3, 3, vec![0.1, 0.9, 0.4, 0.05, 0.8, 0.3, 0.2, 0.35, 0.6]);
        let full = binarize(&m, &BinarizationConfig::new(1.0)).unwrap();
        let relaxed = binarize(&m, &BinarizationConfig::new(0.3)).unwrap();
        assert!(full.is_subset_of(&relaxed));
        assert!(relaxed.area() > full.area());
    }

    #[test]
    fn upsample_makes_blocks() {
        let mut scores = vec![0.0; 16];
        scores[5] = 1.0; // row 1, col 1
        let m = map(4, 4, scores);
        let up = binarize_and_upsample(&m, &BinarizationConfig::default(), (16, 16)).unwrap();
        assert_eq!((up.rows(), up.cols()), (16, 16));
        assert_eq!(up.area(), 16);
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(up.get(y, x), (4..8).contains(&y) && (4..8).contains(&x));
            }
        }
    }

    /// Hand-computed: 2x2 map [0, 1, 3, 10], 4 bins over [0, 10], width 2.5.
    /// Bins: 0 -> b0, 1 -> b0, 3 -> b1, 10 -> b3; centers 1.25, 3.75, 6.25, 8.75.
    /// t=1: {b0,b0} vs {b1,b3}: means 1.25 / 6.25, var = .25 * 25 = 6.25
    /// t=2: {b0,b0,b1} vs {b3}: means 2.0833 / 8.75, var = 3/16 * 44.44 = 8.333
    /// t=3: same split as t=2 (bin 2 empty) -> tie, lowest wins: threshold 5.0
    #[test]
    fn hand_computed_mask() {
        let m = map(2, 2, vec![0.0, 1.0, 3.0, 10.0]);
        let cfg = BinarizationConfig {
            bins: 4,
            scale: 1.0,
        };
        let values = [0.0, 1.0, 3.0, 10.0];
        assert_eq!(otsu_threshold(&values, 4).unwrap(), 5.0);
        let mask = binarize(&m, &cfg).unwrap();
        assert_eq!(mask.cells(), &[false, false, false, true]);
        // 0.3 * 5 = 1.5 keeps 3 and 10
        let relaxed = binarize(
            &m,
            &BinarizationConfig {
                bins: 4,
                scale: 0.3,
            },
        )
        .unwrap();
        assert_eq!(relaxed.cells(), &[false, false, true, true]);
    }

    #[test]
    fn missing_grid_is_an_error() {
        let mut m = map(1, 2, vec![0.0, 1.0]);
        m.grid = None;
        assert_eq!(
            binarize(&m, &BinarizationConfig::default()),
            Err(EvalError::MissingGrid)
        );
    }
}
