//! Saliency map evaluation: mean absolute error, maximum F-measure over a
//! threshold sweep, and the structure measure.
//!
//! Predictions are dense maps in [0, 1]; ground truth is binary (values
//! above 0.5 count as foreground). The F sweep binarizes at 255 evenly
//! spaced thresholds k/255. Degenerate conventions follow the common
//! saliency benchmarks: precision is 1 when nothing is predicted, recall
//! is 1 when the ground truth is empty.
//!
//! The structure measure averages an object-aware similarity (foreground
//! and background treated separately) and a region-aware similarity
//! (quadrant split at the ground-truth centroid). Variances here are
//! population variances, which keeps single-pixel regions finite.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{op}: prediction has {pred} values, ground truth {gt}")]
    LengthMismatch {
        op: &'static str,
        pred: usize,
        gt: usize,
    },
    #[error("{op}: expected {h}x{w} = {want} values, got {got}")]
    BadExtent {
        op: &'static str,
        h: usize,
        w: usize,
        want: usize,
        got: usize,
    },
    #[error("{op}: prediction value {value} outside [0, 1]")]
    OutOfRange { op: &'static str, value: f64 },
}

pub const THRESHOLDS: usize = 255;
pub const DEFAULT_BETA2: f64 = 0.3;
pub const DEFAULT_ALPHA: f64 = 0.5;
const EPS: f64 = 1e-12;

fn validate(
    op: &'static str,
    pred: &[f64],
    gt: &[f64],
) -> Result<(), MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch {
            op,
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    for &v in pred {
        if !(0.0..=1.0).contains(&v) {
            return Err(MetricsError::OutOfRange { op, value: v });
        }
    }
    Ok(())
}

/// Mean absolute difference between a prediction and a binary target.
pub fn mae(pred: &[f64], gt: &[f64]) -> Result<f64, MetricsError> {
    validate("mae", pred, gt)?;
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| (p - binary(g)).abs())
        .sum::<f64>()
        / n)
}

fn binary(g: f64) -> f64 {
    if g > 0.5 {
        1.0
    } else {
        0.0
    }
}

/// Precision and recall at each of the 255 sweep thresholds.
#[derive(Debug, Clone)]
pub struct PrSweep {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

/// Threshold `k` of the sweep binarizes at `pred > k / 255`.
pub fn threshold(k: usize) -> f64 {
    k as f64 / THRESHOLDS as f64
}

/// Sweeps the 255 thresholds and records precision and recall at each.
pub fn pr_sweep(pred: &[f64], gt: &[f64]) -> Result<PrSweep, MetricsError> {
    validate("pr_sweep", pred, gt)?;
    let gt_pos = gt.iter().filter(|&&g| binary(g) == 1.0).count();
    let mut precision = Vec::with_capacity(THRESHOLDS);
    let mut recall = Vec::with_capacity(THRESHOLDS);
    for k in 0..THRESHOLDS {
        let t = threshold(k);
        let mut tp = 0usize;
        let mut predicted = 0usize;
        for (&p, &g) in pred.iter().zip(gt) {
            if p > t {
                predicted += 1;
                if binary(g) == 1.0 {
                    tp += 1;
                }
            }
        }
        precision.push(if predicted == 0 {
            1.0
        } else {
            tp as f64 / predicted as f64
        });
        recall.push(if gt_pos == 0 {
            1.0
        } else {
            tp as f64 / gt_pos as f64
        });
    }
    Ok(PrSweep { precision, recall })
}

/// F-measure for one precision/recall pair.
pub fn f_beta(precision: f64, recall: f64, beta2: f64) -> f64 {
    let denom = beta2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * precision * recall / denom
    }
}

/// Maximum F-measure over the threshold sweep of a single frame.
pub fn f_beta_max(pred: &[f64], gt: &[f64], beta2: f64) -> Result<f64, MetricsError> {
    let sweep = pr_sweep(pred, gt)?;
    Ok(sweep
        .precision
        .iter()
        .zip(&sweep.recall)
        .map(|(&p, &r)| f_beta(p, r, beta2))
        .fold(0.0, f64::max))
}

fn mean(xs: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        xs.sum::<f64>() / n as f64
    }
}

fn pop_var(xs: &[f64], m: f64) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
    }
}

fn object_score(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let x = mean(values.iter().cloned(), values.len());
    let sigma = pop_var(values, x).sqrt();
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

/// Object-aware similarity: foreground and background each compared to an
/// ideal constant map, mixed by the foreground fraction.
pub fn s_object(pred: &[f64], gt: &[f64]) -> f64 {
    let fg: Vec<f64> = pred
        .iter()
        .zip(gt)
        .filter(|(_, &g)| binary(g) == 1.0)
        .map(|(&p, _)| p)
        .collect();
    let bg: Vec<f64> = pred
        .iter()
        .zip(gt)
        .filter(|(_, &g)| binary(g) == 0.0)
        .map(|(&p, _)| 1.0 - p)
        .collect();
    let mu = fg.len() as f64 / gt.len() as f64;
    mu * object_score(&fg) + (1.0 - mu) * object_score(&bg)
}

fn region_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 1.0;
    }
    let x = mean(pred.iter().cloned(), n);
    let y = mean(gt.iter().cloned(), n);
    let vx = pop_var(pred, x);
    let vy = pop_var(gt, y);
    let cov = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| (p - x) * (g - y))
        .sum::<f64>()
        / n as f64;
    let alpha = 4.0 * x * y * cov;
    let beta = (x * x + y * y) * (vx + vy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Region-aware similarity: the map is split into four quadrants at the
/// ground-truth centroid; each quadrant contributes a structural
/// similarity weighted by its share of the image area.
pub fn s_region(pred: &[f64], gt: &[f64], h: usize, w: usize) -> f64 {
    let mut cx_sum = 0usize;
    let mut cy_sum = 0usize;
    let mut area = 0usize;
    for y in 0..h {
        for x in 0..w {
            if binary(gt[y * w + x]) == 1.0 {
                cx_sum += x;
                cy_sum += y;
                area += 1;
            }
        }
    }
    let (cx, cy) = if area == 0 {
        (w / 2, h / 2)
    } else {
        (
            (cx_sum as f64 / area as f64).round() as usize,
            (cy_sum as f64 / area as f64).round() as usize,
        )
    };
    // Quadrant (qx, qy): columns split after cx, rows after cy, with the
    // centroid row/column belonging to the top-left block.
    let mut score = 0.0;
    for (qy, qx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let (y0, y1) = if qy == 0 { (0, cy + 1) } else { (cy + 1, h) };
        let (x0, x1) = if qx == 0 { (0, cx + 1) } else { (cx + 1, w) };
        let mut pq = Vec::new();
        let mut gq = Vec::new();
        for y in y0..y1.max(y0) {
            for x in x0..x1.max(x0) {
                pq.push(pred[y * w + x]);
                gq.push(gt[y * w + x]);
            }
        }
        let weight = pq.len() as f64 / (h * w) as f64;
        if weight > 0.0 {
            score += weight * region_ssim(&pq, &gq);
        }
    }
    score
}

/// Structure measure: `alpha * S_object + (1 - alpha) * S_region`, with
/// all-background and all-foreground ground truths handled specially and
/// the result clamped to [0, 1].
pub fn s_measure(
    pred: &[f64],
    gt: &[f64],
    h: usize,
    w: usize,
    alpha: f64,
) -> Result<f64, MetricsError> {
    validate("s_measure", pred, gt)?;
    if pred.len() != h * w {
        return Err(MetricsError::BadExtent {
            op: "s_measure",
            h,
            w,
            want: h * w,
            got: pred.len(),
        });
    }
    let n = gt.len();
    let fg_count = gt.iter().filter(|&&g| binary(g) == 1.0).count();
    let mean_pred = mean(pred.iter().cloned(), n);
    let s = if fg_count == 0 {
        1.0 - mean_pred
    } else if fg_count == n {
        mean_pred
    } else {
        alpha * s_object(pred, gt) + (1.0 - alpha) * s_region(pred, gt, h, w)
    };
    Ok(s.clamp(0.0, 1.0))
}

/// Per-frame metric values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMetrics {
    pub mae: f64,
    pub f_max: f64,
    pub s: f64,
}

/// How the dataset-level max F is aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FAggregate {
    /// Max F over the dataset-mean precision/recall curve.
    Curve,
    /// Mean of the per-frame maximum F values.
    Frame,
}

/// Accumulates frames and reduces them to dataset-level numbers plus the
/// mean precision/recall sweep table.
pub struct Evaluator {
    pub beta2: f64,
    pub alpha: f64,
    pub aggregate: FAggregate,
    frames: Vec<FrameMetrics>,
    sweeps: Vec<PrSweep>,
}

/// Dataset-level reduction.
#[derive(Debug, Clone)]
pub struct DatasetMetrics {
    pub frames: usize,
    pub mae: f64,
    pub f_max: f64,
    pub s: f64,
    /// Rows of (threshold, mean precision, mean recall).
    pub sweep: Vec<(f64, f64, f64)>,
}

impl Evaluator {
    pub fn new(beta2: f64, alpha: f64, aggregate: FAggregate) -> Self {
        Evaluator {
            beta2,
            alpha,
            aggregate,
            frames: Vec::new(),
            sweeps: Vec::new(),
        }
    }

    pub fn add_frame(
        &mut self,
        pred: &[f64],
        gt: &[f64],
        h: usize,
        w: usize,
    ) -> Result<FrameMetrics, MetricsError> {
        let sweep = pr_sweep(pred, gt)?;
        let f_max = sweep
            .precision
            .iter()
            .zip(&sweep.recall)
            .map(|(&p, &r)| f_beta(p, r, self.beta2))
            .fold(0.0, f64::max);
        let fm = FrameMetrics {
            mae: mae(pred, gt)?,
            f_max,
            s: s_measure(pred, gt, h, w, self.alpha)?,
        };
        self.frames.push(fm);
        self.sweeps.push(sweep);
        Ok(fm)
    }

    pub fn finish(self) -> DatasetMetrics {
        let n = self.frames.len();
        let mut sweep = Vec::with_capacity(THRESHOLDS);
        for k in 0..THRESHOLDS {
            let p = mean(self.sweeps.iter().map(|s| s.precision[k]), n);
            let r = mean(self.sweeps.iter().map(|s| s.recall[k]), n);
            sweep.push((threshold(k), p, r));
        }
        let f_max = match self.aggregate {
            FAggregate::Curve => sweep
                .iter()
                .map(|&(_, p, r)| f_beta(p, r, self.beta2))
                .fold(0.0, f64::max),
            FAggregate::Frame => mean(self.frames.iter().map(|f| f.f_max), n),
        };
        DatasetMetrics {
            frames: n,
            mae: mean(self.frames.iter().map(|f| f.mae), n),
            f_max,
            s: mean(self.frames.iter().map(|f| f.s), n),
            sweep,
        }
    }
}
