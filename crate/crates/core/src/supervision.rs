//! Point annotations to training signal: flood-filled pseudo-labels, edge
//! targets, and the weighted loss.
//!
//! A frame is annotated with one foreground point per salient object and at
//! least one background point. Each point grows into a small 4-connected
//! region of similarly colored pixels, clipped to a disk whose radius
//! shrinks as `gamma` grows; everything else stays unlabeled. The network
//! trains on binary cross entropy restricted to the labeled pixels,
//! an edge head supervised by thresholded image gradients, an edge-aware
//! smoothness penalty, and a color-and-distance gated pairwise penalty on
//! the final map.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, VarId};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SupervisionError {
    #[error("image must be [3, h, w], got {0:?}")]
    BadImage(Vec<usize>),
    #[error("point ({x}, {y}) outside {w}x{h} image")]
    OutOfBounds { x: usize, y: usize, w: usize, h: usize },
    #[error("foreground and background points must be disjoint, ({x}, {y}) appears in both")]
    PointsOverlap { x: usize, y: usize },
    #[error("gamma must be >= 1, got {0}")]
    BadGamma(f64),
    #[error("frame {frame}: no points")]
    NoPoints { frame: String },
}

/// Point annotation for one frame. Coordinates are `[x, y]` pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub frame: String,
    pub fg: Vec<[usize; 2]>,
    pub bg: Vec<[usize; 2]>,
}

/// Tri-state label map produced by flood filling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabel {
    pub h: usize,
    pub w: usize,
    /// Per pixel: `FG`, `BG`, or `UNLABELED`.
    pub map: Vec<u8>,
}

impl PseudoLabel {
    pub const BG: u8 = 0;
    pub const UNLABELED: u8 = 128;
    pub const FG: u8 = 255;

    pub fn fg_mask<F: Scalar>(&self) -> Vec<F> {
        self.map
            .iter()
            .map(|&v| if v == Self::FG { F::one() } else { F::zero() })
            .collect()
    }

    pub fn bg_mask<F: Scalar>(&self) -> Vec<F> {
        self.map
            .iter()
            .map(|&v| if v == Self::BG { F::one() } else { F::zero() })
            .collect()
    }

    pub fn labeled_count(&self) -> usize {
        self.map.iter().filter(|&&v| v != Self::UNLABELED).count()
    }
}

/// Region growing controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FloodFillParams {
    /// Disk radius divisor: radius = min(h, w) / gamma.
    pub gamma: f64,
    /// Maximum Euclidean RGB distance to the seed color.
    pub color_threshold: f64,
}

impl Default for FloodFillParams {
    fn default() -> Self {
        FloodFillParams {
            gamma: 6.0,
            color_threshold: 0.1,
        }
    }
}

fn check_image(img: &Tensor<f64>) -> Result<(usize, usize), SupervisionError> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(SupervisionError::BadImage(s.to_vec()));
    }
    Ok((s[1], s[2]))
}

/// Grows the set of pixels 4-connected to the seed through pixels that are
/// both within `radius` of the seed and within `color_threshold` of the
/// seed color.
fn grow_region(
    img: &Tensor<f64>,
    h: usize,
    w: usize,
    seed: [usize; 2],
    radius: f64,
    color_threshold: f64,
    out: &mut [bool],
) {
    let plane = h * w;
    let (sx, sy) = (seed[0], seed[1]);
    let seed_color = [
        img.data()[sy * w + sx],
        img.data()[plane + sy * w + sx],
        img.data()[2 * plane + sy * w + sx],
    ];
    let admissible = |x: usize, y: usize| {
        let dx = x as f64 - sx as f64;
        let dy = y as f64 - sy as f64;
        if dx * dx + dy * dy > radius * radius {
            return false;
        }
        let i = y * w + x;
        let dr = img.data()[i] - seed_color[0];
        let dg = img.data()[plane + i] - seed_color[1];
        let db = img.data()[2 * plane + i] - seed_color[2];
        (dr * dr + dg * dg + db * db).sqrt() < color_threshold
    };
    let mut visited = vec![false; plane];
    let mut queue = VecDeque::new();
    visited[sy * w + sx] = true;
    out[sy * w + sx] = true;
    queue.push_back((sx, sy));
    while let Some((x, y)) = queue.pop_front() {
        let neighbors = [
            (x.wrapping_sub(1), y),
            (x + 1, y),
            (x, y.wrapping_sub(1)),
            (x, y + 1),
        ];
        for (nx, ny) in neighbors {
            if nx >= w || ny >= h || visited[ny * w + nx] {
                continue;
            }
            visited[ny * w + nx] = true;
            if admissible(nx, ny) {
                out[ny * w + nx] = true;
                queue.push_back((nx, ny));
            }
        }
    }
}

/// Expands point annotations into a tri-state label map. Foreground and
/// background seeds grow by the same rule; where regions overlap the
/// foreground wins.
pub fn flood_fill(
    img: &Tensor<f64>,
    ann: &PointAnnotation,
    params: &FloodFillParams,
) -> Result<PseudoLabel, SupervisionError> {
    let (h, w) = check_image(img)?;
    if params.gamma < 1.0 {
        return Err(SupervisionError::BadGamma(params.gamma));
    }
    if ann.fg.is_empty() && ann.bg.is_empty() {
        return Err(SupervisionError::NoPoints {
            frame: ann.frame.clone(),
        });
    }
    for &[x, y] in ann.fg.iter().chain(&ann.bg) {
        if x >= w || y >= h {
            return Err(SupervisionError::OutOfBounds { x, y, w, h });
        }
    }
    for p in &ann.fg {
        if ann.bg.contains(p) {
            return Err(SupervisionError::PointsOverlap { x: p[0], y: p[1] });
        }
    }
    let radius = h.min(w) as f64 / params.gamma;
    let mut fg = vec![false; h * w];
    let mut bg = vec![false; h * w];
    for &seed in &ann.fg {
        grow_region(img, h, w, seed, radius, params.color_threshold, &mut fg);
    }
    for &seed in &ann.bg {
        grow_region(img, h, w, seed, radius, params.color_threshold, &mut bg);
    }
    let map = fg
        .iter()
        .zip(&bg)
        .map(|(&f, &b)| {
            if f {
                PseudoLabel::FG
            } else if b {
                PseudoLabel::BG
            } else {
                PseudoLabel::UNLABELED
            }
        })
        .collect();
    Ok(PseudoLabel { h, w, map })
}

/// Luma of every pixel of a `[3, h, w]` image.
pub fn grayscale<F: Scalar>(img: &Tensor<F>) -> Vec<F> {
    let plane = img.shape()[1] * img.shape()[2];
    let d = img.data();
    (0..plane)
        .map(|i| {
            F::c(0.299) * d[i] + F::c(0.587) * d[plane + i] + F::c(0.114) * d[2 * plane + i]
        })
        .collect()
}

/// Binary edge map from thresholded gradient magnitude. The 3x3 stencils
/// run over the luma image with replicated borders; the magnitude is
/// max-normalized and a pixel is an edge when it exceeds the value at the
/// given quantile. A constant image yields no edges.
pub fn edge_target(img: &Tensor<f64>, quantile: f64) -> Result<Tensor<f64>, SupervisionError> {
    let (h, w) = check_image(img)?;
    let gray = grayscale(img);
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        gray[yy * w + xx]
    };
    let mut mag = vec![0.0f64; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = -at(y - 1, x - 1) + at(y - 1, x + 1) - 2.0 * at(y, x - 1)
                + 2.0 * at(y, x + 1)
                - at(y + 1, x - 1)
                + at(y + 1, x + 1);
            let gy = -at(y - 1, x - 1) - 2.0 * at(y - 1, x) - at(y - 1, x + 1)
                + at(y + 1, x - 1)
                + 2.0 * at(y + 1, x)
                + at(y + 1, x + 1);
            mag[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    let peak = mag.iter().cloned().fold(0.0f64, f64::max);
    if peak > 0.0 {
        for v in &mut mag {
            *v /= peak;
        }
    }
    let mut sorted = mag.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((sorted.len() - 1) as f64 * quantile).floor() as usize;
    let threshold = sorted[idx];
    let edges = mag
        .iter()
        .map(|&v| if v > threshold { 1.0 } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(&[h, w], edges).expect("edge map sized by image"))
}

fn flat<F: Scalar>(g: &mut Graph<F>, pred: VarId) -> Result<(VarId, usize), TensorError> {
    let n = g.data(pred).len();
    Ok((g.reshape(pred, &[n])?, n))
}

/// `-sum(fg * ln p + bg * ln(1 - p))` with both logs guarded below 1e-7,
/// so saturated predictions stay finite in value and keep a restoring
/// gradient. `fg` and `bg` are fixed 0/1 masks.
fn masked_bce<F: Scalar>(
    g: &mut Graph<F>,
    pred: VarId,
    fg: Vec<F>,
    bg: Vec<F>,
) -> Result<VarId, TensorError> {
    let (p, n) = flat(g, pred)?;
    let lp = g.safe_ln(p, F::c(1e-7));
    let flipped = g.scale(p, F::c(-1.0));
    let q = g.add_scalar(flipped, F::one());
    let lq = g.safe_ln(q, F::c(1e-7));
    let mf = g.leaf(&Tensor::from_vec(&[n], fg)?);
    let mb = g.leaf(&Tensor::from_vec(&[n], bg)?);
    let a = g.mul(mf, lp)?;
    let b = g.mul(mb, lq)?;
    let s = g.add(a, b)?;
    let total = g.sum_all(s);
    Ok(g.scale(total, F::c(-1.0)))
}

/// Cross entropy of `pred` against a dense 0/1 target, summed over pixels.
pub fn bce<F: Scalar>(g: &mut Graph<F>, pred: VarId, target: &[F]) -> Result<VarId, TensorError> {
    if g.data(pred).len() != target.len() {
        return Err(TensorError::BadArg {
            op: "bce",
            msg: format!(
                "prediction has {} values, target {}",
                g.data(pred).len(),
                target.len()
            ),
        });
    }
    let fg = target.to_vec();
    let bg = target.iter().map(|&t| F::one() - t).collect();
    masked_bce(g, pred, fg, bg)
}

/// Cross entropy restricted to the labeled pixels of a pseudo-label map.
/// Unlabeled pixels contribute nothing and receive exactly zero gradient.
pub fn partial_bce<F: Scalar>(
    g: &mut Graph<F>,
    pred: VarId,
    label: &PseudoLabel,
) -> Result<VarId, TensorError> {
    if g.data(pred).len() != label.map.len() {
        return Err(TensorError::BadArg {
            op: "partial_bce",
            msg: format!(
                "prediction has {} values, label map {}",
                g.data(pred).len(),
                label.map.len()
            ),
        });
    }
    masked_bce(g, pred, label.fg_mask(), label.bg_mask())
}

/// Edge-aware total variation: `sum_d |d pred| * exp(-|d gray|)` over
/// forward differences in x and y.
pub fn smoothness<F: Scalar>(
    g: &mut Graph<F>,
    pred: VarId,
    gray: &[F],
    h: usize,
    w: usize,
) -> Result<VarId, TensorError> {
    if g.data(pred).len() != h * w || gray.len() != h * w {
        return Err(TensorError::BadArg {
            op: "smoothness",
            msg: format!("expected {}x{} maps", h, w),
        });
    }
    let (p, _) = flat(g, pred)?;
    let mut pairs = Vec::new();
    let mut weights = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                pairs.push((i, i + 1));
                weights.push((-(gray[i] - gray[i + 1]).abs()).exp());
            }
            if y + 1 < h {
                pairs.push((i, i + w));
                weights.push((-(gray[i] - gray[i + w]).abs()).exp());
            }
        }
    }
    g.weighted_abs_diff(p, pairs, weights)
}

/// Pairwise penalty over k x k windows, weighted by a Gaussian kernel on
/// pixel distance and color difference and normalized by the clipped
/// window size. Every ordered neighbor pair contributes once.
pub fn gated_crf<F: Scalar>(
    g: &mut Graph<F>,
    pred: VarId,
    img: &Tensor<F>,
    kernel: usize,
    sigma_pt: f64,
    sigma_i: f64,
) -> Result<VarId, TensorError> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    if g.data(pred).len() != h * w {
        return Err(TensorError::BadArg {
            op: "gated_crf",
            msg: format!("prediction does not match {}x{} image", h, w),
        });
    }
    let (p, _) = flat(g, pred)?;
    let r = (kernel / 2) as isize;
    let plane = h * w;
    let d = img.data();
    let color = |i: usize| {
        [
            d[i].as_f64(),
            d[plane + i].as_f64(),
            d[2 * plane + i].as_f64(),
        ]
    };
    let mut pairs = Vec::new();
    let mut weights = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            let y0 = (y - r).max(0);
            let y1 = (y + r).min(h as isize - 1);
            let x0 = (x - r).max(0);
            let x1 = (x + r).min(w as isize - 1);
            let card = ((y1 - y0 + 1) * (x1 - x0 + 1) - 1) as f64;
            if card == 0.0 {
                continue;
            }
            let i = (y * w as isize + x) as usize;
            let ci = color(i);
            for ny in y0..=y1 {
                for nx in x0..=x1 {
                    if ny == y && nx == x {
                        continue;
                    }
                    let j = (ny * w as isize + nx) as usize;
                    let cj = color(j);
                    let dpt = (((nx - x) * (nx - x) + (ny - y) * (ny - y)) as f64).sqrt();
                    let drgb = ((ci[0] - cj[0]).powi(2)
                        + (ci[1] - cj[1]).powi(2)
                        + (ci[2] - cj[2]).powi(2))
                    .sqrt();
                    let f = (-dpt / (2.0 * sigma_pt * sigma_pt)
                        - drgb / (2.0 * sigma_i * sigma_i))
                        .exp()
                        / card;
                    pairs.push((i, j));
                    weights.push(F::c(f));
                }
            }
        }
    }
    g.weighted_abs_diff(p, pairs, weights)
}

/// All supervision knobs and loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionConfig {
    pub fill: FloodFillParams,
    pub edge_quantile: f64,
    pub crf_kernel: usize,
    pub sigma_pt: f64,
    pub sigma_i: f64,
    /// Weight of the edge head's cross entropy.
    pub edge_weight: f64,
    /// Weight of the labeled-pixel cross entropy on each side head.
    pub side_pbce_weight: f64,
    /// Weight of the smoothness term on each side head.
    pub side_smooth_weight: f64,
    pub final_pbce_weight: f64,
    pub final_smooth_weight: f64,
    pub final_gcrf_weight: f64,
}

impl Default for SupervisionConfig {
    fn default() -> Self {
        SupervisionConfig {
            fill: FloodFillParams::default(),
            edge_quantile: 0.9,
            crf_kernel: 5,
            sigma_pt: 3.0,
            sigma_i: 0.1,
            edge_weight: 0.2,
            side_pbce_weight: 1.0 / 3.0,
            side_smooth_weight: 1.0 / 3.0,
            final_pbce_weight: 1.0,
            final_smooth_weight: 0.3,
            final_gcrf_weight: 0.1,
        }
    }
}

/// Precomputed per-frame training targets.
#[derive(Clone)]
pub struct FrameTargets<F> {
    pub pseudo: PseudoLabel,
    pub edge: Vec<F>,
    pub gray: Vec<F>,
    pub image: Tensor<F>,
}

impl<F: Scalar> FrameTargets<F> {
    pub fn prepare(
        img: &Tensor<f64>,
        ann: &PointAnnotation,
        cfg: &SupervisionConfig,
    ) -> Result<Self, SupervisionError> {
        let pseudo = flood_fill(img, ann, &cfg.fill)?;
        let edge = edge_target(img, cfg.edge_quantile)?
            .data()
            .iter()
            .map(|&v| F::c(v))
            .collect();
        let gray = grayscale(img).iter().map(|&v| F::c(v)).collect();
        Ok(FrameTargets {
            pseudo,
            edge,
            gray,
            image: img.cast(),
        })
    }
}

/// The weighted loss of one frame plus the logged values of each group.
/// The logged numbers are the weighted contributions, so their sum equals
/// the total.
pub struct LossBreakdown {
    pub total: VarId,
    pub bce: f64,
    pub pbce: f64,
    pub smooth: f64,
    pub gcrf: f64,
}

/// Applies the loss recipe to one frame's heads: edge cross entropy on the
/// first side map, labeled cross entropy plus smoothness on the remaining
/// side maps, and labeled cross entropy, smoothness, and the gated pairwise
/// penalty on the final map. `heads` is `[s1, s2, s3, s4, s_final]`, every
/// map flattened or shaped `[1, h, w]` at the target resolution.
pub fn frame_loss<F: Scalar>(
    g: &mut Graph<F>,
    heads: [VarId; 5],
    t: &FrameTargets<F>,
    cfg: &SupervisionConfig,
) -> Result<LossBreakdown, TensorError> {
    let (h, w) = (t.pseudo.h, t.pseudo.w);
    let e = bce(g, heads[0], &t.edge)?;
    let e = g.scale(e, F::c(cfg.edge_weight));
    let mut total = e;
    let mut out = LossBreakdown {
        total,
        bce: g.scalar_value(e).as_f64(),
        pbce: 0.0,
        smooth: 0.0,
        gcrf: 0.0,
    };
    for &head in &heads[1..4] {
        let p = partial_bce(g, head, &t.pseudo)?;
        let p = g.scale(p, F::c(cfg.side_pbce_weight));
        let s = smoothness(g, head, &t.gray, h, w)?;
        let s = g.scale(s, F::c(cfg.side_smooth_weight));
        out.pbce += g.scalar_value(p).as_f64();
        out.smooth += g.scalar_value(s).as_f64();
        total = g.add(total, p)?;
        total = g.add(total, s)?;
    }
    let p = partial_bce(g, heads[4], &t.pseudo)?;
    let p = g.scale(p, F::c(cfg.final_pbce_weight));
    let s = smoothness(g, heads[4], &t.gray, h, w)?;
    let s = g.scale(s, F::c(cfg.final_smooth_weight));
    let c = gated_crf(g, heads[4], &t.image, cfg.crf_kernel, cfg.sigma_pt, cfg.sigma_i)?;
    let c = g.scale(c, F::c(cfg.final_gcrf_weight));
    out.pbce += g.scalar_value(p).as_f64();
    out.smooth += g.scalar_value(s).as_f64();
    out.gcrf = g.scalar_value(c).as_f64();
    total = g.add(total, p)?;
    total = g.add(total, s)?;
    total = g.add(total, c)?;
    out.total = total;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::check::{rand_tensor, GradCheck};

    fn uniform_image(h: usize, w: usize, color: [f64; 3]) -> Tensor<f64> {
        Tensor::from_fn(&[3, h, w], |i| color[i / (h * w)])
    }

    fn ann(fg: Vec<[usize; 2]>, bg: Vec<[usize; 2]>) -> PointAnnotation {
        PointAnnotation {
            frame: "f000".into(),
            fg,
            bg,
        }
    }

    #[test]
    fn uniform_image_grows_a_disk() {
        let img = uniform_image(12, 12, [0.4, 0.5, 0.6]);
        let lbl = flood_fill(&img, &ann(vec![[6, 6]], vec![]), &FloodFillParams::default())
            .unwrap();
        // radius = 12 / 6 = 2: the thirteen pixels within distance 2.
        let mut expected = vec![PseudoLabel::UNLABELED; 144];
        for (dx, dy) in [
            (0i32, 0i32),
            (1, 0),
            (-1, 0),
            (0, 1),
            (0, -1),
            (1, 1),
            (1, -1),
            (-1, 1),
            (-1, -1),
            (2, 0),
            (-2, 0),
            (0, 2),
            (0, -2),
        ] {
            expected[((6 + dy) * 12 + 6 + dx) as usize] = PseudoLabel::FG;
        }
        assert_eq!(lbl.map, expected);
    }

    #[test]
    fn region_stops_at_color_boundary() {
        // A plus-shaped patch of one color in a sea of another; the grown
        // region is exactly the connected same-color component.
        let mut img = uniform_image(16, 16, [0.9, 0.9, 0.9]);
        let plus = [[8, 8], [7, 8], [9, 8], [8, 7], [8, 9]];
        for &[x, y] in &plus {
            for c in 0..3 {
                img.data_mut()[c * 256 + y * 16 + x] = 0.1;
            }
        }
        let lbl = flood_fill(&img, &ann(vec![[8, 8]], vec![]), &FloodFillParams::default())
            .unwrap();
        let fg: Vec<usize> = lbl
            .map
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == PseudoLabel::FG)
            .map(|(i, _)| i)
            .collect();
        let mut expected: Vec<usize> = plus.iter().map(|&[x, y]| y * 16 + x).collect();
        expected.sort_unstable();
        assert_eq!(fg, expected);
    }

    #[test]
    fn huge_gamma_labels_only_the_seed() {
        let img = uniform_image(12, 12, [0.2, 0.2, 0.2]);
        let params = FloodFillParams {
            gamma: 1000.0,
            ..FloodFillParams::default()
        };
        let lbl = flood_fill(&img, &ann(vec![[5, 7]], vec![]), &params).unwrap();
        assert_eq!(lbl.map.iter().filter(|&&v| v == PseudoLabel::FG).count(), 1);
        assert_eq!(lbl.map[7 * 12 + 5], PseudoLabel::FG);
    }

    #[test]
    fn foreground_wins_overlaps_and_background_grows_too() {
        let img = uniform_image(12, 12, [0.5, 0.5, 0.5]);
        let lbl = flood_fill(
            &img,
            &ann(vec![[5, 5]], vec![[6, 5]]),
            &FloodFillParams::default(),
        )
        .unwrap();
        assert_eq!(lbl.map[5 * 12 + 5], PseudoLabel::FG);
        // The background seed itself sits inside the foreground disk.
        assert_eq!(lbl.map[5 * 12 + 6], PseudoLabel::FG);
        // But pixels only the background disk reaches stay background.
        assert_eq!(lbl.map[5 * 12 + 8], PseudoLabel::BG);
        assert!(lbl.labeled_count() > 13);
    }

    #[test]
    fn rejects_bad_annotations() {
        let img = uniform_image(8, 8, [0.5, 0.5, 0.5]);
        let p = FloodFillParams::default();
        assert!(matches!(
            flood_fill(&img, &ann(vec![[8, 0]], vec![]), &p),
            Err(SupervisionError::OutOfBounds { .. })
        ));
        assert!(matches!(
            flood_fill(&img, &ann(vec![[2, 2]], vec![[2, 2]]), &p),
            Err(SupervisionError::PointsOverlap { .. })
        ));
        let bad = FloodFillParams {
            gamma: 0.5,
            ..FloodFillParams::default()
        };
        assert!(matches!(
            flood_fill(&img, &ann(vec![[2, 2]], vec![]), &bad),
            Err(SupervisionError::BadGamma(_))
        ));
    }

    #[test]
    fn edge_target_constant_and_step() {
        let flat_img = uniform_image(16, 16, [0.3, 0.6, 0.1]);
        let e = edge_target(&flat_img, 0.9).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));

        let mut step = uniform_image(64, 64, [0.0, 0.0, 0.0]);
        for c in 0..3 {
            for y in 0..64 {
                for x in 32..64 {
                    step.data_mut()[c * 4096 + y * 64 + x] = 1.0;
                }
            }
        }
        let e = edge_target(&step, 0.9).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let expected = if x == 31 || x == 32 { 1.0 } else { 0.0 };
                assert_eq!(e.data()[y * 64 + x], expected, "at ({x}, {y})");
            }
        }
    }

    #[test]
    fn bce_matches_closed_forms() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(&Tensor::from_vec(&[1], vec![0.5]).unwrap());
        let l = bce(&mut g, p, &[1.0]).unwrap();
        assert!((g.scalar_value(l) - std::f64::consts::LN_2).abs() < 1e-12);

        // Perfect hard predictions cost at most n * 1e-6 after clamping.
        let t = vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let p = g.leaf(&Tensor::from_vec(&[6], t.clone()).unwrap());
        let l = bce(&mut g, p, &t).unwrap();
        assert!(g.scalar_value(l) <= 6.0 * 1e-6);
    }

    #[test]
    fn partial_bce_ignores_unlabeled_pixels_exactly() {
        let label = PseudoLabel {
            h: 2,
            w: 3,
            map: vec![
                PseudoLabel::FG,
                PseudoLabel::UNLABELED,
                PseudoLabel::BG,
                PseudoLabel::UNLABELED,
                PseudoLabel::UNLABELED,
                PseudoLabel::FG,
            ],
        };
        let mut g = Graph::<f64>::new();
        let pred = Tensor::with_grad(
            Tensor::from_vec(&[6], vec![0.3, 0.9, 0.2, 0.5, 0.7, 0.6]).unwrap(),
        );
        let p = g.leaf(&pred);
        let l = partial_bce(&mut g, p, &label).unwrap();
        let expected = -(0.3f64.ln() + (1.0 - 0.2f64).ln() + 0.6f64.ln());
        assert!((g.scalar_value(l) - expected).abs() < 1e-12);
        g.backward(l).unwrap();
        let grad = g.grad(p).unwrap();
        for i in [1, 3, 4] {
            assert_eq!(grad[i], 0.0, "unlabeled pixel {i} must get zero gradient");
        }
        for i in [0, 2, 5] {
            assert_ne!(grad[i], 0.0);
        }
    }

    #[test]
    fn partial_bce_with_everything_labeled_is_bce() {
        let mut g = Graph::<f64>::new();
        let vals = vec![0.2, 0.8, 0.4, 0.6];
        let target = vec![1.0, 0.0, 0.0, 1.0];
        let label = PseudoLabel {
            h: 2,
            w: 2,
            map: target
                .iter()
                .map(|&t| if t > 0.5 { PseudoLabel::FG } else { PseudoLabel::BG })
                .collect(),
        };
        let p = g.leaf(&Tensor::from_vec(&[4], vals).unwrap());
        let a = partial_bce(&mut g, p, &label).unwrap();
        let b = bce(&mut g, p, &target).unwrap();
        assert_eq!(g.scalar_value(a), g.scalar_value(b));
    }

    #[test]
    fn smoothness_closed_forms() {
        let mut g = Graph::<f64>::new();
        let constant = g.leaf(&Tensor::full(&[9], 0.7));
        let gray = vec![0.5; 9];
        let l = smoothness(&mut g, constant, &gray, 3, 3).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);

        // Constant image: weights are all one, so the loss is the plain
        // total variation.
        let s = Tensor::from_vec(&[4], vec![0.0, 1.0, 0.25, 0.5]).unwrap();
        let p = g.leaf(&s);
        let l = smoothness(&mut g, p, &[0.3; 4], 2, 2).unwrap();
        // Horizontal pairs: |0-1| + |0.25-0.5|; vertical: |0-0.25| + |1-0.5|.
        assert!((g.scalar_value(l) - (1.0 + 0.25 + 0.25 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn gated_crf_closed_forms_and_symmetry() {
        let mut g = Graph::<f64>::new();
        // Uniform prediction: zero loss whatever the image.
        let img = rand_tensor(&[3, 4, 4], 0.0, 1.0, 1);
        let u = g.leaf(&Tensor::full(&[16], 0.42));
        let l = gated_crf(&mut g, u, &img, 5, 3.0, 0.1).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);

        // Two adjacent pixels with identical colors: each window holds one
        // neighbor, so loss = 2 * exp(-1 / (2 * sigma_pt^2)).
        let two = uniform_image(1, 2, [0.5, 0.5, 0.5]);
        let p = g.leaf(&Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap());
        let l = gated_crf(&mut g, p, &two, 5, 3.0, 0.1).unwrap();
        let f = (-1.0f64 / 18.0).exp();
        assert!((g.scalar_value(l) - 2.0 * f).abs() < 1e-12);

        // Swapping s for 1 - s leaves every |s_i - s_j| unchanged.
        let s = rand_tensor(&[16], 0.05, 0.95, 2);
        let inv = Tensor::from_vec(&[16], s.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        let a = g.leaf(&s);
        let b = g.leaf(&inv);
        let la = gated_crf(&mut g, a, &img, 5, 3.0, 0.1).unwrap();
        let lb = gated_crf(&mut g, b, &img, 5, 3.0, 0.1).unwrap();
        assert!((g.scalar_value(la) - g.scalar_value(lb)).abs() < 1e-12);
    }

    #[test]
    fn frame_loss_breakdown_sums_to_total() {
        let img = rand_tensor(&[3, 8, 8], 0.0, 1.0, 3);
        let targets = FrameTargets::<f64>::prepare(
            &img,
            &ann(vec![[4, 4]], vec![[0, 0]]),
            &SupervisionConfig::default(),
        )
        .unwrap();
        let mut g = Graph::<f64>::new();
        let heads = std::array::from_fn(|i| {
            g.leaf(&rand_tensor(&[1, 8, 8], 0.05, 0.95, 10 + i as u64))
        });
        let out = frame_loss(&mut g, heads, &targets, &SupervisionConfig::default()).unwrap();
        let parts = out.bce + out.pbce + out.smooth + out.gcrf;
        let total = g.scalar_value(out.total);
        assert!((parts - total).abs() < 1e-9, "{parts} vs {total}");
        assert!(total.is_finite() && total > 0.0);
    }

    #[test]
    fn gradcheck_losses() {
        let img = rand_tensor(&[3, 6, 6], 0.0, 1.0, 4);
        let targets = FrameTargets::<f64>::prepare(
            &img,
            &ann(vec![[3, 3]], vec![[0, 0]]),
            &SupervisionConfig::default(),
        )
        .unwrap();
        let pred = rand_tensor(&[36], 0.1, 0.9, 5);
        let edge = targets.edge.clone();
        GradCheck::with_tol(1e-3, 1e-7).coords(36).run(&[pred.clone()], &|g, ids| {
            bce(g, ids[0], &edge)
        });
        GradCheck::with_tol(1e-3, 1e-7).coords(36).run(&[pred.clone()], &|g, ids| {
            partial_bce(g, ids[0], &targets.pseudo)
        });
        GradCheck::with_tol(1e-3, 1e-7).coords(36).run(&[pred.clone()], &|g, ids| {
            smoothness(g, ids[0], &targets.gray, 6, 6)
        });
        GradCheck::with_tol(1e-3, 1e-7).coords(36).run(&[pred], &|g, ids| {
            gated_crf(g, ids[0], &targets.image, 5, 3.0, 0.1)
        });
    }
}
