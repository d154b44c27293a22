//! Cascade decoder with an edge branch gated by predicted salient regions.
//!
//! Four token stages arrive as spatial maps, are compressed to a common
//! width by 1x1 convolutions, and fused coarse to fine. Each fused level
//! emits a single-channel side map. The finest level is treated as an edge
//! feature and multiplied by the level-2 saliency side map, which filters
//! out edges in the predicted background. The gated edge feature and the
//! three coarser levels are merged by a small convolution head into the
//! final saliency map.

use rand::Rng;

use crate::graph::{Graph, VarId};
use crate::nn::{Bound, Conv2d, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::TensorError;

/// Three 3x3 convolutions with GeLU after each, constant width.
struct ConvTriple([Conv2d; 3]);

/// Two 3x3 convolutions with GeLU after each, constant width.
struct ConvPair([Conv2d; 2]);

impl ConvTriple {
    fn new<F: Scalar, R: Rng>(ps: &mut ParamSet<F>, rng: &mut R, name: &str, width: usize) -> Self {
        ConvTriple(std::array::from_fn(|i| {
            Conv2d::new(ps, rng, &format!("{name}.conv{i}"), width, width, 3, 1, 1)
        }))
    }

    fn apply<F: Scalar>(&self, g: &mut Graph<F>, bd: &Bound, x: VarId) -> Result<VarId, TensorError> {
        let mut y = x;
        for c in &self.0 {
            y = c.apply(g, bd, y)?;
            y = g.gelu(y);
        }
        Ok(y)
    }
}

impl ConvPair {
    fn new<F: Scalar, R: Rng>(ps: &mut ParamSet<F>, rng: &mut R, name: &str, width: usize) -> Self {
        ConvPair(std::array::from_fn(|i| {
            Conv2d::new(ps, rng, &format!("{name}.conv{i}"), width, width, 3, 1, 1)
        }))
    }

    fn apply<F: Scalar>(&self, g: &mut Graph<F>, bd: &Bound, x: VarId) -> Result<VarId, TensorError> {
        let mut y = x;
        for c in &self.0 {
            y = c.apply(g, bd, y)?;
            y = g.gelu(y);
        }
        Ok(y)
    }
}

/// Logit of the expected salient-pixel share; sigmoid(-2.197) ~ 0.1.
const PREDICTION_PRIOR_LOGIT: f64 = -2.197224577336219;

/// Starts a map-emitting convolution at a flat prior: zero weights and a
/// bias at the prior logit. Every emitted map then opens as a constant
/// low-saliency field, so early updates adjust structure instead of
/// recovering from saturated random logits.
fn init_prediction_conv<F: Scalar>(ps: &mut ParamSet<F>, conv: &Conv2d) {
    for v in ps.get_mut(conv.lin.w).data_mut() {
        *v = F::c(0.0);
    }
    for v in ps.get_mut(conv.lin.b).data_mut() {
        *v = F::c(PREDICTION_PRIOR_LOGIT);
    }
}

/// Concatenates `[c, h, w]` maps along channels.
pub fn concat_channels<F: Scalar>(
    g: &mut Graph<F>,
    maps: &[VarId],
) -> Result<VarId, TensorError> {
    let (h, w) = (g.shape(maps[0])[1], g.shape(maps[0])[2]);
    let mut acc = None;
    let mut channels = 0;
    for &m in maps {
        let c = g.shape(m)[0];
        let flat = g.reshape(m, &[c, h * w])?;
        channels += c;
        acc = Some(match acc {
            None => flat,
            Some(a) => g.concat_rows(a, flat)?,
        });
    }
    g.reshape(acc.expect("at least one map"), &[channels, h, w])
}

/// Multiplies every channel of `ff1` by the single-channel map `s2`,
/// upsampling `s2` to `ff1`'s extent first. Zero gate, zero output.
pub fn srg_edge<F: Scalar>(
    g: &mut Graph<F>,
    ff1: VarId,
    s2: VarId,
) -> Result<VarId, TensorError> {
    let (c, h, w) = (g.shape(ff1)[0], g.shape(ff1)[1], g.shape(ff1)[2]);
    let up = g.bilinear(s2, h, w)?;
    let gate = g.reshape(up, &[h * w])?;
    let flat = g.reshape(ff1, &[c, h * w])?;
    let gated = g.scale_cols(flat, gate)?;
    g.reshape(gated, &[c, h, w])
}

/// Everything the decoder produces for one frame, at native resolutions.
pub struct DecoderOut {
    /// Fused features per level, finest first.
    pub ff: [VarId; 4],
    /// Side maps per level, `[1, h_i, w_i]`, values in (0, 1).
    pub side: [VarId; 4],
    /// Salient-region-gated edge feature.
    pub edge: VarId,
    /// Final saliency map at the finest decoder resolution.
    pub final_map: VarId,
}

pub struct Decoder {
    compress: [Conv2d; 4],
    ff: [ConvTriple; 4],
    lateral: [ConvPair; 3],
    side: [Conv2d; 4],
    head1: Conv2d,
    head2: Conv2d,
    width: usize,
}

impl Decoder {
    /// `in_channels` are the widths of the four incoming stages, finest
    /// first; every internal feature uses `width` channels.
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamSet<F>,
        rng: &mut R,
        name: &str,
        in_channels: [usize; 4],
        width: usize,
    ) -> Self {
        Decoder {
            compress: std::array::from_fn(|i| {
                Conv2d::new(
                    ps,
                    rng,
                    &format!("{name}.compress{}", i + 1),
                    in_channels[i],
                    width,
                    1,
                    1,
                    0,
                )
            }),
            ff: std::array::from_fn(|i| {
                ConvTriple::new(ps, rng, &format!("{name}.ff{}", i + 1), width)
            }),
            lateral: std::array::from_fn(|i| {
                ConvPair::new(ps, rng, &format!("{name}.lat{}", i + 1), width)
            }),
            side: std::array::from_fn(|i| {
                let c = Conv2d::new(ps, rng, &format!("{name}.side{}", i + 1), width, 1, 1, 1, 0);
                init_prediction_conv(ps, &c);
                c
            }),
            head1: Conv2d::new(ps, rng, &format!("{name}.head1"), 4 * width, width, 3, 1, 1),
            head2: {
                let c = Conv2d::new(ps, rng, &format!("{name}.head2"), width, 1, 3, 1, 1);
                init_prediction_conv(ps, &c);
                c
            },
            width,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Decodes the four stage maps (finest first) into side maps and the
    /// final saliency map.
    pub fn apply<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bd: &Bound,
        stages: [VarId; 4],
    ) -> Result<DecoderOut, TensorError> {
        let c: Vec<VarId> = stages
            .iter()
            .enumerate()
            .map(|(i, &s)| self.compress[i].apply(g, bd, s))
            .collect::<Result<_, _>>()?;
        let hw = |g: &Graph<F>, v: VarId| (g.shape(v)[1], g.shape(v)[2]);

        let ff4 = self.ff[3].apply(g, bd, c[3])?;

        let (h3, w3) = hw(g, c[2]);
        let up = g.bilinear(ff4, h3, w3)?;
        let lat = self.lateral[2].apply(g, bd, up)?;
        let sum = g.add(c[2], lat)?;
        let ff3 = self.ff[2].apply(g, bd, sum)?;

        let (h2, w2) = hw(g, c[1]);
        let up = g.bilinear(ff3, h2, w2)?;
        let lat = self.lateral[1].apply(g, bd, up)?;
        let sum = g.add(c[1], lat)?;
        let ff2 = self.ff[1].apply(g, bd, sum)?;

        let (h1, w1) = hw(g, c[0]);
        let up = g.bilinear(ff4, h1, w1)?;
        let lat = self.lateral[0].apply(g, bd, up)?;
        let sum = g.add(c[0], lat)?;
        let ff1 = self.ff[0].apply(g, bd, sum)?;

        let ffs = [ff1, ff2, ff3, ff4];
        let mut side = [ff1; 4];
        for i in 0..4 {
            let m = self.side[i].apply(g, bd, ffs[i])?;
            side[i] = g.sigmoid(m);
        }

        let edge = srg_edge(g, ff1, side[1])?;

        let f2 = g.bilinear(ff2, h1, w1)?;
        let f3 = g.bilinear(ff3, h1, w1)?;
        let f4 = g.bilinear(ff4, h1, w1)?;
        let cat = concat_channels(g, &[edge, f2, f3, f4])?;
        let h = self.head1.apply(g, bd, cat)?;
        let h = g.gelu(h);
        let h = self.head2.apply(g, bd, h)?;
        let final_map = g.sigmoid(h);

        Ok(DecoderOut {
            ff: ffs,
            side,
            edge,
            final_map,
        })
    }
}

/// Bilinearly upsamples a decoder map to the requested extent.
pub fn to_full_res<F: Scalar>(
    g: &mut Graph<F>,
    map: VarId,
    h: usize,
    w: usize,
) -> Result<VarId, TensorError> {
    g.bilinear(map, h, w)
}
