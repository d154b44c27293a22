//! Full network: shared encoder, per-stage fusion gates, cross-frame
//! attention, cascade decoder.
//!
//! Every frame of a clip contributes an RGB image and a color-encoded flow
//! image. Both are encoded by the *same* token encoder. The first-stage
//! tokens of each modality pass through their own hybrid gates; the second
//! and third stages are gated as concatenated pairs. The deepest paired
//! tokens of all frames exchange information through cross-frame attention,
//! and the decoder turns the four token stages of each frame into side maps
//! and a final saliency map.
//!
//! Cross-frame parameters live under the `lcfa.` name prefix so the
//! optimizer can assign them their own learning rate.

use rand::Rng;

use crate::decoder::{Decoder, DecoderOut};
use crate::encoder::{tokens_to_spatial, Encoder, EncoderConfig, SplitSpec};
use crate::fusion::{CrossFrameAttention, CrossFrameConfig, GateConfig, HybridGate};
use crate::graph::{Graph, VarId};
use crate::nn::{Bound, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub gate: GateConfig,
    pub cross: CrossFrameConfig,
    pub decoder_width: usize,
}

impl ModelConfig {
    /// The 64x64 desk-scale network.
    pub fn desk() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                in_channels: 3,
                input_h: 64,
                input_w: 64,
                splits: [
                    SplitSpec::new(7, 4, 2),
                    SplitSpec::new(3, 2, 1),
                    SplitSpec::new(3, 2, 1),
                ],
                embed_dims: [64, 64, 64],
                depth: 2,
                heads: 4,
                mlp_ratio: 1.0,
                ln_eps: 1e-5,
            },
            gate: GateConfig::default(),
            cross: CrossFrameConfig::default(),
            decoder_width: 64,
        }
    }
}

/// One RGB frame and its color-encoded flow, both `[3, h, w]`.
#[derive(Debug, Clone, Copy)]
pub struct FrameInput {
    pub rgb: VarId,
    pub flow: VarId,
}

/// Per-frame network outputs. Side maps and the final map are upsampled to
/// the input image extent; the decoder internals stay at native resolution.
pub struct FrameOutput {
    pub side_full: [VarId; 4],
    pub final_full: VarId,
    pub decoder: DecoderOut,
}

pub struct Model {
    pub cfg: ModelConfig,
    encoder: Encoder,
    gate_rgb: HybridGate,
    gate_flow: HybridGate,
    gate_mid: HybridGate,
    gate_deep: HybridGate,
    cross: CrossFrameAttention,
    decoder: Decoder,
}

impl Model {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamSet<F>,
        rng: &mut R,
        cfg: ModelConfig,
    ) -> Result<Self, TensorError> {
        let enc_cfg = cfg.encoder.clone();
        let d1 = enc_cfg.embed_dims[0];
        let d2 = enc_cfg.embed_dims[1];
        let d3 = enc_cfg.embed_dims[2];
        let encoder = Encoder::new(ps, rng, "enc", enc_cfg)?;
        let gate_rgb = HybridGate::new(ps, rng, "gate.s1_rgb", d1, &cfg.gate);
        let gate_flow = HybridGate::new(ps, rng, "gate.s1_flow", d1, &cfg.gate);
        let gate_mid = HybridGate::new(ps, rng, "gate.s2", 2 * d2, &cfg.gate);
        let gate_deep = HybridGate::new(ps, rng, "gate.s3", 2 * d3, &cfg.gate);
        let cross = CrossFrameAttention::new(ps, rng, "lcfa", 2 * d3, &cfg.cross);
        let decoder = Decoder::new(ps, rng, "dec", [d1, d1, 2 * d2, 2 * d3], cfg.decoder_width);
        Ok(Model {
            cfg,
            encoder,
            gate_rgb,
            gate_flow,
            gate_mid,
            gate_deep,
            cross,
            decoder,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// Runs the network over a whole clip. A single-frame clip skips the
    /// cross-frame exchange entirely.
    pub fn forward_clip<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bd: &Bound,
        frames: &[FrameInput],
    ) -> Result<Vec<FrameOutput>, TensorError> {
        let grids = self.encoder.grids();
        let (ih, iw) = (self.cfg.encoder.input_h, self.cfg.encoder.input_w);

        let mut stage_a = Vec::with_capacity(frames.len());
        let mut stage_b = Vec::with_capacity(frames.len());
        let mut stage_c = Vec::with_capacity(frames.len());
        let mut deep = Vec::with_capacity(frames.len());
        for f in frames {
            let r = self.encoder.encode(g, bd, f.rgb)?;
            let o = self.encoder.encode(g, bd, f.flow)?;
            stage_a.push(self.gate_rgb.apply(g, bd, r[0].tokens)?);
            stage_b.push(self.gate_flow.apply(g, bd, o[0].tokens)?);
            stage_c.push(self.gate_mid.apply_pair(g, bd, r[1].tokens, o[1].tokens)?);
            deep.push(self.gate_deep.apply_pair(g, bd, r[2].tokens, o[2].tokens)?);
        }
        let linked = self.cross.apply(g, bd, &deep)?;

        let mut outs = Vec::with_capacity(frames.len());
        for i in 0..frames.len() {
            let m1 = tokens_to_spatial(g, stage_a[i], grids[0].0, grids[0].1)?;
            let m2 = tokens_to_spatial(g, stage_b[i], grids[0].0, grids[0].1)?;
            let m3 = tokens_to_spatial(g, stage_c[i], grids[1].0, grids[1].1)?;
            let m4 = tokens_to_spatial(g, linked[i], grids[2].0, grids[2].1)?;
            let dec = self.decoder.apply(g, bd, [m1, m2, m3, m4])?;
            let mut side_full = [dec.final_map; 4];
            for (k, &s) in dec.side.iter().enumerate() {
                side_full[k] = g.bilinear(s, ih, iw)?;
            }
            let final_full = g.bilinear(dec.final_map, ih, iw)?;
            outs.push(FrameOutput {
                side_full,
                final_full,
                decoder: dec,
            });
        }
        Ok(outs)
    }
}
