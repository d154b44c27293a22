//! Token fusion: appearance/motion gating and cross-frame attention.
//!
//! Two gates refine a token matrix in sequence. The channel gate scores
//! every channel of the (optionally concatenated) token matrix through a
//! bottleneck MLP and re-weights the normalized tokens with a residual. The
//! token gate reduces each token to its mean activation, maps that scalar
//! through a tiny shared MLP, and re-weights whole tokens, again with a
//! residual. Their composition is the hybrid attention applied at every
//! encoder stage.
//!
//! Cross-frame attention then lets the deepest tokens of each frame in a
//! clip attend to the tokens of all other frames; frames are updated
//! synchronously for a fixed number of iterations.

use rand::Rng;

use crate::graph::{Graph, VarId};
use crate::nn::{Attention, Bound, Linear, Mlp, Norm, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::TensorError;

/// Sizing shared by the gate modules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateConfig {
    /// Bottleneck divisor for the channel gate (hidden = dim / reduction).
    pub reduction: usize,
    /// Hidden width of the per-token scalar MLP.
    pub token_hidden: usize,
    pub ln_eps: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            reduction: 2,
            token_hidden: 8,
            ln_eps: 1e-5,
        }
    }
}

/// One gating pass with its observable internals.
pub struct Gated {
    /// The normalized input the residual builds on.
    pub normed: VarId,
    /// The gate field, elementwise in (0, 1): per element for the channel
    /// gate, one weight per token row for the token gate.
    pub gate: VarId,
    /// `normed + gate * normed`.
    pub out: VarId,
}

/// Both gating passes of one hybrid application.
pub struct Hybrid {
    pub channel: Gated,
    pub token: Gated,
}

/// Channel-wise gating with a residual over the normalized input:
/// `y = LN(t) + sig(fc2(gelu(fc1(LN(t))))) * LN(t)`.
pub struct ChannelGate {
    norm: Norm,
    fc1: Linear,
    fc2: Linear,
}

impl ChannelGate {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamSet<F>,
        rng: &mut R,
        name: &str,
        dim: usize,
        cfg: &GateConfig,
    ) -> Self {
        let hidden = (dim / cfg.reduction).max(1);
        ChannelGate {
            norm: Norm::new(ps, &format!("{name}.norm"), dim, cfg.ln_eps),
            fc1: Linear::new(ps, rng, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::new(ps, rng, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn apply_detailed<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bd: &Bound,
        t: VarId,
    ) -> Result<Gated, TensorError> {
        let n = self.norm.apply(g, bd, t)?;
        let h = self.fc1.apply(g, bd, n)?;
        let h = g.gelu(h);
        let w = self.fc2.apply(g, bd, h)?;
        let w = g.sigmoid(w);
        let gated = g.mul(w, n)?;
        let out = g.add(n, gated)?;
        Ok(Gated {
            normed: n,
            gate: w,
            out,
        })
    }

    pub fn apply<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bd: &Bound,
        t: VarId,
    ) -> Result<VarId, TensorError> {
        Ok(self.apply_detailed(g, bd, t)?.out)
    }
}

/// Token-wise gating. Each token is summarized by the mean of its channels;
/// a scalar MLP shared across tokens turns that summary into a weight in
/// (0, 1), so identical tokens always receive identical weights:
/// `y = LN(t) + sig(mlp(mean_c t)) * LN(t)` (row-wise product).
pub struct TokenGate {
    norm: Norm,
    fc1: Linear,
    fc2: Linear,
}

impl TokenGate {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamSet<F>,
        rng: &mut R,
        name: &str,
        dim: usize,
        cfg: &GateConfig,
    ) -> Self {
        TokenGate {
            norm: Norm::new(ps, &format!("{name}.norm"), dim, cfg.ln_eps),
            fc1: Linear::new(ps, rng, &format!("{name}.fc1"), 1, cfg.token_hidden),
            fc2: Linear::new(ps, rng, &format!("{name}.fc2"), cfg.token_hidden, 1),
        }
    }

    pub fn apply_detailed<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bd: &Bound,
        t: VarId,
    ) -> Result<Gated, TensorError> {
        let l = g.shape(t)[0];
        let z = g.row_mean(t)?;
        let z = g.reshape(z, &[l, 1])?;
        let h = self.fc1.apply(g, bd, z)?;
        let h = g.gelu(h);
        let s = self.fc2.apply(g, bd, h)?;
        let s = g.sigmoid(s);
        let gate = g.reshape(s, &[l])?;
        let n = self.norm.apply(g, bd, t)?;
        let gated = g.scale_rows(n, gate)?;
        let out = g.add(n, gated)?;
        Ok(Gated {
            normed: n,
            gate,
            out,
        })
    }

    pub fn apply<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bd: &Bound,
        t: VarId,
    ) -> Result<VarId, TensorError> {
        Ok(self.apply_detailed(g, bd, t)?.out)
    }
}

/// Channel gate followed by token gate. For a paired input the appearance
/// and motion token matrices are concatenated along channels first, so the
/// output width doubles; a single input keeps its width.
pub struct HybridGate {
    channel: ChannelGate,
    token: TokenGate,
    dim: usize,
}

impl HybridGate {
    /// `dim` is the channel width *after* any concatenation.
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamSet<F>,
        rng: &mut R,
        name: &str,
        dim: usize,
        cfg: &GateConfig,
    ) -> Self {
        HybridGate {
            channel: ChannelGate::new(ps, rng, &format!("{name}.channel"), dim, cfg),
            token: TokenGate::new(ps, rng, &format!("{name}.token"), dim, cfg),
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn apply_detailed<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bd: &Bound,
        t: VarId,
    ) -> Result<Hybrid, TensorError> {
        let channel = self.channel.apply_detailed(g, bd, t)?;
        let token = self.token.apply_detailed(g, bd, channel.out)?;
        Ok(Hybrid { channel, token })
    }

    pub fn apply<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bd: &Bound,
        t: VarId,
    ) -> Result<VarId, TensorError> {
        Ok(self.apply_detailed(g, bd, t)?.token.out)
    }

    pub fn apply_pair<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bd: &Bound,
        appearance: VarId,
        motion: VarId,
    ) -> Result<VarId, TensorError> {
        let t = g.concat_cols(appearance, motion)?;
        self.apply(g, bd, t)
    }
}

/// Options for the cross-frame stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossFrameConfig {
    pub layers: usize,
    pub heads: usize,
    /// Hidden width of the per-layer MLP as a multiple of the token width.
    pub mlp_ratio: f64,
    /// When set, the per-layer MLP keeps a residual connection. Off by
    /// default: the layer output is `LN(mlp(x + attn))`.
    pub mlp_residual: bool,
    pub ln_eps: f64,
}

impl Default for CrossFrameConfig {
    fn default() -> Self {
        CrossFrameConfig {
            layers: 3,
            heads: 4,
            mlp_ratio: 1.0,
            mlp_residual: false,
            ln_eps: 1e-5,
        }
    }
}

struct CrossFrameLayer {
    attn: Attention,
    mlp: Mlp,
    norm: Norm,
}

/// Iterative cross-frame attention over the frames of one clip. Every
/// iteration updates all frames synchronously: frame `c` queries the
/// concatenated tokens of every other frame as computed by the previous
/// iteration. Each iteration has its own weights. A single-frame clip
/// passes through untouched.
pub struct CrossFrameAttention {
    layers: Vec<CrossFrameLayer>,
    mlp_residual: bool,
}

impl CrossFrameAttention {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamSet<F>,
        rng: &mut R,
        name: &str,
        dim: usize,
        cfg: &CrossFrameConfig,
    ) -> Self {
        let hidden = ((dim as f64 * cfg.mlp_ratio).round() as usize).max(1);
        let layers = (0..cfg.layers)
            .map(|i| CrossFrameLayer {
                attn: Attention::new(ps, rng, &format!("{name}.layer{i}.attn"), dim, cfg.heads),
                mlp: Mlp::new(ps, rng, &format!("{name}.layer{i}.mlp"), dim, hidden),
                norm: Norm::new(ps, &format!("{name}.layer{i}.norm"), dim, cfg.ln_eps),
            })
            .collect();
        CrossFrameAttention {
            layers,
            mlp_residual: cfg.mlp_residual,
        }
    }

    pub fn apply<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bd: &Bound,
        frames: &[VarId],
    ) -> Result<Vec<VarId>, TensorError> {
        if frames.len() < 2 {
            return Ok(frames.to_vec());
        }
        let mut cur = frames.to_vec();
        for layer in &self.layers {
            let mut next = Vec::with_capacity(cur.len());
            for c in 0..cur.len() {
                let mut others = None;
                for (j, &f) in cur.iter().enumerate() {
                    if j == c {
                        continue;
                    }
                    others = Some(match others {
                        None => f,
                        Some(acc) => g.concat_rows(acc, f)?,
                    });
                }
                let kv = others.expect("at least two frames");
                let a = layer.attn.apply(g, bd, cur[c], kv)?;
                let x = g.add(cur[c], a.out)?;
                let m = layer.mlp.apply(g, bd, x)?;
                let m = if self.mlp_residual { g.add(x, m)? } else { m };
                next.push(layer.norm.apply(g, bd, m)?);
            }
            cur = next;
        }
        Ok(cur)
    }
}
