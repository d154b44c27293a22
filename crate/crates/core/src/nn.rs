//! Parameter storage and the small layer vocabulary built on the graph:
//! linear projections, layer norm, MLPs, and pre-norm transformer blocks.
//!
//! Parameters live in a [`ParamSet`] as plain tensors, ordered by insertion.
//! Each forward pass binds the whole set into a fresh [`Graph`] and modules
//! address their parameters through [`ParamId`] handles, so checkpointing,
//! optimization, and gradient accumulation all walk one flat registry.

use rand::Rng;

use crate::graph::{Graph, VarId};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// Handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Ordered, named collection of trainable tensors.
pub struct ParamSet<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Registers a tensor as a trainable parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(t.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.tensors.iter_mut())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<F>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.leaf(t)).collect(),
        }
    }

    /// Adds the gradients computed in `g` into the parameter tensors.
    pub fn accumulate_from(&mut self, g: &Graph<F>, bound: &Bound) {
        for (i, t) in self.tensors.iter_mut().enumerate() {
            if let Some(grad) = g.grad(bound.vars[i]) {
                t.accumulate_grad(grad);
            }
        }
    }
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Graph-bound view of a [`ParamSet`] for one forward pass.
pub struct Bound {
    vars: Vec<VarId>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> VarId {
        self.vars[id.0]
    }
}

/// Binds `ps` into `g` as constants, except for the listed parameters,
/// which are substituted with existing graph variables. Gradient checks use
/// this to differentiate a forward pass with respect to chosen parameters.
pub fn bind_with_overrides<F: Scalar>(
    ps: &ParamSet<F>,
    g: &mut Graph<F>,
    overrides: &[(ParamId, VarId)],
) -> Bound {
    let vars = ps
        .ids()
        .map(|id| {
            overrides
                .iter()
                .find(|(p, _)| *p == id)
                .map(|(_, v)| *v)
                .unwrap_or_else(|| g.constant(ps.get(id)))
        })
        .collect();
    Bound { vars }
}

/// Normal sample truncated to two standard deviations, via rejection.
fn trunc_normal_sample<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Tensor initialized from a truncated normal distribution.
pub fn trunc_normal<F: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<F> {
    Tensor::from_fn(shape, |_| F::c(trunc_normal_sample(rng, std)))
}

/// Default initialization spread for projection weights.
pub const WEIGHT_STD: f64 = 0.02;

/// Fully connected layer: `y = x W + b`, weight stored `[in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamSet<F>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        Self::with_std(ps, rng, name, d_in, d_out, WEIGHT_STD)
    }

    pub fn with_std<F: Scalar, R: Rng>(
        ps: &mut ParamSet<F>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), trunc_normal(&[d_in, d_out], std, rng));
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[d_out]));
        Linear { w, b }
    }

    pub fn apply<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bd: &Bound,
        x: VarId,
    ) -> Result<VarId, TensorError> {
        let y = g.matmul(x, bd.var(self.w))?;
        g.add_bias_row(y, bd.var(self.b))
    }
}

/// 2d convolution realized as window extraction followed by a linear map.
/// The weight is stored `[k * k * c_in, c_out]` with window entries ordered
/// channel-major, then kernel row, then kernel column.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub lin: Linear,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv2d {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamSet<F>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        // Convolution stacks here run without normalization between layers,
        // so the spread is scaled to the window fan-in to keep activation
        // variance roughly constant through the cascade.
        let fan_in = kernel * kernel * c_in;
        let std = (2.0 / fan_in as f64).sqrt();
        Conv2d {
            lin: Linear::with_std(ps, rng, name, fan_in, c_out, std),
            kernel,
            stride,
            padding,
            c_in,
            c_out,
        }
    }

    /// `x` is `[c_in, h, w]`; the result is `[c_out, h', w']`.
    pub fn apply<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bd: &Bound,
        x: VarId,
    ) -> Result<VarId, TensorError> {
        let (h, w) = (g.shape(x)[1], g.shape(x)[2]);
        let oh = crate::graph::window_out(h, self.kernel, self.stride, self.padding)
            .ok_or(TensorError::BadArg {
                op: "conv2d",
                msg: format!("kernel {} does not fit height {h}", self.kernel),
            })?;
        let ow = crate::graph::window_out(w, self.kernel, self.stride, self.padding)
            .ok_or(TensorError::BadArg {
                op: "conv2d",
                msg: format!("kernel {} does not fit width {w}", self.kernel),
            })?;
        let u = g.unfold(x, self.kernel, self.stride, self.padding)?;
        let y = self.lin.apply(g, bd, u)?;
        let t = g.transpose2d(y)?;
        g.reshape(t, &[self.c_out, oh, ow])
    }
}

/// Layer normalization parameters (per-channel gain and bias).
#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
    eps: f64,
}

impl Norm {
    pub fn new<F: Scalar>(ps: &mut ParamSet<F>, name: &str, dim: usize, eps: f64) -> Self {
        let gain = ps.add(format!("{name}.gain"), Tensor::full(&[dim], F::one()));
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Norm { gain, bias, eps }
    }

    pub fn apply<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bd: &Bound,
        x: VarId,
    ) -> Result<VarId, TensorError> {
        g.layer_norm(x, bd.var(self.gain), bd.var(self.bias), F::c(self.eps))
    }
}

/// Two-layer feed-forward with GeLU between.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamSet<F>,
        rng: &mut R,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Mlp {
            fc1: Linear::new(ps, rng, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::new(ps, rng, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn apply<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bd: &Bound,
        x: VarId,
    ) -> Result<VarId, TensorError> {
        let h = self.fc1.apply(g, bd, x)?;
        let h = g.gelu(h);
        self.fc2.apply(g, bd, h)
    }
}

/// Multi-head attention output along with the per-head attention maps.
pub struct AttnOut {
    pub out: VarId,
    /// Row-stochastic attention matrix of each head, `[l_q, l_kv]`.
    pub maps: Vec<VarId>,
}

/// Multi-head scaled dot-product attention with learned q/k/v/output
/// projections. Queries may come from a different token set than keys and
/// values, which covers both self- and cross-attention.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    dim: usize,
}

impl Attention {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamSet<F>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "{name}: heads {heads} must divide dim {dim}");
        Attention {
            wq: Linear::new(ps, rng, &format!("{name}.wq"), dim, dim),
            wk: Linear::new(ps, rng, &format!("{name}.wk"), dim, dim),
            wv: Linear::new(ps, rng, &format!("{name}.wv"), dim, dim),
            wo: Linear::new(ps, rng, &format!("{name}.wo"), dim, dim),
            heads,
            dim,
        }
    }

    pub fn apply<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bd: &Bound,
        queries: VarId,
        keys_values: VarId,
    ) -> Result<AttnOut, TensorError> {
        let q = self.wq.apply(g, bd, queries)?;
        let k = self.wk.apply(g, bd, keys_values)?;
        let v = self.wv.apply(g, bd, keys_values)?;
        let dh = self.dim / self.heads;
        let scale = F::c(1.0 / (dh as f64).sqrt());
        let mut head_outs = Vec::with_capacity(self.heads);
        let mut maps = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose2d(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores, 1)?;
            maps.push(attn);
            head_outs.push(g.matmul(attn, vh)?);
        }
        let mut cat = head_outs[0];
        for &h in &head_outs[1..] {
            cat = g.concat_cols(cat, h)?;
        }
        let out = self.wo.apply(g, bd, cat)?;
        Ok(AttnOut { out, maps })
    }
}

/// Pre-norm transformer block: `x + MSA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamSet<F>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: f64,
        ln_eps: f64,
    ) -> Self {
        let hidden = ((dim as f64 * mlp_ratio).round() as usize).max(1);
        Block {
            norm1: Norm::new(ps, &format!("{name}.norm1"), dim, ln_eps),
            attn: Attention::new(ps, rng, &format!("{name}.attn"), dim, heads),
            norm2: Norm::new(ps, &format!("{name}.norm2"), dim, ln_eps),
            mlp: Mlp::new(ps, rng, &format!("{name}.mlp"), dim, hidden),
        }
    }

    pub fn apply<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bd: &Bound,
        x: VarId,
    ) -> Result<VarId, TensorError> {
        let n1 = self.norm1.apply(g, bd, x)?;
        let a = self.attn.apply(g, bd, n1, n1)?;
        let x = g.add(x, a.out)?;
        let n2 = self.norm2.apply(g, bd, x)?;
        let m = self.mlp.apply(g, bd, n2)?;
        g.add(x, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::check::{rand_tensor, GradCheck};
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn trunc_normal_bounded_and_deterministic() {
        let mut r1 = StdRng::seed_from_u64(7);
        let mut r2 = StdRng::seed_from_u64(7);
        let a: Tensor<f64> = trunc_normal(&[1000], 0.02, &mut r1);
        let b: Tensor<f64> = trunc_normal(&[1000], 0.02, &mut r2);
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|v| v.abs() <= 0.04));
        let var: f64 = a.data().iter().map(|v| v * v).sum::<f64>() / 1000.0;
        assert!(var > 1e-5, "degenerate init variance {var}");
    }

    #[test]
    fn param_names_unique_and_ordered() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = StdRng::seed_from_u64(1);
        let lin = Linear::new(&mut ps, &mut rng, "layer", 3, 2);
        assert_eq!(ps.name(lin.w), "layer.w");
        assert_eq!(ps.name(lin.b), "layer.b");
        assert_eq!(ps.find("layer.b"), Some(lin.b));
        assert_eq!(ps.len(), 2);
    }

    #[test]
    fn block_is_identity_with_zeroed_output_projections() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = StdRng::seed_from_u64(2);
        let block = Block::new(&mut ps, &mut rng, "blk", 8, 2, 1.0, 1e-5);
        for id in [block.attn.wo.w, block.attn.wo.b, block.mlp.fc2.w, block.mlp.fc2.b] {
            let t = ps.get_mut(id);
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let x = rand_tensor(&[5, 8], -1.0, 1.0, 3);
        let mut g = Graph::new();
        let bd = ps.bind(&mut g);
        let xv = g.constant(&x);
        let y = block.apply(&mut g, &bd, xv).unwrap();
        assert_eq!(g.data(y), x.data());
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = StdRng::seed_from_u64(4);
        let attn = Attention::new(&mut ps, &mut rng, "a", 8, 4);
        let x = rand_tensor(&[6, 8], -1.0, 1.0, 5);
        let kv = rand_tensor(&[9, 8], -1.0, 1.0, 6);
        let mut g = Graph::new();
        let bd = ps.bind(&mut g);
        let xv = g.constant(&x);
        let kvv = g.constant(&kv);
        let out = attn.apply(&mut g, &bd, xv, kvv).unwrap();
        assert_eq!(out.maps.len(), 4);
        for &m in &out.maps {
            assert_eq!(g.shape(m), &[6, 9]);
            for i in 0..6 {
                let sum: f64 = g.data(m)[i * 9..(i + 1) * 9].iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
        assert_eq!(g.shape(out.out), &[6, 8]);
    }

    #[test]
    fn gradcheck_block_composite() {
        for inst in 0..3 {
            let mut ps = ParamSet::<f64>::new();
            let mut rng = StdRng::seed_from_u64(40 + inst);
            let block = Block::new(&mut ps, &mut rng, "blk", 6, 2, 1.0, 1e-5);
            // Check the input gradient and a couple of parameter tensors by
            // treating them as extra leaves.
            let x = rand_tensor(&[4, 6], -1.0, 1.0, 50 + inst);
            let wq = ps.get(block.attn.wq.w).clone();
            let fc1 = ps.get(block.mlp.fc1.w).clone();
            GradCheck::with_tol(1e-3, 1e-7).coords(40).run(
                &[x, wq, fc1],
                &|g, ids| {
                    let bd = bind_with_overrides(
                        &ps,
                        g,
                        &[(block.attn.wq.w, ids[1]), (block.mlp.fc1.w, ids[2])],
                    );
                    let y = block.apply(g, &bd, ids[0])?;
                    let s = g.sigmoid(y);
                    Ok(g.sum_all(s))
                },
            );
        }
    }
}
