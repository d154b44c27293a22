//! Reverse-mode automatic differentiation on a tape of tensor operations.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each operation appends a
//! node holding its output value and the ids of its inputs, so the tape is
//! already in topological order; [`Graph::backward`] walks it once in
//! reverse, applying the local adjoint rule of every node. Leaves created
//! from tensors with `requires_grad` set receive gradients, which the caller
//! copies back into the owning tensors.
//!
//! Values are copied into the graph at registration, so mutating a tensor
//! between forward passes never invalidates a live graph.

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

const GELU_COEF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Output spatial extent of a strided window sweep, or `None` when the
/// geometry admits no window. Uses floor division, so trailing padded
/// columns that do not fill a whole stride are dropped.
pub fn window_out(extent: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    if k == 0 || s == 0 {
        return None;
    }
    let padded = extent + 2 * p;
    if padded < k {
        return None;
    }
    Some((padded - k) / s + 1)
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, F),
    AddScalar(VarId, F),
    Sigmoid(VarId),
    Gelu(VarId),
    Exp(VarId),
    Ln(VarId),
    SafeLn(VarId, F),
    Abs(VarId),
    Clamp(VarId, F, F),
    Matmul(VarId, VarId),
    Transpose2d(VarId),
    Reshape(VarId),
    ConcatRows(VarId, VarId),
    ConcatCols(VarId, VarId),
    SliceRows {
        x: VarId,
        start: usize,
    },
    SliceCols {
        x: VarId,
        start: usize,
        len: usize,
    },
    SoftmaxRows(VarId),
    LayerNorm {
        x: VarId,
        gain: VarId,
        bias: VarId,
        eps: F,
    },
    RowMean(VarId),
    ScaleRows {
        x: VarId,
        s: VarId,
    },
    ScaleCols {
        x: VarId,
        s: VarId,
    },
    AddBiasRow {
        x: VarId,
        b: VarId,
    },
    SumAll(VarId),
    Unfold {
        x: VarId,
        k: usize,
        s: usize,
        p: usize,
    },
    Bilinear {
        x: VarId,
        th: usize,
        tw: usize,
    },
    /// Sum of |x[i] - x[i+step]| weighted per position; one term per entry
    /// of `w`, generated for horizontal (`step = 1`) and vertical
    /// (`step = row width`) neighbors by the caller.
    WeightedAbsDiff {
        x: VarId,
        pairs: Vec<(usize, usize)>,
        w: Vec<F>,
    },
}

struct Node<F> {
    op: Op<F>,
    shape: Vec<usize>,
    value: Vec<F>,
    grad: Option<Vec<F>>,
    requires: bool,
}

/// Reverse-mode autodiff tape.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

// ---------------------------------------------------------------------------
// Raw matrix kernels, shared by forward ops and adjoints.

/// out[m,n] += a[m,k] * b[k,n]
pub(crate) fn matmul_nn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += aik * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T
pub(crate) fn matmul_nt<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (j, c) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *c += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]
pub(crate) fn matmul_tn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let brow = &b[r * n..(r + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut out[i * n..(i + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += av * bv;
            }
        }
    }
}

fn sigmoid_val<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn gelu_val<F: Scalar>(x: F) -> F {
    let a = F::c(SQRT_2_OVER_PI);
    let b = F::c(GELU_COEF);
    let half = F::c(0.5);
    let inner = a * (x + b * x * x * x);
    half * x * (F::one() + inner.tanh())
}

fn gelu_deriv<F: Scalar>(x: F) -> F {
    let a = F::c(SQRT_2_OVER_PI);
    let b = F::c(GELU_COEF);
    let half = F::c(0.5);
    let three = F::c(3.0);
    let t = (a * (x + b * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * a * (F::one() + three * b * x * x)
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<F>, shape: Vec<usize>, value: Vec<F>, requires: bool) -> VarId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            grad: None,
            requires,
        });
        VarId(self.nodes.len() - 1)
    }

    fn req(&self, v: VarId) -> bool {
        self.nodes[v.0].requires
    }

    /// Registers a tensor as a leaf; gradient tracking follows
    /// `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<F>) -> VarId {
        self.push(
            Op::Leaf,
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad,
        )
    }

    /// Registers a tensor as a non-differentiable constant.
    pub fn constant(&mut self, t: &Tensor<F>) -> VarId {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn shape(&self, v: VarId) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: VarId) -> &[F] {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, v: VarId) -> F {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: VarId) -> Tensor<F> {
        Tensor::from_vec(&self.nodes[v.0].shape, self.nodes[v.0].value.clone())
            .expect("node shape consistent")
    }

    /// Gradient of a node, if backward reached it.
    pub fn grad(&self, v: VarId) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    // -- elementwise ---------------------------------------------------------

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: VarId,
        b: VarId,
    ) -> Result<(), TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        self.binary_same_shape("add", a, b)?;
        let v: Vec<F> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let r = self.req(a) || self.req(b);
        Ok(self.push(Op::Add(a, b), shape, v, r))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        self.binary_same_shape("sub", a, b)?;
        let v: Vec<F> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let r = self.req(a) || self.req(b);
        Ok(self.push(Op::Sub(a, b), shape, v, r))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        self.binary_same_shape("mul", a, b)?;
        let v: Vec<F> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let r = self.req(a) || self.req(b);
        Ok(self.push(Op::Mul(a, b), shape, v, r))
    }

    pub fn scale(&mut self, x: VarId, c: F) -> VarId {
        let v: Vec<F> = self.nodes[x.0].value.iter().map(|&a| a * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let r = self.req(x);
        self.push(Op::Scale(x, c), shape, v, r)
    }

    pub fn add_scalar(&mut self, x: VarId, c: F) -> VarId {
        let v: Vec<F> = self.nodes[x.0].value.iter().map(|&a| a + c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let r = self.req(x);
        self.push(Op::AddScalar(x, c), shape, v, r)
    }

    fn unary(&mut self, x: VarId, op: Op<F>, f: impl Fn(F) -> F) -> VarId {
        let v: Vec<F> = self.nodes[x.0].value.iter().map(|&a| f(a)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let r = self.req(x);
        self.push(op, shape, v, r)
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        self.unary(x, Op::Sigmoid(x), sigmoid_val)
    }

    pub fn gelu(&mut self, x: VarId) -> VarId {
        self.unary(x, Op::Gelu(x), gelu_val)
    }

    pub fn exp(&mut self, x: VarId) -> VarId {
        self.unary(x, Op::Exp(x), |a| a.exp())
    }

    /// Natural log; rejects non-positive inputs.
    pub fn ln(&mut self, x: VarId) -> Result<VarId, TensorError> {
        if self.nodes[x.0].value.iter().any(|&a| a <= F::zero()) {
            return Err(TensorError::BadArg {
                op: "ln",
                msg: "non-positive input".into(),
            });
        }
        Ok(self.unary(x, Op::Ln(x), |a| a.ln()))
    }

    /// Logarithm with a linear continuation below `eps`: `ln(x)` for
    /// `x >= eps`, `ln(eps) + (x - eps)/eps` otherwise. Continuously
    /// differentiable with slope `1/max(x, eps)`, it keeps cross-entropy
    /// values finite and gradients alive at saturated predictions.
    pub fn safe_ln(&mut self, x: VarId, eps: F) -> VarId {
        self.unary(x, Op::SafeLn(x, eps), |a| {
            if a >= eps {
                a.ln()
            } else {
                eps.ln() + (a - eps) / eps
            }
        })
    }

    /// Absolute value with subgradient 0 at 0.
    pub fn abs(&mut self, x: VarId) -> VarId {
        self.unary(x, Op::Abs(x), |a| a.abs())
    }

    /// Clamp to `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&mut self, x: VarId, lo: F, hi: F) -> VarId {
        self.unary(x, Op::Clamp(x, lo, hi), |a| {
            if a < lo {
                lo
            } else if a > hi {
                hi
            } else {
                a
            }
        })
    }

    // -- linear algebra ------------------------------------------------------

    fn rank2(&self, op: &'static str, v: VarId) -> Result<(usize, usize), TensorError> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(TensorError::BadRank {
                op,
                expected: "a rank-2 tensor",
                got: s.clone(),
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut v = vec![F::zero(); m * n];
        matmul_nn(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n, &mut v);
        let r = self.req(a) || self.req(b);
        Ok(self.push(Op::Matmul(a, b), vec![m, n], v, r))
    }

    pub fn transpose2d(&mut self, x: VarId) -> Result<VarId, TensorError> {
        let (m, n) = self.rank2("transpose2d", x)?;
        let src = &self.nodes[x.0].value;
        let mut v = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                v[j * m + i] = src[i * n + j];
            }
        }
        let r = self.req(x);
        Ok(self.push(Op::Transpose2d(x), vec![n, m], v, r))
    }

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> Result<VarId, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.nodes[x.0].value.len() {
            return Err(TensorError::LengthMismatch {
                len: self.nodes[x.0].value.len(),
                shape: shape.to_vec(),
                expected,
            });
        }
        let v = self.nodes[x.0].value.clone();
        let r = self.req(x);
        Ok(self.push(Op::Reshape(x), shape.to_vec(), v, r))
    }

    pub fn concat_rows(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (m1, n1) = self.rank2("concat_rows", a)?;
        let (m2, n2) = self.rank2("concat_rows", b)?;
        if n1 != n2 {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                left: vec![m1, n1],
                right: vec![m2, n2],
            });
        }
        let mut v = Vec::with_capacity((m1 + m2) * n1);
        v.extend_from_slice(&self.nodes[a.0].value);
        v.extend_from_slice(&self.nodes[b.0].value);
        let r = self.req(a) || self.req(b);
        Ok(self.push(Op::ConcatRows(a, b), vec![m1 + m2, n1], v, r))
    }

    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (m1, n1) = self.rank2("concat_cols", a)?;
        let (m2, n2) = self.rank2("concat_cols", b)?;
        if m1 != m2 {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                left: vec![m1, n1],
                right: vec![m2, n2],
            });
        }
        let mut v = Vec::with_capacity(m1 * (n1 + n2));
        for i in 0..m1 {
            v.extend_from_slice(&self.nodes[a.0].value[i * n1..(i + 1) * n1]);
            v.extend_from_slice(&self.nodes[b.0].value[i * n2..(i + 1) * n2]);
        }
        let r = self.req(a) || self.req(b);
        Ok(self.push(Op::ConcatCols(a, b), vec![m1, n1 + n2], v, r))
    }

    pub fn slice_rows(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId, TensorError> {
        let (m, n) = self.rank2("slice_rows", x)?;
        if start + len > m {
            return Err(TensorError::BadArg {
                op: "slice_rows",
                msg: format!("rows {}..{} out of 0..{}", start, start + len, m),
            });
        }
        let v = self.nodes[x.0].value[start * n..(start + len) * n].to_vec();
        let r = self.req(x);
        Ok(self.push(Op::SliceRows { x, start }, vec![len, n], v, r))
    }

    pub fn slice_cols(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId, TensorError> {
        let (m, n) = self.rank2("slice_cols", x)?;
        if start + len > n {
            return Err(TensorError::BadArg {
                op: "slice_cols",
                msg: format!("cols {}..{} out of 0..{}", start, start + len, n),
            });
        }
        let src = &self.nodes[x.0].value;
        let mut v = Vec::with_capacity(m * len);
        for i in 0..m {
            v.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let r = self.req(x);
        Ok(self.push(Op::SliceCols { x, start, len }, vec![m, len], v, r))
    }

    /// Softmax over `axis` of a rank-2 tensor. Non-finite inputs are
    /// rejected.
    pub fn softmax(&mut self, x: VarId, axis: usize) -> Result<VarId, TensorError> {
        let (_, _) = self.rank2("softmax", x)?;
        if axis > 1 {
            return Err(TensorError::BadArg {
                op: "softmax",
                msg: format!("axis {axis} out of range for rank 2"),
            });
        }
        if self.nodes[x.0].value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        if axis == 0 {
            let t = self.transpose2d(x)?;
            let s = self.softmax_rows(t);
            return self.transpose2d(s);
        }
        Ok(self.softmax_rows(x))
    }

    fn softmax_rows(&mut self, x: VarId) -> VarId {
        let (m, n) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
        let src = &self.nodes[x.0].value;
        let mut v = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let out = &mut v[i * n..(i + 1) * n];
            let mut sum = F::zero();
            for (o, &r) in out.iter_mut().zip(row) {
                *o = (r - mx).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o = *o / sum;
            }
        }
        let r = self.req(x);
        self.push(Op::SoftmaxRows(x), vec![m, n], v, r)
    }

    /// Layer normalization over the last axis of `[rows, channels]`, with
    /// per-channel gain and bias. Uses population variance.
    pub fn layer_norm(
        &mut self,
        x: VarId,
        gain: VarId,
        bias: VarId,
        eps: F,
    ) -> Result<VarId, TensorError> {
        let (m, n) = self.rank2("layer_norm", x)?;
        if self.nodes[gain.0].shape != [n] || self.nodes[bias.0].shape != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: vec![m, n],
                right: self.nodes[gain.0].shape.clone(),
            });
        }
        let src = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value;
        let b = &self.nodes[bias.0].value;
        let cn = F::from_usize(n).unwrap();
        let mut v = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mut mu = F::zero();
            for &r in row {
                mu += r;
            }
            mu = mu / cn;
            let mut var = F::zero();
            for &r in row {
                let d = r - mu;
                var += d * d;
            }
            var = var / cn;
            let inv = F::one() / (var + eps).sqrt();
            let out = &mut v[i * n..(i + 1) * n];
            for j in 0..n {
                out[j] = (row[j] - mu) * inv * g[j] + b[j];
            }
        }
        let r = self.req(x) || self.req(gain) || self.req(bias);
        Ok(self.push(Op::LayerNorm { x, gain, bias, eps }, vec![m, n], v, r))
    }

    /// Per-row mean of a rank-2 tensor: `[l, c] -> [l]`.
    pub fn row_mean(&mut self, x: VarId) -> Result<VarId, TensorError> {
        let (m, n) = self.rank2("row_mean", x)?;
        let src = &self.nodes[x.0].value;
        let cn = F::from_usize(n).unwrap();
        let v: Vec<F> = (0..m)
            .map(|i| {
                let mut s = F::zero();
                for &r in &src[i * n..(i + 1) * n] {
                    s += r;
                }
                s / cn
            })
            .collect();
        let r = self.req(x);
        Ok(self.push(Op::RowMean(x), vec![m], v, r))
    }

    /// Multiplies row `i` of `x[l, c]` by `s[i]`.
    pub fn scale_rows(&mut self, x: VarId, s: VarId) -> Result<VarId, TensorError> {
        let (m, n) = self.rank2("scale_rows", x)?;
        if self.nodes[s.0].shape != [m] {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                left: vec![m, n],
                right: self.nodes[s.0].shape.clone(),
            });
        }
        let src = &self.nodes[x.0].value;
        let sc = &self.nodes[s.0].value;
        let mut v = vec![F::zero(); m * n];
        for i in 0..m {
            let si = sc[i];
            for j in 0..n {
                v[i * n + j] = src[i * n + j] * si;
            }
        }
        let r = self.req(x) || self.req(s);
        Ok(self.push(Op::ScaleRows { x, s }, vec![m, n], v, r))
    }

    /// Multiplies column `j` of `x[m, n]` by `s[j]`.
    pub fn scale_cols(&mut self, x: VarId, s: VarId) -> Result<VarId, TensorError> {
        let (m, n) = self.rank2("scale_cols", x)?;
        if self.nodes[s.0].shape != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "scale_cols",
                left: vec![m, n],
                right: self.nodes[s.0].shape.clone(),
            });
        }
        let src = &self.nodes[x.0].value;
        let sc = &self.nodes[s.0].value;
        let mut v = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                v[i * n + j] = src[i * n + j] * sc[j];
            }
        }
        let r = self.req(x) || self.req(s);
        Ok(self.push(Op::ScaleCols { x, s }, vec![m, n], v, r))
    }

    /// Adds bias vector `b[c]` to every row of `x[l, c]`.
    pub fn add_bias_row(&mut self, x: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (m, n) = self.rank2("add_bias_row", x)?;
        if self.nodes[b.0].shape != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias_row",
                left: vec![m, n],
                right: self.nodes[b.0].shape.clone(),
            });
        }
        let src = &self.nodes[x.0].value;
        let bias = &self.nodes[b.0].value;
        let mut v = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                v[i * n + j] = src[i * n + j] + bias[j];
            }
        }
        let r = self.req(x) || self.req(b);
        Ok(self.push(Op::AddBiasRow { x, b }, vec![m, n], v, r))
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let mut s = F::zero();
        for &v in &self.nodes[x.0].value {
            s += v;
        }
        let r = self.req(x);
        self.push(Op::SumAll(x), vec![1], vec![s], r)
    }

    // -- spatial -------------------------------------------------------------

    fn rank3(&self, op: &'static str, v: VarId) -> Result<(usize, usize, usize), TensorError> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 3 {
            return Err(TensorError::BadRank {
                op,
                expected: "a [channels, h, w] tensor",
                got: s.clone(),
            });
        }
        Ok((s[0], s[1], s[2]))
    }

    /// Extracts overlapping `k x k` windows from `[c, h, w]` with stride `s`
    /// and zero padding `p`. Output is `[tokens, k*k*c]`, tokens in row-major
    /// grid order, window entries ordered channel-major then row then column.
    pub fn unfold(&mut self, x: VarId, k: usize, s: usize, p: usize) -> Result<VarId, TensorError> {
        let (c, h, w) = self.rank3("unfold", x)?;
        let (oh, ow) = match (window_out(h, k, s, p), window_out(w, k, s, p)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(TensorError::BadArg {
                    op: "unfold",
                    msg: format!("window k={k} s={s} p={p} does not fit {h}x{w}"),
                })
            }
        };
        let src = &self.nodes[x.0].value;
        let tok_len = k * k * c;
        let mut v = vec![F::zero(); oh * ow * tok_len];
        for oy in 0..oh {
            for ox in 0..ow {
                let t = oy * ow + ox;
                let base = t * tok_len;
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            let idx = base + (ci * k + ky) * k + kx;
                            if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                v[idx] = src[(ci * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        let r = self.req(x);
        Ok(self.push(Op::Unfold { x, k, s, p }, vec![oh * ow, tok_len], v, r))
    }

    /// Bilinear resampling of `[c, h, w]` to `[c, th, tw]` with half-pixel
    /// centers and edge clamping.
    pub fn bilinear(&mut self, x: VarId, th: usize, tw: usize) -> Result<VarId, TensorError> {
        let (c, h, w) = self.rank3("bilinear", x)?;
        if th == 0 || tw == 0 {
            return Err(TensorError::BadArg {
                op: "bilinear",
                msg: "target size must be positive".into(),
            });
        }
        let src = &self.nodes[x.0].value;
        let mut v = vec![F::zero(); c * th * tw];
        let half = F::c(0.5);
        let sy_scale = F::from_usize(h).unwrap() / F::from_usize(th).unwrap();
        let sx_scale = F::from_usize(w).unwrap() / F::from_usize(tw).unwrap();
        for oy in 0..th {
            let sy = (F::from_usize(oy).unwrap() + half) * sy_scale - half;
            let (y0, y1, ty) = bilinear_taps(sy, h);
            for ox in 0..tw {
                let sx = (F::from_usize(ox).unwrap() + half) * sx_scale - half;
                let (x0, x1, tx) = bilinear_taps(sx, w);
                for ci in 0..c {
                    let plane = ci * h * w;
                    let v00 = src[plane + y0 * w + x0];
                    let v01 = src[plane + y0 * w + x1];
                    let v10 = src[plane + y1 * w + x0];
                    let v11 = src[plane + y1 * w + x1];
                    let top = v00 + (v01 - v00) * tx;
                    let bot = v10 + (v11 - v10) * tx;
                    v[(ci * th + oy) * tw + ox] = top + (bot - top) * ty;
                }
            }
        }
        let r = self.req(x);
        Ok(self.push(Op::Bilinear { x, th, tw }, vec![c, th, tw], v, r))
    }

    /// Sum over explicit index pairs of `w * |x[i] - x[j]|`. The pair list
    /// and weights are fixed data, so only `x` receives gradients.
    pub fn weighted_abs_diff(
        &mut self,
        x: VarId,
        pairs: Vec<(usize, usize)>,
        w: Vec<F>,
    ) -> Result<VarId, TensorError> {
        if pairs.len() != w.len() {
            return Err(TensorError::BadArg {
                op: "weighted_abs_diff",
                msg: format!("{} pairs vs {} weights", pairs.len(), w.len()),
            });
        }
        let n = self.nodes[x.0].value.len();
        if pairs.iter().any(|&(i, j)| i >= n || j >= n) {
            return Err(TensorError::BadArg {
                op: "weighted_abs_diff",
                msg: "pair index out of range".into(),
            });
        }
        let src = &self.nodes[x.0].value;
        let mut s = F::zero();
        for (&(i, j), &wi) in pairs.iter().zip(&w) {
            s += wi * (src[i] - src[j]).abs();
        }
        let r = self.req(x);
        Ok(self.push(Op::WeightedAbsDiff { x, pairs, w }, vec![1], vec![s], r))
    }

    // -- backward ------------------------------------------------------------

    /// Accumulates gradients of every tracked node reachable from `loss`.
    /// `loss` must be a single-element tensor. Calling backward repeatedly
    /// keeps accumulating into existing gradients.
    pub fn backward(&mut self, loss: VarId) -> Result<(), TensorError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::BadRank {
                op: "backward",
                expected: "a scalar loss",
                got: self.nodes[loss.0].shape.clone(),
            });
        }
        // Each call is a fresh propagation pass; only leaf gradients
        // survive between passes, so repeated backwards accumulate there.
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        {
            let node = &mut self.nodes[loss.0];
            let g = node.grad.get_or_insert_with(|| vec![F::zero(); 1]);
            g[0] += F::one();
        }
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires {
                continue;
            }
            self.backprop_node(i);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize) {
        let (before, rest) = self.nodes.split_at_mut(i);
        let node = &rest[0];
        let gout = node.grad.as_deref().expect("checked by caller");

        let acc = |nodes: &mut [Node<F>], id: VarId, f: &mut dyn FnMut(&mut [F], &[F])| {
            if !nodes[id.0].requires {
                return;
            }
            let len = nodes[id.0].value.len();
            let value = std::mem::take(&mut nodes[id.0].value);
            let gbuf = nodes[id.0]
                .grad
                .get_or_insert_with(|| vec![F::zero(); len]);
            f(gbuf, &value);
            nodes[id.0].value = value;
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(before, *a, &mut |g, _| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
                acc(before, *b, &mut |g, _| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(before, *a, &mut |g, _| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
                acc(before, *b, &mut |g, _| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi -= go;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let bv = before[b.0].value.clone();
                acc(before, a, &mut |g, _| {
                    for ((gi, &go), &y) in g.iter_mut().zip(gout).zip(&bv) {
                        *gi += go * y;
                    }
                });
                let av = before[a.0].value.clone();
                acc(before, b, &mut |g, _| {
                    for ((gi, &go), &x) in g.iter_mut().zip(gout).zip(&av) {
                        *gi += go * x;
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                acc(before, *x, &mut |g, _| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go * c;
                    }
                });
            }
            Op::AddScalar(x, _) => {
                acc(before, *x, &mut |g, _| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.clone();
                acc(before, *x, &mut |g, _| {
                    for ((gi, &go), &yo) in g.iter_mut().zip(gout).zip(&y) {
                        *gi += go * yo * (F::one() - yo);
                    }
                });
            }
            Op::Gelu(x) => {
                acc(before, *x, &mut |g, xv| {
                    for ((gi, &go), &xo) in g.iter_mut().zip(gout).zip(xv) {
                        *gi += go * gelu_deriv(xo);
                    }
                });
            }
            Op::Exp(x) => {
                let y = node.value.clone();
                acc(before, *x, &mut |g, _| {
                    for ((gi, &go), &yo) in g.iter_mut().zip(gout).zip(&y) {
                        *gi += go * yo;
                    }
                });
            }
            Op::Ln(x) => {
                acc(before, *x, &mut |g, xv| {
                    for ((gi, &go), &xo) in g.iter_mut().zip(gout).zip(xv) {
                        *gi += go / xo;
                    }
                });
            }
            Op::SafeLn(x, eps) => {
                let eps = *eps;
                acc(before, *x, &mut |g, xv| {
                    for ((gi, &go), &xo) in g.iter_mut().zip(gout).zip(xv) {
                        *gi += go / if xo >= eps { xo } else { eps };
                    }
                });
            }
            Op::Abs(x) => {
                acc(before, *x, &mut |g, xv| {
                    for ((gi, &go), &xo) in g.iter_mut().zip(gout).zip(xv) {
                        let s = if xo > F::zero() {
                            F::one()
                        } else if xo < F::zero() {
                            -F::one()
                        } else {
                            F::zero()
                        };
                        *gi += go * s;
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc(before, *x, &mut |g, xv| {
                    for ((gi, &go), &xo) in g.iter_mut().zip(gout).zip(xv) {
                        if xo >= lo && xo <= hi {
                            *gi += go;
                        }
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let m = before[a.0].shape[0];
                let k = before[a.0].shape[1];
                let n = before[b.0].shape[1];
                let bv = before[b.0].value.clone();
                acc(before, a, &mut |g, _| {
                    matmul_nt(gout, &bv, m, n, k, g);
                });
                let av = before[a.0].value.clone();
                acc(before, b, &mut |g, _| {
                    matmul_tn(&av, gout, m, k, n, g);
                });
            }
            Op::Transpose2d(x) => {
                let (n, m) = (node.shape[0], node.shape[1]);
                acc(before, *x, &mut |g, _| {
                    for i in 0..n {
                        for j in 0..m {
                            g[j * n + i] += gout[i * m + j];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                acc(before, *x, &mut |g, _| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let (a, b) = (*a, *b);
                let na = before[a.0].value.len();
                acc(before, a, &mut |g, _| {
                    for (gi, &go) in g.iter_mut().zip(&gout[..na]) {
                        *gi += go;
                    }
                });
                acc(before, b, &mut |g, _| {
                    for (gi, &go) in g.iter_mut().zip(&gout[na..]) {
                        *gi += go;
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let (a, b) = (*a, *b);
                let (m, n1) = (before[a.0].shape[0], before[a.0].shape[1]);
                let n2 = before[b.0].shape[1];
                let n = n1 + n2;
                acc(before, a, &mut |g, _| {
                    for i in 0..m {
                        for j in 0..n1 {
                            g[i * n1 + j] += gout[i * n + j];
                        }
                    }
                });
                acc(before, b, &mut |g, _| {
                    for i in 0..m {
                        for j in 0..n2 {
                            g[i * n2 + j] += gout[i * n + n1 + j];
                        }
                    }
                });
            }
            Op::SliceRows { x, start, .. } => {
                let start = *start;
                let n = node.shape[1];
                acc(before, *x, &mut |g, _| {
                    for (off, &go) in gout.iter().enumerate() {
                        g[start * n + off] += go;
                    }
                });
            }
            Op::SliceCols { x, start, len } => {
                let (start, len) = (*start, *len);
                let m = node.shape[0];
                let nfull = before[x.0].shape[1];
                acc(before, *x, &mut |g, _| {
                    for i in 0..m {
                        for j in 0..len {
                            g[i * nfull + start + j] += gout[i * len + j];
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let y = node.value.clone();
                acc(before, *x, &mut |g, _| {
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &gout[i * n..(i + 1) * n];
                        let mut dot = F::zero();
                        for (&yv, &gv) in yr.iter().zip(gr) {
                            dot += yv * gv;
                        }
                        for j in 0..n {
                            g[i * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
                let (m, n) = (node.shape[0], node.shape[1]);
                let cn = F::from_usize(n).unwrap();
                let xv = before[x.0].value.clone();
                let gv = before[gain.0].value.clone();
                // Recompute per-row statistics.
                let mut mus = vec![F::zero(); m];
                let mut invs = vec![F::zero(); m];
                for i in 0..m {
                    let row = &xv[i * n..(i + 1) * n];
                    let mut mu = F::zero();
                    for &r in row {
                        mu += r;
                    }
                    mu = mu / cn;
                    let mut var = F::zero();
                    for &r in row {
                        let d = r - mu;
                        var += d * d;
                    }
                    var = var / cn;
                    mus[i] = mu;
                    invs[i] = F::one() / (var + eps).sqrt();
                }
                acc(before, gain, &mut |g, _| {
                    for i in 0..m {
                        for j in 0..n {
                            let xh = (xv[i * n + j] - mus[i]) * invs[i];
                            g[j] += gout[i * n + j] * xh;
                        }
                    }
                });
                acc(before, bias, &mut |g, _| {
                    for i in 0..m {
                        for j in 0..n {
                            g[j] += gout[i * n + j];
                        }
                    }
                });
                acc(before, x, &mut |g, _| {
                    for i in 0..m {
                        let row = &xv[i * n..(i + 1) * n];
                        let gr = &gout[i * n..(i + 1) * n];
                        let inv = invs[i];
                        let mu = mus[i];
                        // dxh = gout * gain; reduce to the two row sums that
                        // appear in the closed-form layer-norm adjoint.
                        let mut sum_dxh = F::zero();
                        let mut sum_dxh_xh = F::zero();
                        for j in 0..n {
                            let dxh = gr[j] * gv[j];
                            let xh = (row[j] - mu) * inv;
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                        for j in 0..n {
                            let dxh = gr[j] * gv[j];
                            let xh = (row[j] - mu) * inv;
                            g[i * n + j] +=
                                inv * (dxh - sum_dxh / cn - xh * sum_dxh_xh / cn);
                        }
                    }
                });
            }
            Op::RowMean(x) => {
                let n = before[x.0].shape[1];
                let cn = F::from_usize(n).unwrap();
                acc(before, *x, &mut |g, _| {
                    for (i, &go) in gout.iter().enumerate() {
                        let gsh = go / cn;
                        for j in 0..n {
                            g[i * n + j] += gsh;
                        }
                    }
                });
            }
            Op::ScaleRows { x, s } => {
                let (x, s) = (*x, *s);
                let (m, n) = (node.shape[0], node.shape[1]);
                let sv = before[s.0].value.clone();
                acc(before, x, &mut |g, _| {
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += gout[i * n + j] * sv[i];
                        }
                    }
                });
                let xv = before[x.0].value.clone();
                acc(before, s, &mut |g, _| {
                    for i in 0..m {
                        let mut acc_i = F::zero();
                        for j in 0..n {
                            acc_i += gout[i * n + j] * xv[i * n + j];
                        }
                        g[i] += acc_i;
                    }
                });
            }
            Op::ScaleCols { x, s } => {
                let (x, s) = (*x, *s);
                let (m, n) = (node.shape[0], node.shape[1]);
                let sv = before[s.0].value.clone();
                acc(before, x, &mut |g, _| {
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += gout[i * n + j] * sv[j];
                        }
                    }
                });
                let xv = before[x.0].value.clone();
                acc(before, s, &mut |g, _| {
                    for i in 0..m {
                        for j in 0..n {
                            g[j] += gout[i * n + j] * xv[i * n + j];
                        }
                    }
                });
            }
            Op::AddBiasRow { x, b } => {
                let (x, b) = (*x, *b);
                let (m, n) = (node.shape[0], node.shape[1]);
                acc(before, x, &mut |g, _| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
                acc(before, b, &mut |g, _| {
                    for i in 0..m {
                        for j in 0..n {
                            g[j] += gout[i * n + j];
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let go = gout[0];
                acc(before, *x, &mut |g, _| {
                    for gi in g.iter_mut() {
                        *gi += go;
                    }
                });
            }
            Op::Unfold { x, k, s, p } => {
                let (k, s, p) = (*k, *s, *p);
                let (c, h, w) = (
                    before[x.0].shape[0],
                    before[x.0].shape[1],
                    before[x.0].shape[2],
                );
                let ow = window_out(w, k, s, p).unwrap();
                let oh = window_out(h, k, s, p).unwrap();
                let tok_len = k * k * c;
                acc(before, *x, &mut |g, _| {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let base = (oy * ow + ox) * tok_len;
                            for ci in 0..c {
                                for ky in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    if iy < 0 || iy as usize >= h {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = (ox * s + kx) as isize - p as isize;
                                        if ix < 0 || ix as usize >= w {
                                            continue;
                                        }
                                        g[(ci * h + iy as usize) * w + ix as usize] +=
                                            gout[base + (ci * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Bilinear { x, th, tw } => {
                let (th, tw) = (*th, *tw);
                let (c, h, w) = (
                    before[x.0].shape[0],
                    before[x.0].shape[1],
                    before[x.0].shape[2],
                );
                let half = F::c(0.5);
                let sy_scale = F::from_usize(h).unwrap() / F::from_usize(th).unwrap();
                let sx_scale = F::from_usize(w).unwrap() / F::from_usize(tw).unwrap();
                acc(before, *x, &mut |g, _| {
                    for oy in 0..th {
                        let sy = (F::from_usize(oy).unwrap() + half) * sy_scale - half;
                        let (y0, y1, ty) = bilinear_taps(sy, h);
                        for ox in 0..tw {
                            let sx = (F::from_usize(ox).unwrap() + half) * sx_scale - half;
                            let (x0, x1, tx) = bilinear_taps(sx, w);
                            for ci in 0..c {
                                let go = gout[(ci * th + oy) * tw + ox];
                                let plane = ci * h * w;
                                g[plane + y0 * w + x0] +=
                                    go * (F::one() - ty) * (F::one() - tx);
                                g[plane + y0 * w + x1] += go * (F::one() - ty) * tx;
                                g[plane + y1 * w + x0] += go * ty * (F::one() - tx);
                                g[plane + y1 * w + x1] += go * ty * tx;
                            }
                        }
                    }
                });
            }
            Op::WeightedAbsDiff { x, pairs, w } => {
                let go = gout[0];
                acc(before, *x, &mut |g, xv| {
                    for (&(i, j), &wi) in pairs.iter().zip(w) {
                        let d = xv[i] - xv[j];
                        let s = if d > F::zero() {
                            F::one()
                        } else if d < F::zero() {
                            -F::one()
                        } else {
                            F::zero()
                        };
                        g[i] += go * wi * s;
                        g[j] -= go * wi * s;
                    }
                });
            }
        }
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn bilinear_taps<F: Scalar>(s: F, extent: usize) -> (usize, usize, F) {
    let floor = s.floor();
    let t = s - floor;
    let i0 = floor.to_isize().unwrap_or(0);
    let clamp = |v: isize| -> usize { v.max(0).min(extent as isize - 1) as usize };
    (clamp(i0), clamp(i0 + 1), t)
}

/// Finite-difference gradient checking used throughout the test suites.
pub mod check {
    use super::{Graph, VarId};
    use crate::tensor::{Tensor, TensorError};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Builds a scalar loss from leaf ids registered for `inputs`.
    pub type BuildFn<'a> =
        dyn Fn(&mut Graph<f64>, &[VarId]) -> Result<VarId, TensorError> + 'a;

    pub struct GradCheck {
        pub step: f64,
        pub rel_tol: f64,
        pub abs_tol: f64,
        /// Check at most this many coordinates per input (random subset).
        pub max_coords: usize,
        pub seed: u64,
    }

    impl Default for GradCheck {
        fn default() -> Self {
            GradCheck {
                step: 1e-4,
                rel_tol: 1e-3,
                abs_tol: 1e-7,
                max_coords: usize::MAX,
                seed: 0x5eed,
            }
        }
    }

    impl GradCheck {
        pub fn with_tol(rel: f64, abs: f64) -> Self {
            GradCheck {
                rel_tol: rel,
                abs_tol: abs,
                ..Default::default()
            }
        }

        pub fn coords(mut self, n: usize) -> Self {
            self.max_coords = n;
            self
        }

        /// Compares analytic gradients of `build` against central finite
        /// differences for every (sampled) coordinate of every input.
        /// Returns the worst relative error observed.
        pub fn run(&self, inputs: &[Tensor<f64>], build: &BuildFn) -> f64 {
            let mut work: Vec<Tensor<f64>> = inputs.to_vec();
            for t in &mut work {
                t.requires_grad = true;
                t.grad = None;
            }
            let mut g = Graph::new();
            let ids: Vec<VarId> = work.iter().map(|t| g.leaf(t)).collect();
            let loss = build(&mut g, &ids).expect("forward build failed");
            g.backward(loss).expect("backward failed");
            let analytic: Vec<Vec<f64>> = ids
                .iter()
                .zip(&work)
                .map(|(&id, t)| {
                    g.grad(id)
                        .map(|s| s.to_vec())
                        .unwrap_or_else(|| vec![0.0; t.numel()])
                })
                .collect();

            let mut rng = StdRng::seed_from_u64(self.seed);
            let mut worst = 0.0f64;
            for (ti, tensor) in work.iter().enumerate() {
                let n = tensor.numel();
                let coords: Vec<usize> = if n <= self.max_coords {
                    (0..n).collect()
                } else {
                    (0..self.max_coords).map(|_| rng.gen_range(0..n)).collect()
                };
                for ci in coords {
                    let eval = |delta: f64, work: &mut [Tensor<f64>]| -> f64 {
                        let old = work[ti].data()[ci];
                        work[ti].data_mut()[ci] = old + delta;
                        let mut g = Graph::new();
                        let ids: Vec<VarId> = work.iter().map(|t| g.leaf(t)).collect();
                        let loss = build(&mut g, &ids).expect("forward build failed");
                        work[ti].data_mut()[ci] = old;
                        g.scalar_value(loss)
                    };
                    let mut w = work.clone();
                    let fp = eval(self.step, &mut w);
                    let fm = eval(-self.step, &mut w);
                    let fd = (fp - fm) / (2.0 * self.step);
                    let an = analytic[ti][ci];
                    let denom = an.abs().max(fd.abs());
                    let err = (an - fd).abs();
                    let rel = if denom > 0.0 { err / denom } else { 0.0 };
                    if err > self.abs_tol && rel > self.rel_tol {
                        panic!(
                            "gradient mismatch: input {ti} coord {ci}: analytic {an:.9e} vs fd {fd:.9e} (rel {rel:.3e})"
                        );
                    }
                    if rel > worst && err > self.abs_tol {
                        worst = rel;
                    }
                }
            }
            worst
        }
    }

    /// Uniform random tensor in `[lo, hi]`, deterministic per seed.
    pub fn rand_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
    }
}

#[cfg(test)]
mod tests {
    use super::check::{rand_tensor, GradCheck};
    use super::*;
    use crate::tensor::Tensor;

    fn t2(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_product() {
        let mut g = Graph::new();
        let a = g.constant(&t2(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(&t2(&[2, 1], &[1.0, 1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(&Tensor::zeros(&[2, 3]));
        let b = g.constant(&Tensor::zeros(&[2, 3]));
        let e = g.matmul(a, b).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_two_logits() {
        let mut g = Graph::new();
        let x = g.constant(&t2(&[1, 2], &[0.0, 3.0f64.ln()]));
        let s = g.softmax(x, 1).unwrap();
        let d = g.data(s);
        assert!((d[0] - 0.25).abs() < 1e-12);
        assert!((d[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let x = rand_tensor(&[5, 7], -4.0, 4.0, 11);
        let mut g = Graph::new();
        let a = g.constant(&x);
        let s = g.softmax(a, 1).unwrap();
        for i in 0..5 {
            let row = &g.data(s)[i * 7..(i + 1) * 7];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        let mut shifted = x.clone();
        for v in shifted.data_mut() {
            *v += 123.456;
        }
        let b = g.constant(&shifted);
        let s2 = g.softmax(b, 1).unwrap();
        for (a, b) in g.data(s).iter().zip(g.data(s2)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::new();
        let x = g.constant(&t2(&[1, 2], &[f64::NAN, 0.0]));
        assert!(g.softmax(x, 1).is_err());
    }

    #[test]
    fn layer_norm_two_channel_row() {
        let mut g = Graph::new();
        let x = g.constant(&t2(&[1, 2], &[1.0, 3.0]));
        let gain = g.constant(&Tensor::full(&[2], 1.0));
        let bias = g.constant(&Tensor::zeros(&[2]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        let d = g.data(y);
        assert!((d[0] + 1.0).abs() < 1e-6);
        assert!((d[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn window_out_matches_worked_examples() {
        assert_eq!(window_out(8, 3, 2, 1), Some(4));
        assert_eq!(window_out(64, 7, 4, 2), Some(16));
        assert_eq!(window_out(16, 3, 2, 1), Some(8));
        assert_eq!(window_out(8, 3, 2, 1), Some(4));
        assert_eq!(window_out(2, 7, 4, 0), None);
    }

    #[test]
    fn unfold_8x8_gives_16_tokens_of_9c() {
        let mut g = Graph::new();
        let x = g.constant(&rand_tensor(&[2, 8, 8], 0.0, 1.0, 3));
        let u = g.unfold(x, 3, 2, 1).unwrap();
        assert_eq!(g.shape(u), &[16, 18]);
    }

    #[test]
    fn unfold_zero_pads_borders() {
        // 1x2x2 image, k=3 s=1 p=1: token at (0,0) sees zeros on the
        // top/left border.
        let mut g = Graph::new();
        let x = g.constant(&t2(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let u = g.unfold(x, 3, 1, 1).unwrap();
        assert_eq!(g.shape(u), &[4, 9]);
        let tok0 = &g.data(u)[0..9];
        assert_eq!(tok0, &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn avg_pool_tokens_row_means() {
        let mut g = Graph::new();
        let x = g.constant(&t2(&[2, 2], &[1.0, 3.0, 5.0, 7.0]));
        let m = g.row_mean(x).unwrap();
        assert_eq!(g.data(m), &[2.0, 6.0]);
    }

    #[test]
    fn bilinear_doubling_keeps_corners_and_constant_maps() {
        let mut g = Graph::new();
        let x = g.constant(&t2(&[1, 2, 2], &[0.0, 1.0, 2.0, 3.0]));
        let y = g.bilinear(x, 4, 4).unwrap();
        let d = g.data(y);
        assert_eq!(d[0], 0.0);
        assert_eq!(d[3], 1.0);
        assert_eq!(d[12], 2.0);
        assert_eq!(d[15], 3.0);

        let c = g.constant(&Tensor::full(&[1, 3, 3], 0.7));
        let u = g.bilinear(c, 9, 9).unwrap();
        for &v in g.data(u) {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn reshape_transpose_round_trip_bit_exact() {
        let x = rand_tensor(&[3, 5], -2.0, 2.0, 21);
        let mut g = Graph::new();
        let a = g.constant(&x);
        let t = g.transpose2d(a).unwrap();
        let tt = g.transpose2d(t).unwrap();
        assert_eq!(g.data(a), g.data(tt));
        let r = g.reshape(a, &[5, 3]).unwrap();
        let rr = g.reshape(r, &[3, 5]).unwrap();
        assert_eq!(g.data(a), g.data(rr));
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().with_grad();
        let mut g = Graph::new();
        let a = g.leaf(&x);
        let s = g.sum_all(a);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f64>::zeros(&[2]).with_grad();
        let mut g = Graph::new();
        let a = g.leaf(&x);
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn ln_rejects_non_positive() {
        let mut g = Graph::new();
        let x = g.constant(&t2(&[1], &[0.0]));
        assert!(g.ln(x).is_err());
    }

    #[test]
    fn safe_ln_is_exact_above_eps_and_linear_below() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t2(&[4], &[0.5, 1e-7, 1e-9, 0.0]).with_grad());
        let y = g.safe_ln(x, 1e-7);
        let v = g.data(y).to_vec();
        assert_eq!(v[0], 0.5f64.ln());
        assert_eq!(v[1], 1e-7f64.ln());
        assert!((v[2] - (1e-7f64.ln() + (1e-9 - 1e-7) / 1e-7)).abs() < 1e-12);
        assert!((v[3] - (1e-7f64.ln() - 1.0)).abs() < 1e-12);
        assert!(v.iter().all(|a| a.is_finite()));
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        let grad = g.grad(x).unwrap();
        assert_eq!(grad[0], 2.0);
        assert_eq!(grad[1], 1e7);
        assert_eq!(grad[2], 1e7, "below eps the slope stays 1/eps");
        // Finite differences across random positive inputs, including the
        // linear branch.
        for inst in 0..10 {
            let a = rand_tensor(&[3, 3], 1e-9, 1.5, 400 + inst);
            GradCheck::default().run(&[a], &|g, ids| {
                let y = g.safe_ln(ids[0], 1e-3);
                Ok(g.sum_all(y))
            });
        }
    }

    // Finite-difference checks for every differentiable op, 10 random
    // instances each.
    #[test]
    fn gradcheck_elementwise_suite() {
        for inst in 0..10 {
            let seed = 100 + inst;
            let a = rand_tensor(&[3, 4], -2.0, 2.0, seed);
            let b = rand_tensor(&[3, 4], -2.0, 2.0, seed + 50);
            GradCheck::default().run(&[a.clone(), b.clone()], &|g, ids| {
                let s = g.add(ids[0], ids[1])?;
                let m = g.mul(s, ids[0])?;
                let d = g.sub(m, ids[1])?;
                let sc = g.scale(d, 1.7);
                let sh = g.add_scalar(sc, 0.3);
                Ok(g.sum_all(sh))
            });
            GradCheck::default().run(&[a.clone()], &|g, ids| {
                let s = g.sigmoid(ids[0]);
                let e = g.gelu(s);
                let x = g.exp(e);
                let l = g.ln(x)?;
                let ab = g.abs(l);
                Ok(g.sum_all(ab))
            });
            GradCheck::default().run(&[a.clone()], &|g, ids| {
                let c = g.clamp(ids[0], -1.2, 1.2);
                let s = g.sigmoid(c);
                Ok(g.sum_all(s))
            });
        }
    }

    #[test]
    fn gradcheck_linear_algebra_suite() {
        for inst in 0..10 {
            let seed = 300 + inst;
            let a = rand_tensor(&[3, 4], -1.0, 1.0, seed);
            let b = rand_tensor(&[4, 5], -1.0, 1.0, seed + 50);
            GradCheck::default().run(&[a.clone(), b.clone()], &|g, ids| {
                let m = g.matmul(ids[0], ids[1])?;
                let s = g.sigmoid(m);
                Ok(g.sum_all(s))
            });
            let w = rand_tensor(&[3, 5], -1.0, 1.0, seed + 100);
            GradCheck::default().run(&[a.clone(), w.clone()], &|g, ids| {
                let t = g.transpose2d(ids[0])?;
                let m = g.matmul(t, ids[1])?;
                Ok(g.sum_all(m))
            });
            let sm = rand_tensor(&[3, 6], -3.0, 3.0, seed + 150);
            GradCheck::default().run(&[sm.clone()], &|g, ids| {
                let s = g.softmax(ids[0], 1)?;
                let sq = g.mul(s, s)?;
                Ok(g.sum_all(sq))
            });
            GradCheck::default().run(&[sm], &|g, ids| {
                let s = g.softmax(ids[0], 0)?;
                let sq = g.mul(s, s)?;
                Ok(g.sum_all(sq))
            });
        }
    }

    #[test]
    fn gradcheck_norm_and_broadcast_suite() {
        for inst in 0..10 {
            let seed = 500 + inst;
            let x = rand_tensor(&[4, 6], -2.0, 2.0, seed);
            let gain = rand_tensor(&[6], 0.5, 1.5, seed + 50);
            let bias = rand_tensor(&[6], -0.5, 0.5, seed + 100);
            GradCheck::default().run(&[x.clone(), gain, bias], &|g, ids| {
                let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                let s = g.sigmoid(y);
                Ok(g.sum_all(s))
            });
            let srow = rand_tensor(&[4], -1.5, 1.5, seed + 150);
            GradCheck::default().run(&[x.clone(), srow], &|g, ids| {
                let y = g.scale_rows(ids[0], ids[1])?;
                Ok(g.sum_all(y))
            });
            let scol = rand_tensor(&[6], -1.5, 1.5, seed + 200);
            GradCheck::default().run(&[x.clone(), scol], &|g, ids| {
                let y = g.scale_cols(ids[0], ids[1])?;
                let s = g.gelu(y);
                Ok(g.sum_all(s))
            });
            let b = rand_tensor(&[6], -1.0, 1.0, seed + 250);
            GradCheck::default().run(&[x.clone(), b], &|g, ids| {
                let y = g.add_bias_row(ids[0], ids[1])?;
                let s = g.sigmoid(y);
                Ok(g.sum_all(s))
            });
            GradCheck::default().run(&[x], &|g, ids| {
                let m = g.row_mean(ids[0])?;
                let r = g.reshape(m, &[4, 1])?;
                let s = g.sigmoid(r);
                Ok(g.sum_all(s))
            });
        }
    }

    #[test]
    fn gradcheck_shape_ops_suite() {
        for inst in 0..10 {
            let seed = 700 + inst;
            let a = rand_tensor(&[3, 4], -1.0, 1.0, seed);
            let b = rand_tensor(&[2, 4], -1.0, 1.0, seed + 50);
            GradCheck::default().run(&[a.clone(), b], &|g, ids| {
                let c = g.concat_rows(ids[0], ids[1])?;
                let s = g.sigmoid(c);
                Ok(g.sum_all(s))
            });
            let c = rand_tensor(&[3, 2], -1.0, 1.0, seed + 100);
            GradCheck::default().run(&[a.clone(), c], &|g, ids| {
                let c = g.concat_cols(ids[0], ids[1])?;
                let sl = g.slice_cols(c, 1, 4)?;
                let s = g.gelu(sl);
                Ok(g.sum_all(s))
            });
            GradCheck::default().run(&[a], &|g, ids| {
                let sl = g.slice_rows(ids[0], 1, 2)?;
                let r = g.reshape(sl, &[4, 2])?;
                let t = g.transpose2d(r)?;
                let s = g.sigmoid(t);
                Ok(g.sum_all(s))
            });
        }
    }

    #[test]
    fn gradcheck_spatial_suite() {
        for inst in 0..10 {
            let seed = 900 + inst;
            let x = rand_tensor(&[2, 6, 6], -1.0, 1.0, seed);
            GradCheck::default().run(&[x.clone()], &|g, ids| {
                let u = g.unfold(ids[0], 3, 2, 1)?;
                let s = g.sigmoid(u);
                Ok(g.sum_all(s))
            });
            GradCheck::default().run(&[x.clone()], &|g, ids| {
                let b = g.bilinear(ids[0], 9, 5)?;
                let s = g.sigmoid(b);
                Ok(g.sum_all(s))
            });
            GradCheck::default().run(&[x], &|g, ids| {
                let b = g.bilinear(ids[0], 3, 3)?;
                let s = g.gelu(b);
                Ok(g.sum_all(s))
            });
        }
    }

    #[test]
    fn gradcheck_weighted_abs_diff() {
        for inst in 0..10 {
            let seed = 1100 + inst;
            // Values drawn away from ties so the |.| kink is not sampled.
            let x = rand_tensor(&[6], -2.0, 2.0, seed);
            let w = rand_tensor(&[5], 0.1, 1.0, seed + 50);
            let pairs: Vec<(usize, usize)> = (0..5).map(|i| (i, i + 1)).collect();
            let wv = w.data().to_vec();
            GradCheck::default().run(&[x], &|g, ids| {
                g.weighted_abs_diff(ids[0], pairs.clone(), wv.clone())
            });
        }
    }
}
