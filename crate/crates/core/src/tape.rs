//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations are methods on [`Tape`]. A node is recorded whenever at least
//! one input is tape-linked; pure-constant computations record nothing and
//! cost nothing beyond the forward arithmetic. Every node stores its output
//! and whatever activations its backward rule needs (full saving, no
//! recomputation). Reductions accumulate in f64, storage is f32.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::fft::{fft_pairs, ifft_pairs};
use crate::tensor::{NodeId, Shape, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum UnaryOp {
    Identity,
    Exp,
    Softplus,
    Silu,
    Sigmoid,
    Relu,
}

impl UnaryOp {
    fn apply(self, x: f32) -> f32 {
        match self {
            UnaryOp::Identity => x,
            UnaryOp::Exp => x.exp(),
            UnaryOp::Softplus => softplus(x),
            UnaryOp::Silu => x * sigmoid(x),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Relu => x.max(0.0),
        }
    }

    fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            UnaryOp::Identity => 1.0,
            UnaryOp::Exp => y,
            UnaryOp::Softplus => sigmoid(x),
            UnaryOp::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

enum Op {
    Leaf,
    Matmul { m: usize, k: usize, n: usize },
    Transpose { rows: usize, cols: usize },
    Add,
    Sub,
    Mul,
    AddRowBroadcast { rows: usize, cols: usize },
    Scale(f32),
    Unary(UnaryOp),
    LayerNormRow { rows: usize, cols: usize },
    LayerNormVec { len: usize, valid_from: usize },
    CausalConv { len: usize, channels: usize, ksize: usize, valid_from: usize },
    RowScale { rows: usize, cols: usize },
    ScalarMul,
    DecayMask { len: usize },
    SsdRecurrent { l: usize, d: usize, n: usize },
    Fft { inverse: bool, len: usize },
    ComplexLinear { len: usize },
    ComplexMul { len: usize },
    RealToComplex { len: usize },
    ComplexRealPart { len: usize },
    GatherRows { indices: Vec<Option<usize>>, cols: usize },
    GatherElems { indices: Vec<usize>, cols: usize },
    LogSumExpRow { rows: usize, cols: usize },
    ConcatRows { row_counts: Vec<usize>, cols: usize },
    Reshape,
    SliceCols { rows: usize, cols: usize, start: usize, end: usize },
    SliceRows { rows: usize, cols: usize, start: usize, end: usize },
    Sum,
    Mean,
    Dropout,
}

enum Input {
    Node(NodeId),
    Const(Vec<f32>),
}

struct Node {
    op: Op,
    inputs: Vec<Input>,
    out: Vec<f32>,
    saved: Vec<Vec<f32>>,
}

/// Gradient store produced by [`Tape::backward`], indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a tape-linked tensor. Tensors the loss
    /// never touched yield zeros; constants yield `None`.
    pub fn wrt(&self, t: &Tensor) -> Option<Tensor> {
        let node = t.node?;
        let data = match self.grads.get(node.0) {
            Some(Some(g)) => g.clone(),
            _ => vec![0.0; t.numel()],
        };
        Some(Tensor::with_node(t.shape().clone(), data, None))
    }
}

/// Recording context for one forward/backward pass. Single-threaded by
/// construction; independent tapes are independent.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register a tensor as a differentiable leaf.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        let id = self.push(Op::Leaf, vec![], t.data().to_vec(), vec![]);
        Tensor::with_node(t.shape().clone(), t.data().to_vec(), Some(id))
    }

    fn push(&self, op: Op, inputs: Vec<Input>, out: Vec<f32>, saved: Vec<Vec<f32>>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, inputs, out, saved });
        NodeId(nodes.len() - 1)
    }

    /// Record a node if any input is tape-linked; otherwise return a constant.
    fn emit(
        &self,
        op: Op,
        inputs: &[&Tensor],
        out_shape: Shape,
        out: Vec<f32>,
        saved: Vec<Vec<f32>>,
    ) -> Tensor {
        let tracked = inputs.iter().any(|t| t.node.is_some());
        let t = if tracked {
            let ins = inputs
                .iter()
                .map(|t| match t.node {
                    Some(id) => Input::Node(id),
                    None => Input::Const(t.data().to_vec()),
                })
                .collect();
            let id = self.push(op, ins, out.clone(), saved);
            Tensor::with_node(out_shape, out, Some(id))
        } else {
            Tensor::with_node(out_shape, out, None)
        };
        t.debug_check_finite("tape op");
        t
    }

    // ---- arithmetic ---------------------------------------------------------

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = a
            .shape()
            .as_matrix()
            .ok_or_else(|| Error::shape("matmul", a.shape(), b.shape()))?;
        let (k2, n) = b
            .shape()
            .as_matrix()
            .ok_or_else(|| Error::shape("matmul", a.shape(), b.shape()))?;
        if k != k2 {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let out = matmul_kernel(a.data(), b.data(), m, k, n);
        Ok(self.emit(Op::Matmul { m, k, n }, &[a, b], Shape::new(&[m, n]), out, vec![]))
    }

    pub fn transpose(&self, x: &Tensor) -> Result<Tensor> {
        let (r, c) = x
            .shape()
            .as_matrix()
            .ok_or_else(|| Error::shape("transpose", x.shape(), "rank-2"))?;
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x.data()[i * c + j];
            }
        }
        Ok(self.emit(Op::Transpose { rows: r, cols: c }, &[x], Shape::new(&[c, r]), out, vec![]))
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::shape("add", a.shape(), b.shape()));
        }
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        Ok(self.emit(Op::Add, &[a, b], a.shape().clone(), out, vec![]))
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::shape("sub", a.shape(), b.shape()));
        }
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        Ok(self.emit(Op::Sub, &[a, b], a.shape().clone(), out, vec![]))
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::shape("mul", a.shape(), b.shape()));
        }
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        Ok(self.emit(Op::Mul, &[a, b], a.shape().clone(), out, vec![]))
    }

    /// Matrix plus a broadcast row vector (the XW + b pattern).
    pub fn add_row(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (r, c) = x
            .shape()
            .as_matrix()
            .ok_or_else(|| Error::shape("add_row", x.shape(), bias.shape()))?;
        if bias.numel() != c {
            return Err(Error::shape("add_row", x.shape(), bias.shape()));
        }
        let mut out = x.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += bias.data()[j];
            }
        }
        Ok(self.emit(
            Op::AddRowBroadcast { rows: r, cols: c },
            &[x, bias],
            x.shape().clone(),
            out,
            vec![],
        ))
    }

    pub fn scale(&self, x: &Tensor, c: f32) -> Tensor {
        let out = x.data().iter().map(|v| v * c).collect();
        self.emit(Op::Scale(c), &[x], x.shape().clone(), out, vec![])
    }

    pub fn unary(&self, op: UnaryOp, x: &Tensor) -> Tensor {
        let out = x.data().iter().map(|&v| op.apply(v)).collect();
        self.emit(Op::Unary(op), &[x], x.shape().clone(), out, vec![])
    }

    pub fn exp(&self, x: &Tensor) -> Tensor {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn softplus(&self, x: &Tensor) -> Tensor {
        self.unary(UnaryOp::Softplus, x)
    }

    pub fn silu(&self, x: &Tensor) -> Tensor {
        self.unary(UnaryOp::Silu, x)
    }

    pub fn sigmoid(&self, x: &Tensor) -> Tensor {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn relu(&self, x: &Tensor) -> Tensor {
        self.unary(UnaryOp::Relu, x)
    }

    // ---- normalization ------------------------------------------------------

    /// Row-wise layer normalization with per-feature affine parameters.
    /// Population variance; constant rows map to beta, no division by zero.
    pub fn layer_norm(&self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
        let (r, c) = x
            .shape()
            .as_matrix()
            .ok_or_else(|| Error::shape("layer_norm", x.shape(), "rank-2"))?;
        if gamma.numel() != c || beta.numel() != c {
            return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
        }
        let mut out = vec![0.0f32; r * c];
        let mut xhat = vec![0.0f32; r * c];
        let mut inv_sigma = vec![0.0f32; r];
        for i in 0..r {
            let row = &x.data()[i * c..(i + 1) * c];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / c as f64;
            let inv = 1.0 / (var + eps as f64).sqrt();
            inv_sigma[i] = inv as f32;
            for j in 0..c {
                let h = ((row[j] as f64 - mean) * inv) as f32;
                xhat[i * c + j] = h;
                out[i * c + j] = gamma.data()[j] * h + beta.data()[j];
            }
        }
        Ok(self.emit(
            Op::LayerNormRow { rows: r, cols: c },
            &[x, gamma, beta],
            x.shape().clone(),
            out,
            vec![xhat, inv_sigma],
        ))
    }

    /// Layer normalization of a 1-D signal along its length, restricted to
    /// the suffix starting at `valid_from`; scalar gamma/beta. Positions
    /// before `valid_from` are zeroed and excluded from the statistics.
    pub fn layer_norm_vec(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f32,
        valid_from: usize,
    ) -> Result<Tensor> {
        if x.shape().rank() != 1 {
            return Err(Error::shape("layer_norm_vec", x.shape(), "rank-1"));
        }
        if gamma.numel() != 1 || beta.numel() != 1 {
            return Err(Error::shape("layer_norm_vec", gamma.shape(), "[1]"));
        }
        let len = x.numel();
        if valid_from >= len {
            return Err(Error::Contract {
                op: "layer_norm_vec",
                msg: format!("valid_from {valid_from} >= len {len}"),
            });
        }
        let window = &x.data()[valid_from..];
        let wlen = window.len() as f64;
        let mean = window.iter().map(|&v| v as f64).sum::<f64>() / wlen;
        let var = window
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / wlen;
        let inv = 1.0 / (var + eps as f64).sqrt();
        let mut out = vec![0.0f32; len];
        let mut xhat = vec![0.0f32; len];
        for t in valid_from..len {
            let h = ((x.data()[t] as f64 - mean) * inv) as f32;
            xhat[t] = h;
            out[t] = gamma.data()[0] * h + beta.data()[0];
        }
        Ok(self.emit(
            Op::LayerNormVec { len, valid_from },
            &[x, gamma, beta],
            x.shape().clone(),
            out,
            vec![xhat, vec![inv as f32]],
        ))
    }

    // ---- convolution --------------------------------------------------------

    /// Per-channel causal convolution with index clamping: positions before
    /// `valid_from` clamp to `valid_from`, outputs before it are zero.
    /// `x` is LxC, `w` is KxC.
    pub fn causal_conv(&self, x: &Tensor, w: &Tensor, valid_from: usize) -> Result<Tensor> {
        let (l, c) = x
            .shape()
            .as_matrix()
            .ok_or_else(|| Error::shape("causal_conv", x.shape(), w.shape()))?;
        let (k, c2) = w
            .shape()
            .as_matrix()
            .ok_or_else(|| Error::shape("causal_conv", x.shape(), w.shape()))?;
        if c != c2 {
            return Err(Error::shape("causal_conv", x.shape(), w.shape()));
        }
        if k == 0 {
            return Err(Error::Contract { op: "causal_conv", msg: "kernel size must be >= 1".into() });
        }
        let out = causal_conv_kernel(x.data(), w.data(), l, c, k, valid_from);
        Ok(self.emit(
            Op::CausalConv { len: l, channels: c, ksize: k, valid_from },
            &[x, w],
            x.shape().clone(),
            out,
            vec![],
        ))
    }

    /// Causal convolution followed by an activation.
    pub fn causal_conv1d(
        &self,
        x: &Tensor,
        w: &Tensor,
        activation: UnaryOp,
        valid_from: usize,
    ) -> Result<Tensor> {
        let conv = self.causal_conv(x, w, valid_from)?;
        Ok(self.unary(activation, &conv))
    }

    // ---- broadcast products -------------------------------------------------

    /// Scale row i of `x` by `v[i]`.
    pub fn row_scale(&self, x: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (r, c) = x
            .shape()
            .as_matrix()
            .ok_or_else(|| Error::shape("row_scale", x.shape(), v.shape()))?;
        if v.numel() != r {
            return Err(Error::shape("row_scale", x.shape(), v.shape()));
        }
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = x.data()[i * c + j] * v.data()[i];
            }
        }
        Ok(self.emit(Op::RowScale { rows: r, cols: c }, &[x, v], x.shape().clone(), out, vec![]))
    }

    /// Multiply a tensor by a 1-element tensor.
    pub fn scalar_mul(&self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(Error::shape("scalar_mul", s.shape(), "[1]"));
        }
        let sv = s.data()[0];
        let out = x.data().iter().map(|v| v * sv).collect();
        Ok(self.emit(Op::ScalarMul, &[x, s], x.shape().clone(), out, vec![]))
    }

    // ---- SSD kernels ---------------------------------------------------------

    /// Lower-triangular decay mask from per-step coefficients:
    /// M[i][j] = prod_{k=j+1..=i} a[k], unit diagonal. Built in log space
    /// with sign and zero tracking so any-sign coefficients reconstruct
    /// exactly; a[0] is never used.
    pub fn decay_mask(&self, a: &Tensor) -> Result<Tensor> {
        if a.shape().rank() != 1 {
            return Err(Error::shape("decay_mask", a.shape(), "rank-1"));
        }
        let l = a.numel();
        let out = decay_mask_kernel(a.data());
        Ok(self.emit(Op::DecayMask { len: l }, &[a], Shape::new(&[l, l]), out.clone(), vec![out]))
    }

    /// Linear-time SSD recurrence: h_t = a[t] h_{t-1} + bbar_t (x) x_t,
    /// y_t = c_t h_t. State kept in f64 internally.
    pub fn ssd_recurrent(
        &self,
        c: &Tensor,
        bbar: &Tensor,
        a: &Tensor,
        x: &Tensor,
    ) -> Result<Tensor> {
        let (l, d) = c
            .shape()
            .as_matrix()
            .ok_or_else(|| Error::shape("ssd_recurrent", c.shape(), "rank-2"))?;
        let (lb, db) = bbar
            .shape()
            .as_matrix()
            .ok_or_else(|| Error::shape("ssd_recurrent", bbar.shape(), "rank-2"))?;
        let (lx, n) = x
            .shape()
            .as_matrix()
            .ok_or_else(|| Error::shape("ssd_recurrent", x.shape(), "rank-2"))?;
        if l != lb || d != db || l != lx || a.numel() != l {
            return Err(Error::shape(
                "ssd_recurrent",
                format!("C{} Bbar{}", c.shape(), bbar.shape()),
                format!("a[{}] X{}", a.numel(), x.shape()),
            ));
        }
        let (out, hsave) = ssd_recurrent_kernel(c.data(), bbar.data(), a.data(), x.data(), l, d, n);
        Ok(self.emit(
            Op::SsdRecurrent { l, d, n },
            &[c, bbar, a, x],
            Shape::new(&[l, n]),
            out,
            vec![hsave],
        ))
    }

    // ---- complex ops (2xL layout: row 0 = re, row 1 = im) ---------------------

    pub fn real_to_complex(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().rank() != 1 {
            return Err(Error::shape("real_to_complex", x.shape(), "rank-1"));
        }
        let l = x.numel();
        let mut out = vec![0.0f32; 2 * l];
        out[..l].copy_from_slice(x.data());
        Ok(self.emit(Op::RealToComplex { len: l }, &[x], Shape::new(&[2, l]), out, vec![]))
    }

    pub fn complex_real_part(&self, z: &Tensor) -> Result<Tensor> {
        let l = complex_len(z, "complex_real_part")?;
        let out = z.data()[..l].to_vec();
        Ok(self.emit(Op::ComplexRealPart { len: l }, &[z], Shape::new(&[l]), out, vec![]))
    }

    pub fn fft(&self, z: &Tensor) -> Result<Tensor> {
        self.fft_op(z, false)
    }

    pub fn ifft(&self, z: &Tensor) -> Result<Tensor> {
        self.fft_op(z, true)
    }

    fn fft_op(&self, z: &Tensor, inverse: bool) -> Result<Tensor> {
        let l = complex_len(z, "fft")?;
        let pairs: Vec<(f64, f64)> = (0..l)
            .map(|i| (z.data()[i] as f64, z.data()[l + i] as f64))
            .collect();
        let res = if inverse { ifft_pairs(&pairs) } else { fft_pairs(&pairs) };
        let mut out = vec![0.0f32; 2 * l];
        for (i, (r, im)) in res.iter().enumerate() {
            out[i] = *r as f32;
            out[l + i] = *im as f32;
        }
        Ok(self.emit(Op::Fft { inverse, len: l }, &[z], Shape::new(&[2, l]), out, vec![]))
    }

    /// zW + b via the stacked real/imaginary block product. `w` is [2,L,L]
    /// (re plane then im plane), `z` and `b` are [2,L].
    pub fn complex_linear(&self, z: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let l = complex_len(z, "complex_linear")?;
        if w.dims() != [2, l, l] {
            return Err(Error::shape("complex_linear", w.shape(), format!("[2x{l}x{l}]")));
        }
        if b.dims() != [2, l] {
            return Err(Error::shape("complex_linear", b.shape(), format!("[2x{l}]")));
        }
        let (zr, zi) = z.data().split_at(l);
        let (wr, wi) = w.data().split_at(l * l);
        let (br, bi) = b.data().split_at(l);
        let mut out = vec![0.0f32; 2 * l];
        for k in 0..l {
            let mut ar = br[k] as f64;
            let mut ai = bi[k] as f64;
            for n in 0..l {
                let (wre, wim) = (wr[k * l + n] as f64, wi[k * l + n] as f64);
                ar += wre * zr[n] as f64 - wim * zi[n] as f64;
                ai += wim * zr[n] as f64 + wre * zi[n] as f64;
            }
            out[k] = ar as f32;
            out[l + k] = ai as f32;
        }
        Ok(self.emit(Op::ComplexLinear { len: l }, &[z, w, b], Shape::new(&[2, l]), out, vec![]))
    }

    /// Elementwise complex product of two [2,L] tensors.
    pub fn complex_mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let l = complex_len(a, "complex_mul")?;
        if b.dims() != a.dims() {
            return Err(Error::shape("complex_mul", a.shape(), b.shape()));
        }
        let (ar, ai) = a.data().split_at(l);
        let (br, bi) = b.data().split_at(l);
        let mut out = vec![0.0f32; 2 * l];
        for i in 0..l {
            out[i] = ar[i] * br[i] - ai[i] * bi[i];
            out[l + i] = ar[i] * bi[i] + ai[i] * br[i];
        }
        Ok(self.emit(Op::ComplexMul { len: l }, &[a, b], Shape::new(&[2, l]), out, vec![]))
    }

    // ---- indexing / assembly --------------------------------------------------

    /// Row lookup into a table; `None` index rows come out all-zero and
    /// propagate no gradient (the pad convention).
    pub fn gather_rows(&self, table: &Tensor, indices: &[Option<usize>]) -> Result<Tensor> {
        let (r, c) = table
            .shape()
            .as_matrix()
            .ok_or_else(|| Error::shape("gather_rows", table.shape(), "rank-2"))?;
        let mut out = vec![0.0f32; indices.len() * c];
        for (i, idx) in indices.iter().enumerate() {
            if let Some(row) = idx {
                if *row >= r {
                    return Err(Error::ItemIndexRange { index: *row, size: r });
                }
                out[i * c..(i + 1) * c].copy_from_slice(&table.data()[row * c..(row + 1) * c]);
            }
        }
        Ok(self.emit(
            Op::GatherRows { indices: indices.to_vec(), cols: c },
            &[table],
            Shape::new(&[indices.len(), c]),
            out,
            vec![],
        ))
    }

    /// Pick element (i, indices[i]) from each row.
    pub fn gather_elems(&self, x: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let (r, c) = x
            .shape()
            .as_matrix()
            .ok_or_else(|| Error::shape("gather_elems", x.shape(), "rank-2"))?;
        if indices.len() != r {
            return Err(Error::shape("gather_elems", x.shape(), indices.len()));
        }
        let mut out = vec![0.0f32; r];
        for (i, &j) in indices.iter().enumerate() {
            if j >= c {
                return Err(Error::ItemIndexRange { index: j, size: c });
            }
            out[i] = x.data()[i * c + j];
        }
        Ok(self.emit(
            Op::GatherElems { indices: indices.to_vec(), cols: c },
            &[x],
            Shape::new(&[r]),
            out,
            vec![],
        ))
    }

    /// Row-wise log-sum-exp of a matrix, computed stably in f64.
    pub fn logsumexp_rows(&self, x: &Tensor) -> Result<Tensor> {
        let (r, c) = x
            .shape()
            .as_matrix()
            .ok_or_else(|| Error::shape("logsumexp_rows", x.shape(), "rank-2"))?;
        let mut out = vec![0.0f32; r];
        let mut softmax = vec![0.0f32; r * c];
        for i in 0..r {
            let row = &x.data()[i * c..(i + 1) * c];
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let mut z = 0.0f64;
            for &v in row {
                z += ((v as f64) - m).exp();
            }
            out[i] = (m + z.ln()) as f32;
            for j in 0..c {
                softmax[i * c + j] = (((row[j] as f64) - m).exp() / z) as f32;
            }
        }
        Ok(self.emit(
            Op::LogSumExpRow { rows: r, cols: c },
            &[x],
            Shape::new(&[r]),
            out,
            vec![softmax],
        ))
    }

    /// Stack rank-2 tensors with equal column counts along rows.
    pub fn concat_rows(&self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Contract { op: "concat_rows", msg: "no inputs".into() });
        }
        let mut cols = None;
        let mut row_counts = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for p in parts {
            let (r, c) = p
                .shape()
                .as_matrix()
                .ok_or_else(|| Error::shape("concat_rows", p.shape(), "rank-2"))?;
            match cols {
                None => cols = Some(c),
                Some(c0) if c0 != c => {
                    return Err(Error::shape("concat_rows", c0, c));
                }
                _ => {}
            }
            row_counts.push(r);
            total += r;
        }
        let c = cols.unwrap();
        let mut out = Vec::with_capacity(total * c);
        for p in parts {
            out.extend_from_slice(p.data());
        }
        Ok(self.emit(
            Op::ConcatRows { row_counts, cols: c },
            parts,
            Shape::new(&[total, c]),
            out,
            vec![],
        ))
    }

    pub fn reshape(&self, x: &Tensor, dims: &[usize]) -> Result<Tensor> {
        let shape = Shape::new(dims);
        if shape.numel() != x.numel() {
            return Err(Error::shape("reshape", x.shape(), shape));
        }
        Ok(self.emit(Op::Reshape, &[x], shape, x.data().to_vec(), vec![]))
    }

    pub fn slice_cols(&self, x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = x
            .shape()
            .as_matrix()
            .ok_or_else(|| Error::shape("slice_cols", x.shape(), "rank-2"))?;
        if start >= end || end > c {
            return Err(Error::Contract {
                op: "slice_cols",
                msg: format!("range {start}..{end} outside 0..{c}"),
            });
        }
        let w = end - start;
        let mut out = vec![0.0f32; r * w];
        for i in 0..r {
            out[i * w..(i + 1) * w].copy_from_slice(&x.data()[i * c + start..i * c + end]);
        }
        Ok(self.emit(
            Op::SliceCols { rows: r, cols: c, start, end },
            &[x],
            Shape::new(&[r, w]),
            out,
            vec![],
        ))
    }

    pub fn slice_rows(&self, x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = x
            .shape()
            .as_matrix()
            .ok_or_else(|| Error::shape("slice_rows", x.shape(), "rank-2"))?;
        if start >= end || end > r {
            return Err(Error::Contract {
                op: "slice_rows",
                msg: format!("range {start}..{end} outside 0..{r}"),
            });
        }
        let out = x.data()[start * c..end * c].to_vec();
        Ok(self.emit(
            Op::SliceRows { rows: r, cols: c, start, end },
            &[x],
            Shape::new(&[end - start, c]),
            out,
            vec![],
        ))
    }

    pub fn sum(&self, x: &Tensor) -> Tensor {
        let s = x.data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        self.emit(Op::Sum, &[x], Shape::new(&[1]), vec![s], vec![])
    }

    pub fn mean(&self, x: &Tensor) -> Tensor {
        let s = (x.data().iter().map(|&v| v as f64).sum::<f64>() / x.numel() as f64) as f32;
        self.emit(Op::Mean, &[x], Shape::new(&[1]), vec![s], vec![])
    }

    /// Inverted dropout with an externally supplied mask of keep decisions.
    /// The mask entries must be 0.0 (dropped) or 1/(1-p) (kept).
    pub fn dropout_with_mask(&self, x: &Tensor, mask: Vec<f32>) -> Result<Tensor> {
        if mask.len() != x.numel() {
            return Err(Error::shape("dropout", x.shape(), mask.len()));
        }
        let out = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        Ok(self.emit(Op::Dropout, &[x], x.shape().clone(), out, vec![mask]))
    }

    // ---- backward pass ---------------------------------------------------------

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// tape-linked tensor; watched tensors the loss never used get zeros.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let root = loss.node.ok_or(Error::Contract {
            op: "backward",
            msg: "loss is not tape-recorded".into(),
        })?;
        if loss.numel() != 1 {
            return Err(Error::Contract {
                op: "backward",
                msg: format!("loss must be scalar, got shape {}", loss.shape()),
            });
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            backprop_node(node, &g, &nodes, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn complex_len(z: &Tensor, op: &'static str) -> Result<usize> {
    match z.dims() {
        [2, l] => Ok(*l),
        _ => Err(Error::shape(op, z.shape(), "[2xL]")),
    }
}

// ---- shared kernels --------------------------------------------------------

pub(crate) fn matmul_kernel(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for p in 0..k {
                acc += a[i * k + p] as f64 * b[p * n + j] as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    out
}

pub(crate) fn causal_conv_kernel(
    x: &[f32],
    w: &[f32],
    l: usize,
    c: usize,
    k: usize,
    valid_from: usize,
) -> Vec<f32> {
    let mut out = vec![0.0f32; l * c];
    for t in valid_from..l {
        for ch in 0..c {
            let mut acc = 0.0f64;
            for m in 0..k {
                let src = t.saturating_sub(m).max(valid_from);
                acc += x[src * c + ch] as f64 * w[m * c + ch] as f64;
            }
            out[t * c + ch] = acc as f32;
        }
    }
    out
}

/// Decay mask entries via cumulative log magnitudes with sign/zero tracking;
/// exact for any-sign coefficients, stable for long products.
pub(crate) fn decay_mask_kernel(a: &[f32]) -> Vec<f32> {
    let l = a.len();
    // prefix[i] aggregates a[1..=i]: zero count, negative count, sum of ln|a|
    let mut zeros = vec![0usize; l];
    let mut negs = vec![0usize; l];
    let mut logs = vec![0.0f64; l];
    for i in 1..l {
        let v = a[i] as f64;
        zeros[i] = zeros[i - 1] + (v == 0.0) as usize;
        negs[i] = negs[i - 1] + (v < 0.0) as usize;
        logs[i] = logs[i - 1] + if v == 0.0 { 0.0 } else { v.abs().ln() };
    }
    let mut out = vec![0.0f32; l * l];
    for i in 0..l {
        out[i * l + i] = 1.0;
        for j in 0..i {
            if zeros[i] - zeros[j] > 0 {
                continue;
            }
            let mag = (logs[i] - logs[j]).exp();
            let sign = if (negs[i] - negs[j]).is_multiple_of(2) { 1.0 } else { -1.0 };
            out[i * l + j] = (sign * mag) as f32;
        }
    }
    out
}

pub(crate) fn ssd_recurrent_kernel(
    c: &[f32],
    bbar: &[f32],
    a: &[f32],
    x: &[f32],
    l: usize,
    d: usize,
    n: usize,
) -> (Vec<f32>, Vec<f32>) {
    let mut h = vec![0.0f64; d * n];
    let mut out = vec![0.0f32; l * n];
    let mut hsave = vec![0.0f32; l * d * n];
    for t in 0..l {
        let decay = a[t] as f64;
        for di in 0..d {
            let bv = bbar[t * d + di] as f64;
            for ni in 0..n {
                let idx = di * n + ni;
                let updated = if t == 0 {
                    bv * x[t * n + ni] as f64
                } else {
                    decay * h[idx] + bv * x[t * n + ni] as f64
                };
                h[idx] = updated;
                hsave[t * d * n + idx] = updated as f32;
            }
        }
        for ni in 0..n {
            let mut acc = 0.0f64;
            for di in 0..d {
                acc += c[t * d + di] as f64 * h[di * n + ni];
            }
            out[t * n + ni] = acc as f32;
        }
    }
    (out, hsave)
}

// ---- backward rules ----------------------------------------------------------

fn backprop_node(node: &Node, g: &[f32], nodes: &[Node], grads: &mut [Option<Vec<f32>>]) {
    let input_data = |i: usize| -> &[f32] {
        match &node.inputs[i] {
            Input::Node(id) => &nodes[id.0].out,
            Input::Const(v) => v,
        }
    };
    let mut acc = |i: usize, delta: Vec<f32>| {
        if let Input::Node(id) = &node.inputs[i] {
            let slot = &mut grads[id.0];
            match slot {
                Some(buf) => {
                    for (b, d) in buf.iter_mut().zip(&delta) {
                        *b += d;
                    }
                }
                None => *slot = Some(delta),
            }
        }
    };

    match &node.op {
        Op::Leaf => {}
        Op::Matmul { m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let a = input_data(0);
            let b = input_data(1);
            if matches!(node.inputs[0], Input::Node(_)) {
                // dA = G . B^T
                let mut da = vec![0.0f32; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0f64;
                        for j in 0..n {
                            s += g[i * n + j] as f64 * b[p * n + j] as f64;
                        }
                        da[i * k + p] = s as f32;
                    }
                }
                acc(0, da);
            }
            if matches!(node.inputs[1], Input::Node(_)) {
                // dB = A^T . G
                let mut db = vec![0.0f32; k * n];
                for p in 0..k {
                    for j in 0..n {
                        let mut s = 0.0f64;
                        for i in 0..m {
                            s += a[i * k + p] as f64 * g[i * n + j] as f64;
                        }
                        db[p * n + j] = s as f32;
                    }
                }
                acc(1, db);
            }
        }
        Op::Transpose { rows, cols } => {
            let (r, c) = (*rows, *cols);
            let mut dx = vec![0.0f32; r * c];
            for i in 0..r {
                for j in 0..c {
                    dx[i * c + j] = g[j * r + i];
                }
            }
            acc(0, dx);
        }
        Op::Add => {
            acc(0, g.to_vec());
            acc(1, g.to_vec());
        }
        Op::Sub => {
            acc(0, g.to_vec());
            acc(1, g.iter().map(|v| -v).collect());
        }
        Op::Mul => {
            let a = input_data(0);
            let b = input_data(1);
            acc(0, g.iter().zip(b).map(|(gv, bv)| gv * bv).collect());
            acc(1, g.iter().zip(a).map(|(gv, av)| gv * av).collect());
        }
        Op::AddRowBroadcast { rows, cols } => {
            acc(0, g.to_vec());
            let mut db = vec![0.0f32; *cols];
            for i in 0..*rows {
                for j in 0..*cols {
                    db[j] += g[i * cols + j];
                }
            }
            acc(1, db);
        }
        Op::Scale(c) => {
            acc(0, g.iter().map(|v| v * c).collect());
        }
        Op::Unary(op) => {
            let x = input_data(0);
            acc(
                0,
                g.iter()
                    .zip(x.iter().zip(&node.out))
                    .map(|(gv, (&xv, &yv))| gv * op.derivative(xv, yv))
                    .collect(),
            );
        }
        Op::LayerNormRow { rows, cols } => {
            let (r, c) = (*rows, *cols);
            let gamma = input_data(1);
            let xhat = &node.saved[0];
            let inv_sigma = &node.saved[1];
            if matches!(node.inputs[0], Input::Node(_)) {
                let mut dx = vec![0.0f32; r * c];
                for i in 0..r {
                    let mut mean_h = 0.0f64;
                    let mut mean_hx = 0.0f64;
                    for j in 0..c {
                        let h = g[i * c + j] as f64 * gamma[j] as f64;
                        mean_h += h;
                        mean_hx += h * xhat[i * c + j] as f64;
                    }
                    mean_h /= c as f64;
                    mean_hx /= c as f64;
                    for j in 0..c {
                        let h = g[i * c + j] as f64 * gamma[j] as f64;
                        dx[i * c + j] = (inv_sigma[i] as f64
                            * (h - mean_h - xhat[i * c + j] as f64 * mean_hx))
                            as f32;
                    }
                }
                acc(0, dx);
            }
            if matches!(node.inputs[1], Input::Node(_)) {
                let mut dg = vec![0.0f32; c];
                for i in 0..r {
                    for j in 0..c {
                        dg[j] += g[i * c + j] * xhat[i * c + j];
                    }
                }
                acc(1, dg);
            }
            if matches!(node.inputs[2], Input::Node(_)) {
                let mut db = vec![0.0f32; c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] += g[i * c + j];
                    }
                }
                acc(2, db);
            }
        }
        Op::LayerNormVec { len, valid_from } => {
            let (l, vf) = (*len, *valid_from);
            let w = l - vf;
            let gamma = input_data(1)[0] as f64;
            let xhat = &node.saved[0];
            let inv = node.saved[1][0] as f64;
            if matches!(node.inputs[0], Input::Node(_)) {
                let mut mean_h = 0.0f64;
                let mut mean_hx = 0.0f64;
                for t in vf..l {
                    let h = g[t] as f64 * gamma;
                    mean_h += h;
                    mean_hx += h * xhat[t] as f64;
                }
                mean_h /= w as f64;
                mean_hx /= w as f64;
                let mut dx = vec![0.0f32; l];
                for t in vf..l {
                    let h = g[t] as f64 * gamma;
                    dx[t] = (inv * (h - mean_h - xhat[t] as f64 * mean_hx)) as f32;
                }
                acc(0, dx);
            }
            if matches!(node.inputs[1], Input::Node(_)) {
                let s: f64 = (vf..l).map(|t| g[t] as f64 * xhat[t] as f64).sum();
                acc(1, vec![s as f32]);
            }
            if matches!(node.inputs[2], Input::Node(_)) {
                let s: f64 = (vf..l).map(|t| g[t] as f64).sum();
                acc(2, vec![s as f32]);
            }
        }
        Op::CausalConv { len, channels, ksize, valid_from } => {
            let (l, c, k, vf) = (*len, *channels, *ksize, *valid_from);
            let x = input_data(0);
            let w = input_data(1);
            if matches!(node.inputs[0], Input::Node(_)) {
                let mut dx = vec![0.0f32; l * c];
                for t in vf..l {
                    for m in 0..k {
                        let src = t.saturating_sub(m).max(vf);
                        for ch in 0..c {
                            dx[src * c + ch] += g[t * c + ch] * w[m * c + ch];
                        }
                    }
                }
                acc(0, dx);
            }
            if matches!(node.inputs[1], Input::Node(_)) {
                let mut dw = vec![0.0f32; k * c];
                for t in vf..l {
                    for m in 0..k {
                        let src = t.saturating_sub(m).max(vf);
                        for ch in 0..c {
                            dw[m * c + ch] += g[t * c + ch] * x[src * c + ch];
                        }
                    }
                }
                acc(1, dw);
            }
        }
        Op::RowScale { rows, cols } => {
            let (r, c) = (*rows, *cols);
            let x = input_data(0);
            let v = input_data(1);
            if matches!(node.inputs[0], Input::Node(_)) {
                let mut dx = vec![0.0f32; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[i * c + j] * v[i];
                    }
                }
                acc(0, dx);
            }
            if matches!(node.inputs[1], Input::Node(_)) {
                let mut dv = vec![0.0f32; r];
                for i in 0..r {
                    let mut s = 0.0f64;
                    for j in 0..c {
                        s += g[i * c + j] as f64 * x[i * c + j] as f64;
                    }
                    dv[i] = s as f32;
                }
                acc(1, dv);
            }
        }
        Op::ScalarMul => {
            let x = input_data(0);
            let s = input_data(1)[0];
            if matches!(node.inputs[0], Input::Node(_)) {
                acc(0, g.iter().map(|v| v * s).collect());
            }
            if matches!(node.inputs[1], Input::Node(_)) {
                let ds: f64 = g.iter().zip(x).map(|(gv, xv)| *gv as f64 * *xv as f64).sum();
                acc(1, vec![ds as f32]);
            }
        }
        Op::DecayMask { len } => {
            let l = *len;
            let a = input_data(0);
            let mask = &node.saved[0];
            let mut da = vec![0.0f32; l];
            // row prefixes of g (.) mask: dA[k] = sum_{i>=k} prefix(i, k-1) / a[k]
            let mut prefix = vec![0.0f64; l];
            for i in 1..l {
                let mut run = 0.0f64;
                for j in 0..i {
                    run += g[i * l + j] as f64 * mask[i * l + j] as f64;
                    prefix[j] = run;
                }
                for k in 1..=i {
                    let av = a[k] as f64;
                    if av.abs() > 1e-20 {
                        da[k] += (prefix[k - 1] / av) as f32;
                    } else {
                        // direct product excluding the zero factor
                        for j in 0..k {
                            let gv = g[i * l + j] as f64;
                            if gv == 0.0 {
                                continue;
                            }
                            let mut p = 1.0f64;
                            for m in (j + 1)..=i {
                                if m != k {
                                    p *= a[m] as f64;
                                }
                            }
                            da[k] += (gv * p) as f32;
                        }
                    }
                }
            }
            acc(0, da);
        }
        Op::SsdRecurrent { l, d, n } => {
            let (l, d, n) = (*l, *d, *n);
            let c = input_data(0);
            let bbar = input_data(1);
            let a = input_data(2);
            let x = input_data(3);
            let h = &node.saved[0];
            let mut dc = vec![0.0f32; l * d];
            let mut dbbar = vec![0.0f32; l * d];
            let mut da = vec![0.0f32; l];
            let mut dx = vec![0.0f32; l * n];
            let mut gh = vec![0.0f64; d * n];
            for t in (0..l).rev() {
                // inject dY_t into h_t and read dC_t
                for di in 0..d {
                    let mut s = 0.0f64;
                    for ni in 0..n {
                        let gv = g[t * n + ni] as f64;
                        s += gv * h[t * d * n + di * n + ni] as f64;
                        gh[di * n + ni] += c[t * d + di] as f64 * gv;
                    }
                    dc[t * d + di] = s as f32;
                }
                // dBbar_t, dX_t from gh
                for di in 0..d {
                    let mut s = 0.0f64;
                    for ni in 0..n {
                        s += gh[di * n + ni] * x[t * n + ni] as f64;
                    }
                    dbbar[t * d + di] = s as f32;
                }
                for ni in 0..n {
                    let mut s = 0.0f64;
                    for di in 0..d {
                        s += gh[di * n + ni] * bbar[t * d + di] as f64;
                    }
                    dx[t * n + ni] = s as f32;
                }
                // da_t against h_{t-1}, then pass gh back through the decay
                if t > 0 {
                    let mut s = 0.0f64;
                    for idx in 0..d * n {
                        s += gh[idx] * h[(t - 1) * d * n + idx] as f64;
                    }
                    da[t] = s as f32;
                    let decay = a[t] as f64;
                    for v in gh.iter_mut() {
                        *v *= decay;
                    }
                }
            }
            acc(0, dc);
            acc(1, dbbar);
            acc(2, da);
            acc(3, dx);
        }
        Op::Fft { inverse, len } => {
            let l = *len;
            let pairs: Vec<(f64, f64)> = (0..l).map(|i| (g[i] as f64, g[l + i] as f64)).collect();
            // VJP of the forward DFT is the unnormalized inverse; VJP of the
            // inverse is the forward scaled by 1/L.
            let res = if *inverse {
                fft_pairs(&pairs).into_iter().map(|(r, i)| (r / l as f64, i / l as f64)).collect::<Vec<_>>()
            } else {
                ifft_pairs(&pairs).into_iter().map(|(r, i)| (r * l as f64, i * l as f64)).collect::<Vec<_>>()
            };
            let mut dz = vec![0.0f32; 2 * l];
            for (i, (r, im)) in res.iter().enumerate() {
                dz[i] = *r as f32;
                dz[l + i] = *im as f32;
            }
            acc(0, dz);
        }
        Op::ComplexLinear { len } => {
            let l = *len;
            let z = input_data(0);
            let w = input_data(1);
            let (zr, zi) = z.split_at(l);
            let (wr, wi) = w.split_at(l * l);
            let (gr, gi) = g.split_at(l);
            if matches!(node.inputs[0], Input::Node(_)) {
                let mut dz = vec![0.0f32; 2 * l];
                for nn in 0..l {
                    let mut sre = 0.0f64;
                    let mut sim = 0.0f64;
                    for k in 0..l {
                        let (wre, wim) = (wr[k * l + nn] as f64, wi[k * l + nn] as f64);
                        sre += gr[k] as f64 * wre + gi[k] as f64 * wim;
                        sim += -(gr[k] as f64) * wim + gi[k] as f64 * wre;
                    }
                    dz[nn] = sre as f32;
                    dz[l + nn] = sim as f32;
                }
                acc(0, dz);
            }
            if matches!(node.inputs[1], Input::Node(_)) {
                let mut dw = vec![0.0f32; 2 * l * l];
                for k in 0..l {
                    for nn in 0..l {
                        dw[k * l + nn] = gr[k] * zr[nn] + gi[k] * zi[nn];
                        dw[l * l + k * l + nn] = -gr[k] * zi[nn] + gi[k] * zr[nn];
                    }
                }
                acc(1, dw);
            }
            if matches!(node.inputs[2], Input::Node(_)) {
                acc(2, g.to_vec());
            }
        }
        Op::ComplexMul { len } => {
            let l = *len;
            let a = input_data(0);
            let b = input_data(1);
            let (ar, ai) = a.split_at(l);
            let (br, bi) = b.split_at(l);
            let (gr, gi) = g.split_at(l);
            if matches!(node.inputs[0], Input::Node(_)) {
                let mut da = vec![0.0f32; 2 * l];
                for i in 0..l {
                    da[i] = gr[i] * br[i] + gi[i] * bi[i];
                    da[l + i] = -gr[i] * bi[i] + gi[i] * br[i];
                }
                acc(0, da);
            }
            if matches!(node.inputs[1], Input::Node(_)) {
                let mut db = vec![0.0f32; 2 * l];
                for i in 0..l {
                    db[i] = gr[i] * ar[i] + gi[i] * ai[i];
                    db[l + i] = -gr[i] * ai[i] + gi[i] * ar[i];
                }
                acc(1, db);
            }
        }
        Op::RealToComplex { len } => {
            acc(0, g[..*len].to_vec());
        }
        Op::ComplexRealPart { len } => {
            let l = *len;
            let mut dz = vec![0.0f32; 2 * l];
            dz[..l].copy_from_slice(g);
            acc(0, dz);
        }
        Op::GatherRows { indices, cols } => {
            let c = *cols;
            let rows = match &node.inputs[0] {
                Input::Node(id) => nodes[id.0].out.len() / c,
                Input::Const(v) => v.len() / c,
            };
            let mut dt = vec![0.0f32; rows * c];
            for (i, idx) in indices.iter().enumerate() {
                if let Some(row) = idx {
                    for j in 0..c {
                        dt[row * c + j] += g[i * c + j];
                    }
                }
            }
            acc(0, dt);
        }
        Op::GatherElems { indices, cols } => {
            let c = *cols;
            let mut dx = vec![0.0f32; indices.len() * c];
            for (i, &j) in indices.iter().enumerate() {
                dx[i * c + j] += g[i];
            }
            acc(0, dx);
        }
        Op::LogSumExpRow { rows, cols } => {
            let (r, c) = (*rows, *cols);
            let softmax = &node.saved[0];
            let mut dx = vec![0.0f32; r * c];
            for i in 0..r {
                for j in 0..c {
                    dx[i * c + j] = g[i] * softmax[i * c + j];
                }
            }
            acc(0, dx);
        }
        Op::ConcatRows { row_counts, cols } => {
            let c = *cols;
            let mut offset = 0usize;
            for (i, &r) in row_counts.iter().enumerate() {
                let part = g[offset * c..(offset + r) * c].to_vec();
                acc(i, part);
                offset += r;
            }
        }
        Op::Reshape => {
            acc(0, g.to_vec());
        }
        Op::SliceCols { rows, cols, start, end } => {
            let (r, c, s, e) = (*rows, *cols, *start, *end);
            let w = e - s;
            let mut dx = vec![0.0f32; r * c];
            for i in 0..r {
                dx[i * c + s..i * c + e].copy_from_slice(&g[i * w..(i + 1) * w]);
            }
            acc(0, dx);
        }
        Op::SliceRows { rows, cols, start, end } => {
            let (r, c, s, e) = (*rows, *cols, *start, *end);
            let mut dx = vec![0.0f32; r * c];
            dx[s * c..e * c].copy_from_slice(&g[..(e - s) * c]);
            acc(0, dx);
        }
        Op::Sum => {
            let n = match &node.inputs[0] {
                Input::Node(id) => nodes[id.0].out.len(),
                Input::Const(v) => v.len(),
            };
            acc(0, vec![g[0]; n]);
        }
        Op::Mean => {
            let n = match &node.inputs[0] {
                Input::Node(id) => nodes[id.0].out.len(),
                Input::Const(v) => v.len(),
            };
            acc(0, vec![g[0] / n as f32; n]);
        }
        Op::Dropout => {
            let mask = &node.saved[0];
            acc(0, g.iter().zip(mask).map(|(gv, m)| gv * m).collect());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_of(tape: &Tape, loss: &Tensor, t: &Tensor) -> Vec<f32> {
        tape.backward(loss).unwrap().wrt(t).unwrap().data().to_vec()
    }

    #[test]
    fn matmul_identity_and_basis() {
        let tape = Tape::new();
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = tape.matmul(&eye, &m).unwrap();
        assert_eq!(y.data(), m.data());

        let pick = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let col = Tensor::matrix(2, 1, vec![5.0, 7.0]).unwrap();
        let y = tape.matmul(&pick, &col).unwrap();
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let a: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tape = Tape::new();
        let ta = Tensor::matrix(3, 4, a.clone()).unwrap();
        let tb = Tensor::matrix(4, 2, b.clone()).unwrap();
        let y = tape.matmul(&ta, &tb).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut want = 0.0f64;
                for p in 0..4 {
                    want += a[i * 4 + p] as f64 * b[p * 2 + j] as f64;
                }
                assert!((y.at2(i, j) as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        let err = tape.matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2x3]") && err.contains("[2x2]"), "{err}");
    }

    #[test]
    fn unary_known_values() {
        let tape = Tape::new();
        let x = Tensor::vector(&[0.0]);
        // softplus(0) = ln 2, silu(0) = 0, exp([0,1]) = [1, e]
        assert!((tape.softplus(&x).data()[0] - std::f32::consts::LN_2).abs() < 1e-5);
        assert_eq!(tape.silu(&x).data()[0], 0.0);
        let e = tape.exp(&Tensor::vector(&[0.0, 1.0]));
        assert!((e.data()[0] - 1.0).abs() < 1e-6);
        assert!((e.data()[1] - std::f32::consts::E).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_constant_row_and_affine() {
        let tape = Tape::new();
        let x = Tensor::matrix(1, 4, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let gamma = Tensor::vector(&[1.0, 1.0, 1.0, 1.0]);
        let beta = Tensor::vector(&[0.0, 0.0, 0.0, 0.0]);
        let y = tape.layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-6);
        }

        let g0 = Tensor::vector(&[0.0]);
        let b5 = Tensor::vector(&[5.0]);
        let x = Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let y = tape.layer_norm(&x, &g0, &b5, 1e-5).unwrap();
        for &v in y.data() {
            assert!((v - 5.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_vec_length_axis() {
        let tape = Tape::new();
        let x = Tensor::vector(&[0.0, 10.0, 20.0]);
        let y = tape
            .layer_norm_vec(&x, &Tensor::scalar(1.0), &Tensor::scalar(0.0), 1e-7, 0)
            .unwrap();
        assert!((y.data()[0] + 1.2247).abs() < 1e-3);
        assert!(y.data()[1].abs() < 1e-5);
        assert!((y.data()[2] - 1.2247).abs() < 1e-3);
    }

    #[test]
    fn causal_conv_delta_kernel_is_identity() {
        let tape = Tape::new();
        let x = Tensor::matrix(5, 2, (0..10).map(|v| v as f32).collect()).unwrap();
        let w = Tensor::matrix(4, 2, vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let y = tape.causal_conv(&x, &w, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn causal_conv_clamped_boundary() {
        // x=[1,2,3], w=[1,1]: t=0 clamps to x0 twice -> 2
        let tape = Tape::new();
        let x = Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        let y = tape.causal_conv(&x, &w, 0).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0, 5.0]);
    }

    #[test]
    fn causal_conv_zero_input() {
        let tape = Tape::new();
        let x = Tensor::matrix(4, 3, vec![0.0; 12]).unwrap();
        let w = Tensor::matrix(2, 3, vec![0.3; 6]).unwrap();
        let y = tape.causal_conv(&x, &w, 0).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn causality_of_conv() {
        let tape = Tape::new();
        let mut base = vec![0.5f32; 6];
        let x = Tensor::matrix(6, 1, base.clone()).unwrap();
        let w = Tensor::matrix(3, 1, vec![0.2, 0.3, 0.4]).unwrap();
        let y0 = tape.causal_conv(&x, &w, 0).unwrap();
        base[4] += 1.0;
        let x2 = Tensor::matrix(6, 1, base).unwrap();
        let y1 = tape.causal_conv(&x2, &w, 0).unwrap();
        for t in 0..4 {
            assert_eq!(y0.data()[t].to_bits(), y1.data()[t].to_bits());
        }
    }

    #[test]
    fn backward_sum_and_square() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::vector(&[1.0, 2.0, 3.0]));
        let loss = tape.sum(&x);
        assert_eq!(grad_of(&tape, &loss, &x), vec![1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let x = tape.watch(&Tensor::vector(&[1.0, 2.0]));
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&sq);
        assert_eq!(grad_of(&tape, &loss, &x), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_unused_param_gets_zeros() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::vector(&[1.0, 2.0]));
        let unused = tape.watch(&Tensor::vector(&[3.0]));
        let loss = tape.sum(&x);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&unused).unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::vector(&[1.0, 2.0]));
        assert!(tape.backward(&x).is_err());
    }

    #[test]
    fn backward_rejects_constant_loss() {
        let tape = Tape::new();
        assert!(tape.backward(&Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn decay_mask_examples() {
        let tape = Tape::new();
        // unit decay: all-ones lower triangle
        let m = tape.decay_mask(&Tensor::vector(&[9.0, 1.0, 1.0])).unwrap();
        assert_eq!(m.data(), &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
        // direct products
        let m = tape.decay_mask(&Tensor::vector(&[9.0, 2.0, 3.0])).unwrap();
        assert_eq!(m.data(), &[1.0, 0.0, 0.0, 2.0, 1.0, 0.0, 6.0, 3.0, 1.0]);
    }

    #[test]
    fn decay_mask_handles_zero_and_negative() {
        let tape = Tape::new();
        let m = tape.decay_mask(&Tensor::vector(&[1.0, 0.0, -2.0])).unwrap();
        assert_eq!(m.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, -2.0, 1.0]);
    }

    #[test]
    fn dropout_mask_applies_and_backprops() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::vector(&[1.0, 2.0, 3.0]));
        let y = tape.dropout_with_mask(&x, vec![2.0, 0.0, 2.0]).unwrap();
        assert_eq!(y.data(), &[2.0, 0.0, 6.0]);
        let loss = tape.sum(&y);
        assert_eq!(grad_of(&tape, &loss, &x), vec![2.0, 0.0, 2.0]);
    }

    #[test]
    fn logsumexp_uniform_row() {
        let tape = Tape::new();
        let x = Tensor::matrix(1, 4, vec![0.0; 4]).unwrap();
        let y = tape.logsumexp_rows(&x).unwrap();
        assert!((y.data()[0] - (4.0f32).ln()).abs() < 1e-6);
    }
}
