//! Dense arrays and a tape-based reverse-mode autodiff engine.
//!
//! Values are stored as row-major `f32`; every reduction (matmul inner
//! products, sums, softmax denominators, log-sum-exp, layer-norm moments)
//! accumulates in `f64` before rounding back. One `Tape` is created per
//! training step, owns every intermediate value of that step, and is
//! replayed in reverse for gradients. Constants (inputs, frozen teacher
//! values, masks) are pushed with `constant()` and never receive gradients.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Plain dense array: shape + row-major data. Model parameters, features
/// and decoded activations all live in this type; gradient tracking only
/// exists for values pushed onto a [`Tape`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    /// N(0, std) initialized tensor.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Self {
        let mut t = Tensor::zeros(shape);
        rng.fill_gaussian(&mut t.data, std);
        t
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a 2-D tensor (a 1-D tensor counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }
}

pub type ValueId = usize;

/// Recorded operation; parents always have smaller ids than the node.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Affine { x: ValueId, scale: f32 },
    Exp(ValueId),
    Ln(ValueId),
    Tanh(ValueId),
    Sigmoid(ValueId),
    Swish(ValueId),
    ClampMin { x: ValueId, min: f32 },
    Matmul { a: ValueId, b: ValueId, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    BiasAdd { x: ValueId, b: ValueId },
    CrossAdd { a: ValueId, b: ValueId, m: usize, n: usize, k: usize },
    LayerNorm { x: ValueId, gamma: ValueId, beta: ValueId, cache: Vec<(f32, f32)> },
    MaskedSoftmaxRows { x: ValueId, mask: Vec<bool> },
    LogSoftmaxRows { x: ValueId },
    Gather { x: ValueId, idx: Vec<usize> },
    GatherRows { x: ValueId, rows: Vec<usize> },
    SliceCols { x: ValueId, from: usize, to: usize },
    ConcatCols { xs: Vec<ValueId> },
    ConcatRows { xs: Vec<ValueId> },
    DepthwiseConv { x: ValueId, w: ValueId, bias: ValueId, pad_left: usize },
    SumAll(ValueId),
    MeanAll(ValueId),
    LogSumExp2 { a: ValueId, b: ValueId },
    LogSumExpAll(ValueId),
}

/// Reverse-mode tape. Holds the value arena, the op graph and (after
/// `backward`) per-node gradients. An empty grad vec means "no gradient".
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    grads: Vec<Vec<f32>>,
    needs_grad: Vec<bool>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { values: Vec::new(), ops: Vec::new(), grads: Vec::new(), needs_grad: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.values[id]
    }

    /// Scalar value of a `[1]` node, as f64.
    pub fn scalar_value(&self, id: ValueId) -> f64 {
        assert_eq!(self.values[id].numel(), 1);
        self.values[id].data[0] as f64
    }

    /// Gradient buffer of a node, if one was populated by `backward`.
    pub fn grad(&self, id: ValueId) -> Option<&[f32]> {
        let g = &self.grads[id];
        if g.is_empty() { None } else { Some(g) }
    }

    fn push(&mut self, value: Tensor, op: Op, needs: bool) -> ValueId {
        self.values.push(value);
        self.ops.push(op);
        self.grads.push(Vec::new());
        self.needs_grad.push(needs);
        self.values.len() - 1
    }

    fn needs(&self, id: ValueId) -> bool {
        self.needs_grad[id]
    }

    /// Gradient-tracked leaf (a parameter).
    pub fn leaf(&mut self, t: Tensor) -> ValueId {
        self.push(t, Op::Leaf, true)
    }

    /// Untracked leaf (input features, frozen teacher values, masks).
    pub fn constant(&mut self, t: Tensor) -> ValueId {
        self.push(t, Op::Leaf, false)
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        assert_eq!(self.values[a].shape, self.values[b].shape, "add shape mismatch");
        let data = self.values[a]
            .data
            .iter()
            .zip(&self.values[b].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.values[a].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, data), Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> ValueId {
        assert_eq!(self.values[a].shape, self.values[b].shape, "sub shape mismatch");
        let data = self.values[a]
            .data
            .iter()
            .zip(&self.values[b].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.values[a].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, data), Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        assert_eq!(self.values[a].shape, self.values[b].shape, "mul shape mismatch");
        let data = self.values[a]
            .data
            .iter()
            .zip(&self.values[b].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.values[a].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, data), Op::Mul(a, b), needs)
    }

    /// scale * x + shift, elementwise.
    pub fn affine(&mut self, x: ValueId, scale: f32, shift: f32) -> ValueId {
        let data = self.values[x].data.iter().map(|v| scale * v + shift).collect();
        let shape = self.values[x].shape.clone();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, data), Op::Affine { x, scale }, needs)
    }

    pub fn exp(&mut self, x: ValueId) -> ValueId {
        let data = self.values[x].data.iter().map(|v| (*v as f64).exp() as f32).collect();
        let shape = self.values[x].shape.clone();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, data), Op::Exp(x), needs)
    }

    pub fn ln(&mut self, x: ValueId) -> ValueId {
        let data = self.values[x].data.iter().map(|v| (*v as f64).ln() as f32).collect();
        let shape = self.values[x].shape.clone();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, data), Op::Ln(x), needs)
    }

    pub fn tanh(&mut self, x: ValueId) -> ValueId {
        let data = self.values[x].data.iter().map(|v| (*v as f64).tanh() as f32).collect();
        let shape = self.values[x].shape.clone();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, data), Op::Tanh(x), needs)
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let data = self.values[x]
            .data
            .iter()
            .map(|v| (1.0 / (1.0 + (-(*v as f64)).exp())) as f32)
            .collect();
        let shape = self.values[x].shape.clone();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, data), Op::Sigmoid(x), needs)
    }

    /// swish(x) = x * sigmoid(x)
    pub fn swish(&mut self, x: ValueId) -> ValueId {
        let data = self.values[x]
            .data
            .iter()
            .map(|v| {
                let xv = *v as f64;
                (xv / (1.0 + (-xv).exp())) as f32
            })
            .collect();
        let shape = self.values[x].shape.clone();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, data), Op::Swish(x), needs)
    }

    pub fn clamp_min(&mut self, x: ValueId, min: f32) -> ValueId {
        let data = self.values[x].data.iter().map(|v| v.max(min)).collect();
        let shape = self.values[x].shape.clone();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, data), Op::ClampMin { x, min }, needs)
    }

    // ---- linear algebra --------------------------------------------------

    /// 2-D matmul with optional transposes: out = op(a) @ op(b).
    pub fn matmul(&mut self, a: ValueId, b: ValueId, ta: bool, tb: bool) -> ValueId {
        let (ar, ac) = (self.values[a].rows(), self.values[a].cols());
        let (br, bc) = (self.values[b].rows(), self.values[b].cols());
        let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(ka, kb, "matmul inner dims {ka} vs {kb}");
        let mut out = vec![0.0f32; m * n];
        mm_acc(
            &self.values[a].data,
            &self.values[b].data,
            m,
            ka,
            n,
            ta,
            tb,
            &mut out,
        );
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Tensor::new(vec![m, n], out),
            Op::Matmul { a, b, ta, tb, m, k: ka, n },
            needs,
        )
    }

    /// x (m×n) + b (n), broadcast over rows.
    pub fn bias_add(&mut self, x: ValueId, b: ValueId) -> ValueId {
        let (m, n) = (self.values[x].rows(), self.values[x].cols());
        assert_eq!(self.values[b].numel(), n, "bias_add width mismatch");
        let mut data = self.values[x].data.clone();
        for r in 0..m {
            for c in 0..n {
                data[r * n + c] += self.values[b].data[c];
            }
        }
        let shape = self.values[x].shape.clone();
        let needs = self.needs(x) || self.needs(b);
        self.push(Tensor::new(shape, data), Op::BiasAdd { x, b }, needs)
    }

    /// All-pairs row sums: a (m×k), b (n×k) -> (m*n)×k with
    /// out[i*n+j, :] = a[i, :] + b[j, :].
    pub fn cross_add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (m, k) = (self.values[a].rows(), self.values[a].cols());
        let (n, k2) = (self.values[b].rows(), self.values[b].cols());
        assert_eq!(k, k2, "cross_add width mismatch");
        let mut data = vec![0.0f32; m * n * k];
        for i in 0..m {
            let ar = &self.values[a].data[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &self.values[b].data[j * k..(j + 1) * k];
                let o = (i * n + j) * k;
                for c in 0..k {
                    data[o + c] = ar[c] + br[c];
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![m * n, k], data), Op::CrossAdd { a, b, m, n, k }, needs)
    }

    /// Per-row layer norm with learned scale/shift.
    pub fn layer_norm(&mut self, x: ValueId, gamma: ValueId, beta: ValueId) -> ValueId {
        const EPS: f64 = 1e-5;
        let (m, n) = (self.values[x].rows(), self.values[x].cols());
        assert_eq!(self.values[gamma].numel(), n);
        assert_eq!(self.values[beta].numel(), n);
        let mut data = vec![0.0f32; m * n];
        let mut cache = Vec::with_capacity(m);
        for r in 0..m {
            let row = &self.values[x].data[r * n..(r + 1) * n];
            let mean = row.iter().map(|v| *v as f64).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + EPS).sqrt();
            cache.push((mean as f32, rstd as f32));
            for c in 0..n {
                let xhat = (row[c] as f64 - mean) * rstd;
                data[r * n + c] =
                    (xhat * self.values[gamma].data[c] as f64 + self.values[beta].data[c] as f64) as f32;
            }
        }
        let shape = self.values[x].shape.clone();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(Tensor::new(shape, data), Op::LayerNorm { x, gamma, beta, cache }, needs)
    }

    /// Row-wise softmax over the entries where `mask` is true; masked
    /// entries are exactly zero in the output.
    pub fn masked_softmax_rows(&mut self, x: ValueId, mask: Vec<bool>) -> ValueId {
        let (m, n) = (self.values[x].rows(), self.values[x].cols());
        assert_eq!(mask.len(), m * n, "mask size mismatch");
        let mut data = vec![0.0f32; m * n];
        for r in 0..m {
            let row = &self.values[x].data[r * n..(r + 1) * n];
            let mrow = &mask[r * n..(r + 1) * n];
            let mut maxv = f64::NEG_INFINITY;
            for c in 0..n {
                if mrow[c] {
                    maxv = maxv.max(row[c] as f64);
                }
            }
            if maxv == f64::NEG_INFINITY {
                continue; // fully masked row stays zero
            }
            let mut denom = 0.0f64;
            for c in 0..n {
                if mrow[c] {
                    denom += ((row[c] as f64) - maxv).exp();
                }
            }
            for c in 0..n {
                if mrow[c] {
                    data[r * n + c] = (((row[c] as f64) - maxv).exp() / denom) as f32;
                }
            }
        }
        let shape = self.values[x].shape.clone();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, data), Op::MaskedSoftmaxRows { x, mask }, needs)
    }

    /// Row-wise softmax with no mask.
    pub fn softmax_rows(&mut self, x: ValueId) -> ValueId {
        let n = self.values[x].numel();
        self.masked_softmax_rows(x, vec![true; n])
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&mut self, x: ValueId) -> ValueId {
        let (m, n) = (self.values[x].rows(), self.values[x].cols());
        let mut data = vec![0.0f32; m * n];
        for r in 0..m {
            let row = &self.values[x].data[r * n..(r + 1) * n];
            let maxv = row.iter().fold(f64::NEG_INFINITY, |acc, v| acc.max(*v as f64));
            let denom: f64 = row.iter().map(|v| ((*v as f64) - maxv).exp()).sum();
            let lse = maxv + denom.ln();
            for c in 0..n {
                data[r * n + c] = ((row[c] as f64) - lse) as f32;
            }
        }
        let shape = self.values[x].shape.clone();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, data), Op::LogSoftmaxRows { x }, needs)
    }

    /// out[i] = x.data[idx[i]] — arbitrary flat-index gather.
    pub fn gather(&mut self, x: ValueId, idx: Vec<usize>, out_shape: Vec<usize>) -> ValueId {
        assert_eq!(out_shape.iter().product::<usize>(), idx.len());
        let data = idx.iter().map(|&i| self.values[x].data[i]).collect();
        let needs = self.needs(x);
        self.push(Tensor::new(out_shape, data), Op::Gather { x, idx }, needs)
    }

    /// Select a single element as a scalar node.
    pub fn select(&mut self, x: ValueId, flat_index: usize) -> ValueId {
        self.gather(x, vec![flat_index], vec![1])
    }

    /// Row gather (embedding lookup).
    pub fn gather_rows(&mut self, x: ValueId, rows: Vec<usize>) -> ValueId {
        let n = self.values[x].cols();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in &rows {
            data.extend_from_slice(self.values[x].row(r));
        }
        let needs = self.needs(x);
        self.push(Tensor::new(vec![rows.len(), n], data), Op::GatherRows { x, rows }, needs)
    }

    pub fn slice_cols(&mut self, x: ValueId, from: usize, to: usize) -> ValueId {
        let (m, n) = (self.values[x].rows(), self.values[x].cols());
        assert!(from < to && to <= n);
        let w = to - from;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&self.values[x].data[r * n + from..r * n + to]);
        }
        let needs = self.needs(x);
        self.push(Tensor::new(vec![m, w], data), Op::SliceCols { x, from, to }, needs)
    }

    pub fn concat_cols(&mut self, xs: &[ValueId]) -> ValueId {
        assert!(!xs.is_empty());
        let m = self.values[xs[0]].rows();
        let total: usize = xs.iter().map(|&x| self.values[x].cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &x in xs {
                assert_eq!(self.values[x].rows(), m);
                let n = self.values[x].cols();
                data.extend_from_slice(&self.values[x].data[r * n..(r + 1) * n]);
            }
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        self.push(Tensor::new(vec![m, total], data), Op::ConcatCols { xs: xs.to_vec() }, needs)
    }

    pub fn concat_rows(&mut self, xs: &[ValueId]) -> ValueId {
        assert!(!xs.is_empty());
        let n = self.values[xs[0]].cols();
        let total: usize = xs.iter().map(|&x| self.values[x].rows()).sum();
        let mut data = Vec::with_capacity(total * n);
        for &x in xs {
            assert_eq!(self.values[x].cols(), n);
            data.extend_from_slice(&self.values[x].data);
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        self.push(Tensor::new(vec![total, n], data), Op::ConcatRows { xs: xs.to_vec() }, needs)
    }

    /// Depthwise 1-D convolution over time. x: T×D, w: K×D, bias: D.
    /// Output length is T; `pad_left` zeros are implied before the input
    /// (causal: K-1; centered: (K-1)/2).
    pub fn depthwise_conv1d(&mut self, x: ValueId, w: ValueId, bias: ValueId, pad_left: usize) -> ValueId {
        let (t_len, d) = (self.values[x].rows(), self.values[x].cols());
        let (k_len, d2) = (self.values[w].rows(), self.values[w].cols());
        assert_eq!(d, d2, "depthwise_conv1d channel mismatch");
        assert_eq!(self.values[bias].numel(), d);
        assert!(pad_left < k_len);
        let mut data = vec![0.0f32; t_len * d];
        let xv = &self.values[x].data;
        let wv = &self.values[w].data;
        let bv = &self.values[bias].data;
        for t in 0..t_len {
            for c in 0..d {
                let mut acc = bv[c] as f64;
                for k in 0..k_len {
                    let src = t as isize + k as isize - pad_left as isize;
                    if src >= 0 && (src as usize) < t_len {
                        acc += wv[k * d + c] as f64 * xv[src as usize * d + c] as f64;
                    }
                }
                data[t * d + c] = acc as f32;
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(bias);
        self.push(
            Tensor::new(vec![t_len, d], data),
            Op::DepthwiseConv { x, w, bias, pad_left },
            needs,
        )
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        let s: f64 = self.values[x].data.iter().map(|v| *v as f64).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s as f32), Op::SumAll(x), needs)
    }

    pub fn mean_all(&mut self, x: ValueId) -> ValueId {
        let n = self.values[x].numel();
        let s: f64 = self.values[x].data.iter().map(|v| *v as f64).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar((s / n as f64) as f32), Op::MeanAll(x), needs)
    }

    /// Elementwise log(exp(a) + exp(b)), stable, -inf aware.
    pub fn logsumexp2(&mut self, a: ValueId, b: ValueId) -> ValueId {
        assert_eq!(self.values[a].shape, self.values[b].shape);
        let data = self.values[a]
            .data
            .iter()
            .zip(&self.values[b].data)
            .map(|(&x, &y)| lse2(x as f64, y as f64) as f32)
            .collect();
        let shape = self.values[a].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, data), Op::LogSumExp2 { a, b }, needs)
    }

    /// log sum exp over every element -> scalar; max-subtracted.
    pub fn logsumexp_all(&mut self, x: ValueId) -> ValueId {
        let v = logsumexp_slice(&self.values[x].data);
        let needs = self.needs(x);
        self.push(Tensor::scalar(v as f32), Op::LogSumExpAll(x), needs)
    }

    /// Inverted-dropout: multiplies by a 0 / (1/(1-p)) mask drawn from `rng`.
    /// p == 0 is the identity.
    pub fn dropout(&mut self, x: ValueId, p: f64, rng: &mut Rng) -> ValueId {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let scale = (1.0 / keep) as f32;
        let mask: Vec<f32> = (0..self.values[x].numel())
            .map(|_| if rng.uniform() < keep { scale } else { 0.0 })
            .collect();
        let shape = self.values[x].shape.clone();
        let m = self.constant(Tensor::new(shape, mask));
        self.mul(x, m)
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse pass from a scalar node. Populates gradients of every
    /// grad-tracked node that the root depends on.
    pub fn backward(&mut self, root: ValueId) {
        assert_eq!(self.values[root].numel(), 1, "backward root must be scalar");
        self.grads[root] = vec![1.0];
        for i in (0..=root).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let g = std::mem::take(&mut self.grads[i]);
            if g.is_empty() {
                continue;
            }
            backprop_node(&self.ops[i], &g, &self.values, &mut self.grads, &self.needs_grad);
            self.grads[i] = g;
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Stable scalar log(exp(a)+exp(b)).
fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY && b == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Stable log-sum-exp over a slice, f64 accumulation.
pub fn logsumexp_slice(v: &[f32]) -> f64 {
    let m = v.iter().fold(f64::NEG_INFINITY, |acc, x| acc.max(*x as f64));
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = v.iter().map(|x| ((*x as f64) - m).exp()).sum();
    m + s.ln()
}

/// out += op(a) @ op(b), f64 accumulation.
#[allow(clippy::too_many_arguments)]
fn mm_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, ta: bool, tb: bool, out: &mut [f32]) {
    match (ta, tb) {
        (false, false) => {
            // a: m×k, b: k×n
            let mut acc = vec![0.0f64; n];
            for i in 0..m {
                acc.iter_mut().for_each(|v| *v = 0.0);
                for kk in 0..k {
                    let av = a[i * k + kk] as f64;
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[kk * n..(kk + 1) * n];
                    for j in 0..n {
                        acc[j] += av * brow[j] as f64;
                    }
                }
                for j in 0..n {
                    out[i * n + j] += acc[j] as f32;
                }
            }
        }
        (false, true) => {
            // a: m×k, b: n×k
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = 0.0f64;
                    for kk in 0..k {
                        acc += arow[kk] as f64 * brow[kk] as f64;
                    }
                    out[i * n + j] += acc as f32;
                }
            }
        }
        (true, false) => {
            // a: k×m, b: k×n
            let mut acc = vec![0.0f64; m * n];
            for kk in 0..k {
                let arow = &a[kk * m..(kk + 1) * m];
                let brow = &b[kk * n..(kk + 1) * n];
                for i in 0..m {
                    let av = arow[i] as f64;
                    if av == 0.0 {
                        continue;
                    }
                    let dst = &mut acc[i * n..(i + 1) * n];
                    for j in 0..n {
                        dst[j] += av * brow[j] as f64;
                    }
                }
            }
            for (o, v) in out.iter_mut().zip(acc) {
                *o += v as f32;
            }
        }
        (true, true) => panic!("matmul with both transposes is not supported"),
    }
}

fn ensure<'a>(
    grads: &'a mut [Vec<f32>],
    needs: &[bool],
    id: ValueId,
    len: usize,
) -> Option<&'a mut Vec<f32>> {
    if !needs[id] {
        return None;
    }
    let g = &mut grads[id];
    if g.is_empty() {
        g.resize(len, 0.0);
    }
    Some(g)
}

/// Push one node's output gradient into its parents.
fn backprop_node(op: &Op, g: &[f32], values: &[Tensor], grads: &mut [Vec<f32>], needs: &[bool]) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(ga) = ensure(grads, needs, *a, g.len()) {
                for (o, v) in ga.iter_mut().zip(g) {
                    *o += v;
                }
            }
            if let Some(gb) = ensure(grads, needs, *b, g.len()) {
                for (o, v) in gb.iter_mut().zip(g) {
                    *o += v;
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = ensure(grads, needs, *a, g.len()) {
                for (o, v) in ga.iter_mut().zip(g) {
                    *o += v;
                }
            }
            if let Some(gb) = ensure(grads, needs, *b, g.len()) {
                for (o, v) in gb.iter_mut().zip(g) {
                    *o -= v;
                }
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = ensure(grads, needs, *a, g.len()) {
                for i in 0..g.len() {
                    ga[i] += g[i] * values[*b].data[i];
                }
            }
            if let Some(gb) = ensure(grads, needs, *b, g.len()) {
                for i in 0..g.len() {
                    gb[i] += g[i] * values[*a].data[i];
                }
            }
        }
        Op::Affine { x, scale } => {
            if let Some(gx) = ensure(grads, needs, *x, g.len()) {
                for (o, v) in gx.iter_mut().zip(g) {
                    *o += scale * v;
                }
            }
        }
        Op::Exp(x) => {
            if let Some(gx) = ensure(grads, needs, *x, g.len()) {
                for i in 0..g.len() {
                    gx[i] += g[i] * ((values[*x].data[i] as f64).exp() as f32);
                }
            }
        }
        Op::Ln(x) => {
            if let Some(gx) = ensure(grads, needs, *x, g.len()) {
                for i in 0..g.len() {
                    gx[i] += g[i] / values[*x].data[i];
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(gx) = ensure(grads, needs, *x, g.len()) {
                for i in 0..g.len() {
                    let y = (values[*x].data[i] as f64).tanh();
                    gx[i] += g[i] * ((1.0 - y * y) as f32);
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(gx) = ensure(grads, needs, *x, g.len()) {
                for i in 0..g.len() {
                    let y = 1.0 / (1.0 + (-(values[*x].data[i] as f64)).exp());
                    gx[i] += g[i] * ((y * (1.0 - y)) as f32);
                }
            }
        }
        Op::Swish(x) => {
            if let Some(gx) = ensure(grads, needs, *x, g.len()) {
                for i in 0..g.len() {
                    let xv = values[*x].data[i] as f64;
                    let s = 1.0 / (1.0 + (-xv).exp());
                    gx[i] += g[i] * ((s + xv * s * (1.0 - s)) as f32);
                }
            }
        }
        Op::ClampMin { x, min } => {
            if let Some(gx) = ensure(grads, needs, *x, g.len()) {
                for i in 0..g.len() {
                    if values[*x].data[i] > *min {
                        gx[i] += g[i];
                    }
                }
            }
        }
        Op::Matmul { a, b, ta, tb, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            match (ta, tb) {
                (false, false) => {
                    if let Some(ga) = ensure(grads, needs, *a, m * k) {
                        mm_acc(g, &values[*b].data, m, n, k, false, true, ga);
                    }
                    if let Some(gb) = ensure(grads, needs, *b, k * n) {
                        mm_acc(&values[*a].data, g, k, m, n, true, false, gb);
                    }
                }
                (false, true) => {
                    // out = a @ b^T; a: m×k, b: n×k
                    if let Some(ga) = ensure(grads, needs, *a, m * k) {
                        mm_acc(g, &values[*b].data, m, n, k, false, false, ga);
                    }
                    if let Some(gb) = ensure(grads, needs, *b, n * k) {
                        mm_acc(g, &values[*a].data, n, m, k, true, false, gb);
                    }
                }
                (true, false) => {
                    // out = a^T @ b; a: k×m, b: k×n
                    if let Some(ga) = ensure(grads, needs, *a, k * m) {
                        mm_acc(&values[*b].data, g, k, n, m, false, true, ga);
                    }
                    if let Some(gb) = ensure(grads, needs, *b, k * n) {
                        mm_acc(&values[*a].data, g, k, m, n, false, false, gb);
                    }
                }
                (true, true) => unreachable!(),
            }
        }
        Op::BiasAdd { x, b } => {
            let n = values[*b].numel();
            let m = g.len() / n;
            if let Some(gx) = ensure(grads, needs, *x, g.len()) {
                for (o, v) in gx.iter_mut().zip(g) {
                    *o += v;
                }
            }
            if let Some(gb) = ensure(grads, needs, *b, n) {
                for c in 0..n {
                    let mut acc = 0.0f64;
                    for r in 0..m {
                        acc += g[r * n + c] as f64;
                    }
                    gb[c] += acc as f32;
                }
            }
        }
        Op::CrossAdd { a, b, m, n, k } => {
            let (m, n, k) = (*m, *n, *k);
            if let Some(ga) = ensure(grads, needs, *a, m * k) {
                for i in 0..m {
                    for c in 0..k {
                        let mut acc = 0.0f64;
                        for j in 0..n {
                            acc += g[(i * n + j) * k + c] as f64;
                        }
                        ga[i * k + c] += acc as f32;
                    }
                }
            }
            if let Some(gb) = ensure(grads, needs, *b, n * k) {
                for j in 0..n {
                    for c in 0..k {
                        let mut acc = 0.0f64;
                        for i in 0..m {
                            acc += g[(i * n + j) * k + c] as f64;
                        }
                        gb[j * k + c] += acc as f32;
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, cache } => {
            let n = values[*gamma].numel();
            let m = g.len() / n;
            let gm = &values[*gamma].data;
            for r in 0..m {
                let (mean, rstd) = (cache[r].0 as f64, cache[r].1 as f64);
                let xrow = &values[*x].data[r * n..(r + 1) * n];
                let grow = &g[r * n..(r + 1) * n];
                // gradient w.r.t. gamma / beta
                if needs[*gamma] || needs[*beta] {
                    for c in 0..n {
                        let xhat = (xrow[c] as f64 - mean) * rstd;
                        if let Some(gg) = ensure(grads, needs, *gamma, n) {
                            gg[c] += (grow[c] as f64 * xhat) as f32;
                        }
                        if let Some(gb) = ensure(grads, needs, *beta, n) {
                            gb[c] += grow[c];
                        }
                    }
                }
                if needs[*x] {
                    let mut sum_gg = 0.0f64;
                    let mut sum_gx = 0.0f64;
                    for c in 0..n {
                        let gq = grow[c] as f64 * gm[c] as f64;
                        let xhat = (xrow[c] as f64 - mean) * rstd;
                        sum_gg += gq;
                        sum_gx += gq * xhat;
                    }
                    let inv_n = 1.0 / n as f64;
                    if let Some(gx) = ensure(grads, needs, *x, m * n) {
                        for c in 0..n {
                            let gq = grow[c] as f64 * gm[c] as f64;
                            let xhat = (xrow[c] as f64 - mean) * rstd;
                            gx[r * n + c] +=
                                (rstd * (gq - inv_n * sum_gg - xhat * inv_n * sum_gx)) as f32;
                        }
                    }
                }
            }
        }
        Op::MaskedSoftmaxRows { x, mask } => {
            if !needs[*x] {
                return;
            }
            // y = softmax(x) on allowed entries; dx = y * (g - sum(g*y))
            let total = g.len();
            let n = values[*x].cols();
            let m = total / n;
            // self value needed: recompute from parent is wasteful; softmax
            // output is the node's own value, which the caller stored right
            // after this op's id. We cannot address it here, so recompute
            // y from x (cheap, and bitwise-identical to the forward pass).
            let xv = &values[*x].data;
            if let Some(gx) = ensure(grads, needs, *x, total) {
                for r in 0..m {
                    let row = &xv[r * n..(r + 1) * n];
                    let mrow = &mask[r * n..(r + 1) * n];
                    let mut maxv = f64::NEG_INFINITY;
                    for c in 0..n {
                        if mrow[c] {
                            maxv = maxv.max(row[c] as f64);
                        }
                    }
                    if maxv == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut denom = 0.0f64;
                    for c in 0..n {
                        if mrow[c] {
                            denom += ((row[c] as f64) - maxv).exp();
                        }
                    }
                    let mut dot = 0.0f64;
                    for c in 0..n {
                        if mrow[c] {
                            let y = ((row[c] as f64) - maxv).exp() / denom;
                            dot += g[r * n + c] as f64 * y;
                        }
                    }
                    for c in 0..n {
                        if mrow[c] {
                            let y = ((row[c] as f64) - maxv).exp() / denom;
                            gx[r * n + c] += (y * (g[r * n + c] as f64 - dot)) as f32;
                        }
                    }
                }
            }
        }
        Op::LogSoftmaxRows { x } => {
            if !needs[*x] {
                return;
            }
            let n = values[*x].cols();
            let m = g.len() / n;
            let xv = &values[*x].data;
            if let Some(gx) = ensure(grads, needs, *x, g.len()) {
                for r in 0..m {
                    let row = &xv[r * n..(r + 1) * n];
                    let maxv = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(*v as f64));
                    let denom: f64 = row.iter().map(|v| ((*v as f64) - maxv).exp()).sum();
                    let gsum: f64 = g[r * n..(r + 1) * n].iter().map(|v| *v as f64).sum();
                    for c in 0..n {
                        let p = ((row[c] as f64) - maxv).exp() / denom;
                        gx[r * n + c] += (g[r * n + c] as f64 - p * gsum) as f32;
                    }
                }
            }
        }
        Op::Gather { x, idx } => {
            if let Some(gx) = ensure(grads, needs, *x, values[*x].numel()) {
                for (i, &src) in idx.iter().enumerate() {
                    gx[src] += g[i];
                }
            }
        }
        Op::GatherRows { x, rows } => {
            let n = values[*x].cols();
            if let Some(gx) = ensure(grads, needs, *x, values[*x].numel()) {
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..n {
                        gx[r * n + c] += g[i * n + c];
                    }
                }
            }
        }
        Op::SliceCols { x, from, to } => {
            let n = values[*x].cols();
            let w = to - from;
            let m = g.len() / w;
            if let Some(gx) = ensure(grads, needs, *x, values[*x].numel()) {
                for r in 0..m {
                    for c in 0..w {
                        gx[r * n + from + c] += g[r * w + c];
                    }
                }
            }
        }
        Op::ConcatCols { xs } => {
            let widths: Vec<usize> = xs.iter().map(|&x| values[x].cols()).collect();
            let total: usize = widths.iter().sum();
            let m = g.len() / total;
            let mut off = 0;
            for (xi, &x) in xs.iter().enumerate() {
                let w = widths[xi];
                if let Some(gx) = ensure(grads, needs, x, values[x].numel()) {
                    for r in 0..m {
                        for c in 0..w {
                            gx[r * w + c] += g[r * total + off + c];
                        }
                    }
                }
                off += w;
            }
        }
        Op::ConcatRows { xs } => {
            let mut off = 0;
            for &x in xs {
                let len = values[x].numel();
                if let Some(gx) = ensure(grads, needs, x, len) {
                    for i in 0..len {
                        gx[i] += g[off + i];
                    }
                }
                off += len;
            }
        }
        Op::DepthwiseConv { x, w, bias, pad_left } => {
            let d = values[*x].cols();
            let t_len = values[*x].rows();
            let k_len = values[*w].rows();
            let xv = &values[*x].data;
            let wv = &values[*w].data;
            if needs[*x] {
                if let Some(gx) = ensure(grads, needs, *x, t_len * d) {
                    for t in 0..t_len {
                        for k in 0..k_len {
                            let src = t as isize + k as isize - *pad_left as isize;
                            if src >= 0 && (src as usize) < t_len {
                                let s = src as usize;
                                for c in 0..d {
                                    gx[s * d + c] += g[t * d + c] * wv[k * d + c];
                                }
                            }
                        }
                    }
                }
            }
            if needs[*w] {
                if let Some(gw) = ensure(grads, needs, *w, k_len * d) {
                    for k in 0..k_len {
                        for c in 0..d {
                            let mut acc = 0.0f64;
                            for t in 0..t_len {
                                let src = t as isize + k as isize - *pad_left as isize;
                                if src >= 0 && (src as usize) < t_len {
                                    acc += g[t * d + c] as f64 * xv[src as usize * d + c] as f64;
                                }
                            }
                            gw[k * d + c] += acc as f32;
                        }
                    }
                }
            }
            if needs[*bias] {
                if let Some(gb) = ensure(grads, needs, *bias, d) {
                    for c in 0..d {
                        let mut acc = 0.0f64;
                        for t in 0..t_len {
                            acc += g[t * d + c] as f64;
                        }
                        gb[c] += acc as f32;
                    }
                }
            }
        }
        Op::SumAll(x) => {
            if let Some(gx) = ensure(grads, needs, *x, values[*x].numel()) {
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }
        }
        Op::MeanAll(x) => {
            let n = values[*x].numel();
            if let Some(gx) = ensure(grads, needs, *x, n) {
                let s = g[0] / n as f32;
                for o in gx.iter_mut() {
                    *o += s;
                }
            }
        }
        Op::LogSumExp2 { a, b } => {
            // y = lse(a, b); dy/da = exp(a - y)
            for i in 0..g.len() {
                let av = values[*a].data[i] as f64;
                let bv = values[*b].data[i] as f64;
                let y = lse2(av, bv);
                if y == f64::NEG_INFINITY {
                    continue;
                }
                if needs[*a] && av != f64::NEG_INFINITY {
                    if let Some(ga) = ensure(grads, needs, *a, g.len()) {
                        ga[i] += g[i] * ((av - y).exp() as f32);
                    }
                }
                if needs[*b] && bv != f64::NEG_INFINITY {
                    if let Some(gb) = ensure(grads, needs, *b, g.len()) {
                        gb[i] += g[i] * ((bv - y).exp() as f32);
                    }
                }
            }
        }
        Op::LogSumExpAll(x) => {
            if !needs[*x] {
                return;
            }
            let y = logsumexp_slice(&values[*x].data);
            if y == f64::NEG_INFINITY {
                return;
            }
            if let Some(gx) = ensure(grads, needs, *x, values[*x].numel()) {
                for (i, v) in values[*x].data.iter().enumerate() {
                    if *v as f64 != f64::NEG_INFINITY {
                        gx[i] += g[0] * (((*v as f64) - y).exp() as f32);
                    }
                }
            }
        }
    }
}

// ---- public numeric operations -------------------------------------------

/// log Σ exp(vᵢ) of a non-empty log-domain vector node, as a scalar node.
pub fn logsumexp(tape: &mut Tape, values: ValueId) -> Result<ValueId> {
    if tape.value(values).numel() == 0 {
        return Err(Error::usage("logsumexp of empty input"));
    }
    Ok(tape.logsumexp_all(values))
}

/// softmax(logits / temperature) over a 1-row or 1-D logits node.
pub fn softmax_with_temperature(tape: &mut Tape, logits: ValueId, temperature: f32) -> Result<ValueId> {
    if !(temperature > 0.0) {
        return Err(Error::usage(format!("temperature must be > 0, got {temperature}")));
    }
    if tape.value(logits).data.iter().any(|v| !v.is_finite()) {
        return Err(Error::usage("softmax_with_temperature: non-finite logit"));
    }
    let scaled = tape.affine(logits, 1.0 / temperature, 0.0);
    Ok(tape.softmax_rows(scaled))
}

/// Plain-slice softmax with temperature (no tape), f64 internals.
pub fn softmax_t_slice(logits: &[f32], temperature: f64) -> Vec<f32> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, v| a.max(*v as f64 / temperature));
    let exps: Vec<f64> = logits.iter().map(|v| ((*v as f64) / temperature - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / s) as f32).collect()
}

/// Plain-slice log-softmax (no tape), f64 internals.
pub fn log_softmax_slice(logits: &[f32]) -> Vec<f32> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, v| a.max(*v as f64));
    let denom: f64 = logits.iter().map(|v| ((*v as f64) - m).exp()).sum();
    let lse = m + denom.ln();
    logits.iter().map(|v| ((*v as f64) - lse) as f32).collect()
}
