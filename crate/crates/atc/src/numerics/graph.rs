//! Operation tape and reverse-mode gradients.
//!
//! A [`Graph`] lives for one optimization step: leaves are wired in (batch
//! constants and parameters), forward ops append nodes, `backward` walks the
//! tape in reverse and accumulates vector-Jacobian products into the gradient
//! buffers of every node that requires them. Dropping the graph is the reset.

use super::conv::{self, sgemm_rows, ConvSpec};
use super::par::IMAGE_CHUNK;
use super::Tensor;
use crate::error::{AtcError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, b: NodeId, spec: ConvSpec, cols: Vec<f32>, oh: usize, ow: usize, relu: bool },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    MatMul { a: NodeId, b: NodeId },
    MatMulNT { a: NodeId, b: NodeId },
    Relu { x: NodeId },
    Exp { x: NodeId },
    Square { x: NodeId },
    Scale { x: NodeId, c: f32 },
    Clamp { x: NodeId, lo: f32, hi: f32 },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Min { a: NodeId, b: NodeId },
    Reshape { x: NodeId },
    Concat2 { a: NodeId, b: NodeId },
    RowGather { x: NodeId, idx: Vec<usize> },
    LogSoftmax { x: NodeId },
    Softmax { x: NodeId },
    CrossEntropyRows { logits: NodeId, targets: Vec<usize>, probs: Vec<f32> },
    SumRows { x: NodeId },
    MeanAll { x: NodeId },
    GaussianKl { mu: NodeId, logvar: NodeId },
    CosineDist { a: NodeId, b: NodeId },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn rows_cols(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [n, k] => Ok((*n, *k)),
        _ => Err(AtcError::config(format!("expected a 2-d tensor, got {shape:?}"))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, op: Op) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, requires_grad, grad: None, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Wire a tensor in as a leaf; gradient participation follows
    /// `t.requires_grad`.
    pub fn input(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad, Op::Leaf)
    }

    /// Wire a leaf that never receives gradients (batches, targets,
    /// momentum-path parameters).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> NodeId {
        self.push(shape, data, false, Op::Leaf)
    }

    /// Move a tensor in as a gradient-free leaf without copying its data.
    pub fn constant_from(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), false, Op::Leaf)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[f32] {
        &self.nodes[id.0].data
    }

    pub fn scalar_value(&self, id: NodeId) -> f32 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    /// Gradient buffer of `id`, if backward reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn same_shape(&self, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(AtcError::config(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// `x [n, c, h, w]`, weights `[oc, c, k, k]`, bias `[oc]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, spec: &ConvSpec) -> Result<NodeId> {
        self.conv2d_inner(x, w, b, spec, false)
    }

    /// Convolution with the ReLU fused into the output pass (one node).
    pub fn conv2d_relu(&mut self, x: NodeId, w: NodeId, b: NodeId, spec: &ConvSpec) -> Result<NodeId> {
        self.conv2d_inner(x, w, b, spec, true)
    }

    fn conv2d_inner(&mut self, x: NodeId, w: NodeId, b: NodeId, spec: &ConvSpec, relu: bool) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let [n, c, h, wd] = xs[..] else {
            return Err(AtcError::config(format!("conv2d input must be 4-d, got {xs:?}")));
        };
        if c != spec.in_channels {
            return Err(AtcError::config(format!(
                "conv2d input has {} channels, spec expects {}",
                c, spec.in_channels
            )));
        }
        let k = spec.kernel_size;
        if self.shape(w) != [spec.out_channels, c, k, k] {
            return Err(AtcError::config(format!(
                "conv2d weight shape {:?} does not match spec {:?}",
                self.shape(w),
                spec
            )));
        }
        if self.shape(b) != [spec.out_channels] {
            return Err(AtcError::config("conv2d bias shape mismatch".to_string()));
        }
        let fwd = conv::conv2d_forward(&self.nodes[x.0].data, n, c, h, wd, &self.nodes[w.0].data, &self.nodes[b.0].data, spec, relu)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let cols = if rg { fwd.cols } else { Vec::new() };
        Ok(self.push(
            vec![n, spec.out_channels, fwd.oh, fwd.ow],
            fwd.y,
            rg,
            Op::Conv2d { x, w, b, spec: *spec, cols, oh: fwd.oh, ow: fwd.ow, relu },
        ))
    }

    /// Affine map: `x [n, in] @ w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, xin) = rows_cols(self.shape(x))?;
        let (out, win) = rows_cols(self.shape(w))?;
        if xin != win || self.shape(b) != [out] {
            return Err(AtcError::config(format!(
                "linear shapes inconsistent: x {:?}, w {:?}, b {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let mut y = vec![0.0f32; n * out];
        sgemm_rows(
            n,
            xin,
            out,
            &self.nodes[x.0].data,
            xin as isize,
            1,
            &self.nodes[w.0].data,
            1,
            win as isize,
            &mut y,
            gemm_row_chunk(n),
        );
        let bias = &self.nodes[b.0].data;
        for row in y.chunks_exact_mut(out) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v += *bv;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(vec![n, out], y, rg, Op::Linear { x, w, b }))
    }

    /// `a [m, k] @ b [k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = rows_cols(self.shape(a))?;
        let (kb, n) = rows_cols(self.shape(b))?;
        if ka != kb {
            return Err(AtcError::config(format!("matmul inner dims {ka} vs {kb}")));
        }
        let mut y = vec![0.0f32; m * n];
        sgemm_rows(
            m,
            ka,
            n,
            &self.nodes[a.0].data,
            ka as isize,
            1,
            &self.nodes[b.0].data,
            n as isize,
            1,
            &mut y,
            gemm_row_chunk(m),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], y, rg, Op::MatMul { a, b }))
    }

    /// `a [m, k] @ b[n, k]^T` — rows of `b` indexed by the output column.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = rows_cols(self.shape(a))?;
        let (n, kb) = rows_cols(self.shape(b))?;
        if ka != kb {
            return Err(AtcError::config(format!("matmul_nt inner dims {ka} vs {kb}")));
        }
        let mut y = vec![0.0f32; m * n];
        sgemm_rows(
            m,
            ka,
            n,
            &self.nodes[a.0].data,
            ka as isize,
            1,
            &self.nodes[b.0].data,
            1,
            kb as isize,
            &mut y,
            gemm_row_chunk(m),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], y, rg, Op::MatMulNT { a, b }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|v| v.max(0.0)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), data, rg, Op::Relu { x })
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|v| v.exp()).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), data, rg, Op::Exp { x })
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|v| v * v).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), data, rg, Op::Square { x })
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), data, rg, Op::Scale { x, c })
    }

    pub fn clamp(&mut self, x: NodeId, lo: f32, hi: f32) -> NodeId {
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|v| v.clamp(lo, hi)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), data, rg, Op::Clamp { x, lo, hi })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let data: Vec<f32> =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let data: Vec<f32> =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x - y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let data: Vec<f32> =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Mul { a, b }))
    }

    /// Elementwise minimum; gradient routes to `a` on ties.
    pub fn min(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let data: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| if x <= y { *x } else { *y })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Min { a, b }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(AtcError::config(format!(
                "cannot reshape {} elements to {:?}",
                self.nodes[x.0].data.len(),
                shape
            )));
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.rg(x);
        Ok(self.push(shape, data, rg, Op::Reshape { x }))
    }

    /// Concatenate along the feature dimension: `[n, a] ++ [n, b] -> [n, a+b]`.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, ca) = rows_cols(self.shape(a))?;
        let (nb, cb) = rows_cols(self.shape(b))?;
        if na != nb {
            return Err(AtcError::config(format!("concat rows {na} vs {nb}")));
        }
        let mut data = Vec::with_capacity(na * (ca + cb));
        for i in 0..na {
            data.extend_from_slice(&self.nodes[a.0].data[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&self.nodes[b.0].data[i * cb..(i + 1) * cb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![na, ca + cb], data, rg, Op::Concat2 { a, b }))
    }

    /// `out[i] = x[i, idx[i]]`.
    pub fn row_gather(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let (n, k) = rows_cols(self.shape(x))?;
        if idx.len() != n || idx.iter().any(|i| *i >= k) {
            return Err(AtcError::config("row_gather index out of range".to_string()));
        }
        let data: Vec<f32> = idx.iter().enumerate().map(|(i, j)| self.nodes[x.0].data[i * k + j]).collect();
        let rg = self.rg(x);
        Ok(self.push(vec![n], data, rg, Op::RowGather { x, idx }))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, k) = rows_cols(self.shape(x))?;
        if k == 0 {
            return Err(AtcError::config("log_softmax on empty rows".to_string()));
        }
        let mut data = vec![0.0f32; n * k];
        for i in 0..n {
            let row = &self.nodes[x.0].data[i * k..(i + 1) * k];
            let lse = log_sum_exp(row);
            for (o, v) in data[i * k..(i + 1) * k].iter_mut().zip(row) {
                *o = (*v as f64 - lse) as f32;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n, k], data, rg, Op::LogSoftmax { x }))
    }

    /// Row-wise softmax; rows sum to 1 within accumulation error.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, k) = rows_cols(self.shape(x))?;
        if k == 0 {
            return Err(AtcError::config("softmax on empty rows".to_string()));
        }
        let mut data = vec![0.0f32; n * k];
        for i in 0..n {
            let row = &self.nodes[x.0].data[i * k..(i + 1) * k];
            let lse = log_sum_exp(row);
            for (o, v) in data[i * k..(i + 1) * k].iter_mut().zip(row) {
                *o = (*v as f64 - lse).exp() as f32;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n, k], data, rg, Op::Softmax { x }))
    }

    /// Per-row softmax cross-entropy against integer targets; returns `[n]`.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: Vec<usize>) -> Result<NodeId> {
        let (n, k) = rows_cols(self.shape(logits))?;
        if k == 0 {
            return Err(AtcError::config("cross entropy on empty logit rows".to_string()));
        }
        if targets.len() != n || targets.iter().any(|t| *t >= k) {
            return Err(AtcError::config("cross entropy target out of range".to_string()));
        }
        let mut losses = vec![0.0f32; n];
        let mut probs = vec![0.0f32; n * k];
        for i in 0..n {
            let row = &self.nodes[logits.0].data[i * k..(i + 1) * k];
            let lse = log_sum_exp(row);
            losses[i] = (lse - row[targets[i]] as f64) as f32;
            for (o, v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *o = (*v as f64 - lse).exp() as f32;
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(vec![n], losses, rg, Op::CrossEntropyRows { logits, targets, probs }))
    }

    /// Row sums of a 2-d tensor, f64 accumulation.
    pub fn sum_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, k) = rows_cols(self.shape(x))?;
        let data: Vec<f32> = (0..n)
            .map(|i| self.nodes[x.0].data[i * k..(i + 1) * k].iter().map(|v| *v as f64).sum::<f64>() as f32)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(vec![n], data, rg, Op::SumRows { x }))
    }

    /// Mean of all elements, f64 accumulation; returns a scalar node.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let numel = self.nodes[x.0].data.len().max(1);
        let mean = self.nodes[x.0].data.iter().map(|v| *v as f64).sum::<f64>() / numel as f64;
        let rg = self.rg(x);
        self.push(vec![1], vec![mean as f32], rg, Op::MeanAll { x })
    }

    /// Per-row KL(N(mu, exp(logvar)) || N(0, I)), returns `[n]`.
    pub fn gaussian_kl(&mut self, mu: NodeId, logvar: NodeId) -> Result<NodeId> {
        self.same_shape(mu, logvar)?;
        let (n, d) = rows_cols(self.shape(mu))?;
        let data: Vec<f32> = (0..n)
            .map(|i| {
                let mut acc = 0.0f64;
                for j in 0..d {
                    let m = self.nodes[mu.0].data[i * d + j] as f64;
                    let lv = self.nodes[logvar.0].data[i * d + j] as f64;
                    acc += 0.5 * (m * m + lv.exp() - 1.0 - lv);
                }
                acc as f32
            })
            .collect();
        let rg = self.rg(mu) || self.rg(logvar);
        Ok(self.push(vec![n], data, rg, Op::GaussianKl { mu, logvar }))
    }

    /// Per-row `2 - 2 cos(a_i, b_i)` with epsilon-stabilized norms; `[n]`.
    pub fn cosine_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let (n, d) = rows_cols(self.shape(a))?;
        let data: Vec<f32> = (0..n)
            .map(|i| {
                let ra = &self.nodes[a.0].data[i * d..(i + 1) * d];
                let rb = &self.nodes[b.0].data[i * d..(i + 1) * d];
                let (dot, na, nb) = dot_norms(ra, rb);
                (2.0 - 2.0 * dot / (na * nb)) as f32
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![n], data, rg, Op::CosineDist { a, b }))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Gradients become readable through
    /// [`Graph::grad`] on every `requires_grad` node the loss depends on.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(AtcError::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].data[0].is_finite() {
            return Err(AtcError::NonFinite("loss is not finite".to_string()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            self.step_back(id);
        }
        Ok(())
    }

    /// Accumulate an owned contribution: moves it in when this is the first
    /// one (the common single-consumer case), adds elementwise otherwise.
    fn accumulate(&mut self, id: NodeId, contrib: Vec<f32>) {
        debug_assert_eq!(contrib.len(), self.nodes[id.0].data.len());
        match &mut self.nodes[id.0].grad {
            slot @ None => *slot = Some(contrib),
            Some(g) => {
                for (a, c) in g.iter_mut().zip(&contrib) {
                    *a += c;
                }
            }
        }
    }

    /// Take (move out) both the upstream gradient and op of `id` to appease
    /// the borrow checker, dispatch, then restore the op.
    fn step_back(&mut self, id: usize) {
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        let dy = self.nodes[id].grad.take().expect("grad present");
        self.dispatch_back(id, &op, &dy);
        self.nodes[id].grad = Some(dy);
        self.nodes[id].op = op;
    }

    fn dispatch_back(&mut self, id: usize, op: &Op, dy: &[f32]) {
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, spec, cols, oh, ow, relu } => {
                let xs = self.shape(*x);
                let dims = (xs[0], xs[1], xs[2], xs[3]);
                let need_dx = self.rg(*x);
                let grads = conv::conv2d_backward(
                    dy,
                    dims,
                    cols,
                    &self.nodes[w.0].data,
                    spec,
                    *oh,
                    *ow,
                    &self.nodes[id].data,
                    *relu,
                    need_dx,
                );
                if need_dx {
                    self.accumulate(*x, grads.dx);
                }
                if self.rg(*w) {
                    self.accumulate(*w, grads.dw);
                }
                if self.rg(*b) {
                    self.accumulate(*b, grads.db);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, xin) = rows_cols(self.shape(*x)).expect("validated");
                let (out, _) = rows_cols(self.shape(*w)).expect("validated");
                if self.rg(*x) {
                    // dx[n, in] = dy[n, out] @ w[out, in]
                    let mut dx = vec![0.0f32; n * xin];
                    sgemm_rows(n, out, xin, dy, out as isize, 1, &self.nodes[w.0].data, xin as isize, 1, &mut dx, gemm_row_chunk(n));
                    self.accumulate(*x, dx);
                }
                if self.rg(*w) {
                    // dw[out, in] = dy^T[out, n] @ x[n, in]
                    let mut dw = vec![0.0f32; out * xin];
                    sgemm_rows(out, n, xin, dy, 1, out as isize, &self.nodes[x.0].data, xin as isize, 1, &mut dw, out.max(1));
                    self.accumulate(*w, dw);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0f64; out];
                    for row in dy.chunks_exact(out) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += *v as f64;
                        }
                    }
                    let db32: Vec<f32> = db.iter().map(|v| *v as f32).collect();
                    self.accumulate(*b, db32);
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = rows_cols(self.shape(*a)).expect("validated");
                let (_, n) = rows_cols(self.shape(*b)).expect("validated");
                if self.rg(*a) {
                    // da[m, k] = dy[m, n] @ b^T[n, k]
                    let mut da = vec![0.0f32; m * k];
                    sgemm_rows(m, n, k, dy, n as isize, 1, &self.nodes[b.0].data, 1, n as isize, &mut da, gemm_row_chunk(m));
                    self.accumulate(*a, da);
                }
                if self.rg(*b) {
                    // db[k, n] = a^T[k, m] @ dy[m, n]
                    let mut db = vec![0.0f32; k * n];
                    sgemm_rows(k, m, n, &self.nodes[a.0].data, 1, k as isize, dy, n as isize, 1, &mut db, k.max(1));
                    self.accumulate(*b, db);
                }
            }
            Op::MatMulNT { a, b } => {
                let (m, k) = rows_cols(self.shape(*a)).expect("validated");
                let (n, _) = rows_cols(self.shape(*b)).expect("validated");
                if self.rg(*a) {
                    // da[m, k] = dy[m, n] @ b[n, k]
                    let mut da = vec![0.0f32; m * k];
                    sgemm_rows(m, n, k, dy, n as isize, 1, &self.nodes[b.0].data, k as isize, 1, &mut da, gemm_row_chunk(m));
                    self.accumulate(*a, da);
                }
                if self.rg(*b) {
                    // db[n, k] = dy^T[n, m] @ a[m, k]
                    let mut db = vec![0.0f32; n * k];
                    sgemm_rows(n, m, k, dy, 1, n as isize, &self.nodes[a.0].data, k as isize, 1, &mut db, gemm_row_chunk(n));
                    self.accumulate(*b, db);
                }
            }
            Op::Relu { x } => {
                if self.rg(*x) {
                    let contrib: Vec<f32> = self.nodes[id]
                        .data
                        .iter()
                        .zip(dy)
                        .map(|(y, g)| if *y > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(*x, contrib);
                }
            }
            Op::Exp { x } => {
                if self.rg(*x) {
                    let contrib: Vec<f32> = self.nodes[id].data.iter().zip(dy).map(|(y, g)| y * g).collect();
                    self.accumulate(*x, contrib);
                }
            }
            Op::Square { x } => {
                if self.rg(*x) {
                    let contrib: Vec<f32> =
                        self.nodes[x.0].data.iter().zip(dy).map(|(v, g)| 2.0 * v * g).collect();
                    self.accumulate(*x, contrib);
                }
            }
            Op::Scale { x, c } => {
                if self.rg(*x) {
                    let contrib: Vec<f32> = dy.iter().map(|g| g * c).collect();
                    self.accumulate(*x, contrib);
                }
            }
            Op::Clamp { x, lo, hi } => {
                if self.rg(*x) {
                    let contrib: Vec<f32> = self.nodes[x.0]
                        .data
                        .iter()
                        .zip(dy)
                        .map(|(v, g)| if *v >= *lo && *v <= *hi { *g } else { 0.0 })
                        .collect();
                    self.accumulate(*x, contrib);
                }
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    self.accumulate(*a, dy.to_vec());
                }
                if self.rg(*b) {
                    self.accumulate(*b, dy.to_vec());
                }
            }
            Op::Sub { a, b } => {
                if self.rg(*a) {
                    self.accumulate(*a, dy.to_vec());
                }
                if self.rg(*b) {
                    let neg: Vec<f32> = dy.iter().map(|g| -g).collect();
                    self.accumulate(*b, neg);
                }
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    let contrib: Vec<f32> = self.nodes[b.0].data.iter().zip(dy).map(|(v, g)| v * g).collect();
                    self.accumulate(*a, contrib);
                }
                if self.rg(*b) {
                    let contrib: Vec<f32> = self.nodes[a.0].data.iter().zip(dy).map(|(v, g)| v * g).collect();
                    self.accumulate(*b, contrib);
                }
            }
            Op::Min { a, b } => {
                let take_a: Vec<bool> = self.nodes[a.0]
                    .data
                    .iter()
                    .zip(&self.nodes[b.0].data)
                    .map(|(x, y)| x <= y)
                    .collect();
                if self.rg(*a) {
                    let contrib: Vec<f32> =
                        dy.iter().zip(&take_a).map(|(g, t)| if *t { *g } else { 0.0 }).collect();
                    self.accumulate(*a, contrib);
                }
                if self.rg(*b) {
                    let contrib: Vec<f32> =
                        dy.iter().zip(&take_a).map(|(g, t)| if *t { 0.0 } else { *g }).collect();
                    self.accumulate(*b, contrib);
                }
            }
            Op::Reshape { x } => {
                if self.rg(*x) {
                    self.accumulate(*x, dy.to_vec());
                }
            }
            Op::Concat2 { a, b } => {
                let (n, ca) = rows_cols(self.shape(*a)).expect("validated");
                let (_, cb) = rows_cols(self.shape(*b)).expect("validated");
                if self.rg(*a) {
                    let mut da = vec![0.0f32; n * ca];
                    for i in 0..n {
                        da[i * ca..(i + 1) * ca].copy_from_slice(&dy[i * (ca + cb)..i * (ca + cb) + ca]);
                    }
                    self.accumulate(*a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0f32; n * cb];
                    for i in 0..n {
                        db[i * cb..(i + 1) * cb]
                            .copy_from_slice(&dy[i * (ca + cb) + ca..(i + 1) * (ca + cb)]);
                    }
                    self.accumulate(*b, db);
                }
            }
            Op::RowGather { x, idx } => {
                if self.rg(*x) {
                    let (n, k) = rows_cols(self.shape(*x)).expect("validated");
                    let mut dx = vec![0.0f32; n * k];
                    for (i, j) in idx.iter().enumerate() {
                        dx[i * k + j] += dy[i];
                    }
                    self.accumulate(*x, dx);
                }
            }
            Op::LogSoftmax { x } => {
                if self.rg(*x) {
                    let (n, k) = rows_cols(self.shape(*x)).expect("validated");
                    let mut dx = vec![0.0f32; n * k];
                    for i in 0..n {
                        let lp = &self.nodes[id].data[i * k..(i + 1) * k];
                        let gsum: f64 = dy[i * k..(i + 1) * k].iter().map(|v| *v as f64).sum();
                        for j in 0..k {
                            dx[i * k + j] =
                                (dy[i * k + j] as f64 - (lp[j] as f64).exp() * gsum) as f32;
                        }
                    }
                    self.accumulate(*x, dx);
                }
            }
            Op::Softmax { x } => {
                if self.rg(*x) {
                    let (n, k) = rows_cols(self.shape(*x)).expect("validated");
                    let mut dx = vec![0.0f32; n * k];
                    for i in 0..n {
                        let p = &self.nodes[id].data[i * k..(i + 1) * k];
                        let inner: f64 = p
                            .iter()
                            .zip(&dy[i * k..(i + 1) * k])
                            .map(|(pv, gv)| *pv as f64 * *gv as f64)
                            .sum();
                        for j in 0..k {
                            dx[i * k + j] = (p[j] as f64 * (dy[i * k + j] as f64 - inner)) as f32;
                        }
                    }
                    self.accumulate(*x, dx);
                }
            }
            Op::CrossEntropyRows { logits, targets, probs } => {
                if self.rg(*logits) {
                    let (n, k) = rows_cols(self.shape(*logits)).expect("validated");
                    let mut dx = vec![0.0f32; n * k];
                    for i in 0..n {
                        let g = dy[i];
                        for j in 0..k {
                            let ind = if j == targets[i] { 1.0 } else { 0.0 };
                            dx[i * k + j] = (probs[i * k + j] - ind) * g;
                        }
                    }
                    self.accumulate(*logits, dx);
                }
            }
            Op::SumRows { x } => {
                if self.rg(*x) {
                    let (n, k) = rows_cols(self.shape(*x)).expect("validated");
                    let mut dx = vec![0.0f32; n * k];
                    for i in 0..n {
                        dx[i * k..(i + 1) * k].fill(dy[i]);
                    }
                    self.accumulate(*x, dx);
                }
            }
            Op::MeanAll { x } => {
                if self.rg(*x) {
                    let numel = self.nodes[x.0].data.len().max(1);
                    let g = dy[0] / numel as f32;
                    let dx = vec![g; self.nodes[x.0].data.len()];
                    self.accumulate(*x, dx);
                }
            }
            Op::GaussianKl { mu, logvar } => {
                let (n, d) = rows_cols(self.shape(*mu)).expect("validated");
                if self.rg(*mu) {
                    let mut dm = vec![0.0f32; n * d];
                    for i in 0..n {
                        for j in 0..d {
                            dm[i * d + j] = self.nodes[mu.0].data[i * d + j] * dy[i];
                        }
                    }
                    self.accumulate(*mu, dm);
                }
                if self.rg(*logvar) {
                    let mut dl = vec![0.0f32; n * d];
                    for i in 0..n {
                        for j in 0..d {
                            let lv = self.nodes[logvar.0].data[i * d + j] as f64;
                            dl[i * d + j] = (0.5 * (lv.exp() - 1.0) * dy[i] as f64) as f32;
                        }
                    }
                    self.accumulate(*logvar, dl);
                }
            }
            Op::CosineDist { a, b } => {
                let (n, d) = rows_cols(self.shape(*a)).expect("validated");
                let mut da = vec![0.0f32; n * d];
                let mut db = vec![0.0f32; n * d];
                for i in 0..n {
                    let ra = &self.nodes[a.0].data[i * d..(i + 1) * d];
                    let rb = &self.nodes[b.0].data[i * d..(i + 1) * d];
                    let (dot, na, nb) = dot_norms(ra, rb);
                    let g = dy[i] as f64;
                    for j in 0..d {
                        let av = ra[j] as f64;
                        let bv = rb[j] as f64;
                        da[i * d + j] = (-2.0 * g * (bv / (na * nb) - dot * av / (na * na * na * nb))) as f32;
                        db[i * d + j] = (-2.0 * g * (av / (na * nb) - dot * bv / (nb * nb * nb * na))) as f32;
                    }
                }
                if self.rg(*a) {
                    self.accumulate(*a, da);
                }
                if self.rg(*b) {
                    self.accumulate(*b, db);
                }
            }
        }
    }
}

/// Row chunk size for parallel GEMM over batch-like leading dims.
fn gemm_row_chunk(m: usize) -> usize {
    (m / 2).clamp(64, IMAGE_CHUNK * 1024)
}

fn log_sum_exp(row: &[f32]) -> f64 {
    let m = row.iter().fold(f32::NEG_INFINITY, |a, b| a.max(*b)) as f64;
    if !m.is_finite() {
        return m;
    }
    let sum: f64 = row.iter().map(|v| (*v as f64 - m).exp()).sum();
    m + sum.ln()
}

fn dot_norms(a: &[f32], b: &[f32]) -> (f64, f64, f64) {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        dot += *x as f64 * *y as f64;
        na += *x as f64 * *x as f64;
        nb += *y as f64 * *y as f64;
    }
    (dot, na.sqrt().max(1e-8), nb.sqrt().max(1e-8))
}

/// Argmax per row; ties resolve to the lowest index.
pub fn argmax_rows(data: &[f32], n: usize, k: usize) -> Vec<usize> {
    (0..n)
        .map(|i| {
            let row = &data[i * k..(i + 1) * k];
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
