use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::gemm::{gemm, View, ViewMut};
use super::{Result, Tensor, TensorError};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Conv1d { x: NodeId, w: NodeId, b: NodeId, geom: ConvGeom },
    MaxPool1d { x: NodeId, argmax: Vec<usize> },
    Relu { x: NodeId },
    Softmax { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, inv_std: Vec<f64> },
    GlobalAvgPool { x: NodeId, steps: usize, dim: usize },
    Attention { q: NodeId, k: NodeId, v: NodeId, geom: AttnGeom, probs: Vec<f64> },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Sum { x: NodeId },
    Flatten { x: NodeId },
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    t_in: usize,
    cout: usize,
    kernel: usize,
    t_out: usize,
}

#[derive(Debug, Clone, Copy)]
struct AttnGeom {
    batch: usize,
    steps: usize,
    dim: usize,
    heads: usize,
}

impl AttnGeom {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only tape. Node order is a topological order, so the backward
/// sweep walks the vector in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, expected: impl Into<String>, actual: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        expected: expected.into(),
        actual: actual.to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input or parameter. Gradients are tracked when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Attention probabilities laid out as `[batch, heads, steps, steps]`.
    pub fn attention_weights(&self, id: NodeId) -> Option<&[f64]> {
        match &self.nodes[id.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Hash of every data-dependent branch taken (ReLU signs, max-pool winners).
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for v in self.nodes[x.0].value.values() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool1d { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, parents: &[NodeId]) -> Result<NodeId> {
        if value.values().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op: kind,
            needs_grad,
            grad: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.values()
    }

    /// `[m, k] · [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 {
            return Err(shape_err("matmul", "[m, k]", sa));
        }
        if sb.len() != 2 || sb[0] != sa[1] {
            return Err(shape_err("matmul", format!("[{}, n]", sa[1]), sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            View::row_major(self.data(a), 0, k),
            View::row_major(self.data(b), 0, n),
            0.0,
            ViewMut::row_major(&mut out, 0, n),
        );
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b }, &[a, b])
    }

    /// Affine map over the last axis: `x[.., in] · w[in, out] + b[out]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w);
        let inp = *sx.last().unwrap();
        if sw.len() != 2 || sw[0] != inp {
            return Err(shape_err("dense", format!("weight [{inp}, out]"), sw));
        }
        let out_dim = sw[1];
        if self.shape(b) != [out_dim] {
            return Err(shape_err("dense", format!("bias [{out_dim}]"), self.shape(b)));
        }
        let rows = self.nodes[x.0].value.len() / inp;
        let mut out = Vec::with_capacity(rows * out_dim);
        let bias = self.data(b);
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        gemm(
            rows,
            inp,
            out_dim,
            1.0,
            View::row_major(self.data(x), 0, inp),
            View::row_major(self.data(w), 0, out_dim),
            1.0,
            ViewMut::row_major(&mut out, 0, out_dim),
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = out_dim;
        self.push("dense", Tensor::from_parts(shape, out), Op::Dense { x, w, b }, &[x, w, b])
    }

    /// Valid-padding, stride-1 convolution. `x` is `[batch, cin, t]` or `[cin, t]`,
    /// `w` is `[cout, cin, kernel]`, `b` is `[cout]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let (batch, cin, t_in) = match sx.as_slice() {
            [c, t] => (1, *c, *t),
            [n, c, t] => (*n, *c, *t),
            _ => return Err(shape_err("conv1d", "[batch, channels, steps]", &sx)),
        };
        let sw = self.shape(w);
        if sw.len() != 3 || sw[1] != cin {
            return Err(shape_err("conv1d", format!("weight [cout, {cin}, kernel]"), sw));
        }
        let (cout, kernel) = (sw[0], sw[2]);
        if kernel > t_in {
            return Err(shape_err("conv1d", format!("at least {kernel} steps"), &sx));
        }
        if self.shape(b) != [cout] {
            return Err(shape_err("conv1d", format!("bias [{cout}]"), self.shape(b)));
        }
        let geom = ConvGeom {
            batch,
            cin,
            t_in,
            cout,
            kernel,
            t_out: t_in - kernel + 1,
        };
        let xd = self.data(x);
        let wd = self.data(w);
        let bd = self.data(b);
        let mut out = vec![0.0; batch * cout * geom.t_out];
        let mut cols = vec![0.0; cin * kernel * geom.t_out];
        for n in 0..batch {
            im2col(&xd[n * cin * t_in..(n + 1) * cin * t_in], &geom, &mut cols);
            let base = n * cout * geom.t_out;
            for (o, &bias) in bd.iter().enumerate() {
                out[base + o * geom.t_out..base + (o + 1) * geom.t_out].fill(bias);
            }
            gemm(
                cout,
                cin * kernel,
                geom.t_out,
                1.0,
                View::row_major(wd, 0, cin * kernel),
                View::row_major(&cols, 0, geom.t_out),
                1.0,
                ViewMut::row_major(&mut out, base, geom.t_out),
            );
        }
        let shape = if sx.len() == 2 {
            vec![cout, geom.t_out]
        } else {
            vec![batch, cout, geom.t_out]
        };
        self.push("conv1d", Tensor::from_parts(shape, out), Op::Conv1d { x, w, b, geom }, &[x, w, b])
    }

    /// Non-overlapping max pooling over the last axis; a trailing remainder is dropped.
    pub fn maxpool1d(&mut self, x: NodeId, window: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let t = *sx.last().unwrap();
        if window == 0 || t < window {
            return Err(shape_err("maxpool1d", format!("last axis >= window {window}"), &sx));
        }
        let t_out = t / window;
        let rows = self.nodes[x.0].value.len() / t;
        let xd = self.data(x);
        let mut out = Vec::with_capacity(rows * t_out);
        let mut argmax = Vec::with_capacity(rows * t_out);
        for r in 0..rows {
            for j in 0..t_out {
                let start = r * t + j * window;
                let mut best = start;
                for i in start + 1..start + window {
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = t_out;
        self.push("maxpool1d", Tensor::from_parts(shape, out), Op::MaxPool1d { x, argmax }, &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = &self.nodes[x.0].value;
        let out = value.values().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::from_parts(value.shape().to_vec(), out);
        self.push("relu", t, Op::Relu { x }, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let value = &self.nodes[x.0].value;
        let d = *value.shape().last().unwrap();
        let mut out = value.values().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let t = Tensor::from_parts(value.shape().to_vec(), out);
        self.push("softmax", t, Op::Softmax { x }, &[x])
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap();
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(id) != [d] {
                return Err(shape_err("layer_norm", format!("{name} [{d}]"), self.shape(id)));
            }
        }
        let xd = self.data(x);
        let g = self.data(gamma);
        let bt = self.data(beta);
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for i in 0..d {
                let h = (row[i] - mean) * is;
                xhat[r * d + i] = h;
                out[r * d + i] = g[i] * h + bt[i];
            }
        }
        let op = Op::LayerNorm { x, gamma, beta, xhat, inv_std };
        self.push("layer_norm", Tensor::from_parts(sx, out), op, &[x, gamma, beta])
    }

    /// Mean over the time axis: `[batch, steps, dim] -> [batch, dim]` (or `[steps, dim] -> [dim]`).
    pub fn global_avg_pool1d(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let (batch, steps, dim, shape) = match sx.as_slice() {
            [t, d] => (1, *t, *d, vec![*d]),
            [n, t, d] => (*n, *t, *d, vec![*n, *d]),
            _ => return Err(shape_err("global_avg_pool1d", "[batch, steps, dim]", &sx)),
        };
        let xd = self.data(x);
        let mut out = vec![0.0; batch * dim];
        for n in 0..batch {
            for t in 0..steps {
                let row = &xd[(n * steps + t) * dim..(n * steps + t + 1) * dim];
                for (o, v) in out[n * dim..(n + 1) * dim].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        let scale = 1.0 / steps as f64;
        out.iter_mut().for_each(|v| *v *= scale);
        let op = Op::GlobalAvgPool { x, steps, dim };
        self.push("global_avg_pool1d", Tensor::from_parts(shape, out), op, &[x])
    }

    /// Multi-head scaled dot-product attention on `[batch, steps, dim]` inputs.
    /// Heads split `dim` into contiguous slices; outputs are concatenated back.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let sq = self.shape(q).to_vec();
        if sq.len() != 3 {
            return Err(shape_err("attention", "[batch, steps, dim]", &sq));
        }
        for id in [k, v] {
            if self.shape(id) != sq.as_slice() {
                return Err(shape_err("attention", format!("{sq:?}"), self.shape(id)));
            }
        }
        if heads == 0 || sq[2] % heads != 0 {
            return Err(shape_err("attention", format!("dim divisible by {heads} heads"), &sq));
        }
        let geom = AttnGeom {
            batch: sq[0],
            steps: sq[1],
            dim: sq[2],
            heads,
        };
        let (t, d, dh) = (geom.steps, geom.dim, geom.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0; geom.batch * heads * t * t];
        let mut out = vec![0.0; qd.len()];
        for n in 0..geom.batch {
            for h in 0..heads {
                let off = n * t * d + h * dh;
                let p_off = (n * heads + h) * t * t;
                let p = &mut probs[p_off..p_off + t * t];
                gemm(
                    t,
                    dh,
                    t,
                    scale,
                    View::row_major(qd, off, d),
                    View::row_major(kd, off, d).transposed(),
                    0.0,
                    ViewMut::row_major(p, 0, t),
                );
                for row in p.chunks_mut(t) {
                    softmax_in_place(row);
                }
                gemm(
                    t,
                    t,
                    dh,
                    1.0,
                    View::row_major(p, 0, t),
                    View::row_major(vd, off, d),
                    0.0,
                    ViewMut::row_major(&mut out, off, d),
                );
            }
        }
        let op = Op::Attention { q, k, v, geom, probs };
        self.push("attention", Tensor::from_parts(sq, out), op, &[q, k, v])
    }

    /// Elementwise sum. `b` may match `a` exactly or match a trailing suffix of
    /// `a`'s shape, in which case it is broadcast over the leading axes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add", format!("{sa:?} or a suffix of it"), sb));
        }
        let bd = self.data(b);
        let out = self
            .data(a)
            .chunks(bd.len())
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        self.push("add", Tensor::from_parts(sa, out), Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if self.shape(b) != sa.as_slice() {
            return Err(shape_err("mul", format!("{sa:?}"), self.shape(b)));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        self.push("mul", Tensor::from_parts(sa, out), Op::Mul { a, b }, &[a, b])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.data(x).iter().sum();
        self.push("sum", Tensor::from_parts(vec![1], vec![s]), Op::Sum { x }, &[x])
    }

    /// `[batch, ...] -> [batch, product(...)]`
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let value = &self.nodes[x.0].value;
        let sx = value.shape();
        if sx.len() < 2 {
            return Err(shape_err("flatten", "[batch, ...]", sx));
        }
        let t = Tensor::from_parts(vec![sx[0], value.len() / sx[0]], value.values().to_vec());
        self.push("flatten", t, Op::Flatten { x }, &[x])
    }

    /// Mean categorical cross-entropy of `[batch, classes]` logits.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err("cross_entropy", format!("[{}, classes]", labels.len()), &s));
        }
        let classes = s[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::LabelOutOfRange { label, classes });
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(classes).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            softmax_in_place(row);
        }
        loss /= labels.len() as f64;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push("cross_entropy", Tensor::from_parts(vec![1], vec![loss]), op, &[logits])
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate into every node
    /// reachable from a gradient-tracking leaf.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let shape = self.shape(loss);
        if shape != [1] {
            return Err(TensorError::NotScalar(shape.to_vec()));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(upstream) = self.nodes[i].grad.take() else {
                continue;
            };
            self.propagate(i, &upstream);
            self.nodes[i].grad = Some(upstream);
        }
        Ok(())
    }

    /// Takes the gradient buffer of `id` (zero-filled if absent) when it needs one.
    fn take_grad(&mut self, id: NodeId) -> Option<Vec<f64>> {
        let node = &mut self.nodes[id.0];
        if !node.needs_grad {
            return None;
        }
        let n = node.value.len();
        Some(node.grad.take().unwrap_or_else(|| vec![0.0; n]))
    }

    fn put_grad(&mut self, id: NodeId, g: Vec<f64>) {
        self.nodes[id.0].grad = Some(g);
    }

    fn accumulate(&mut self, id: NodeId, f: impl FnOnce(&Self, &mut [f64])) {
        if let Some(mut g) = self.take_grad(id) {
            f(self, &mut g);
            self.put_grad(id, g);
        }
    }

    fn propagate(&mut self, i: usize, dy: &[f64]) {
        // Ops own their saved buffers; detach the op while parents are updated.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                self.accumulate(a, |g, da| {
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        View::row_major(dy, 0, n),
                        View::row_major(g.data(b), 0, n).transposed(),
                        1.0,
                        ViewMut::row_major(da, 0, k),
                    )
                });
                self.accumulate(b, |g, db| {
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        View::row_major(g.data(a), 0, k).transposed(),
                        View::row_major(dy, 0, n),
                        1.0,
                        ViewMut::row_major(db, 0, n),
                    )
                });
            }
            Op::Dense { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let (inp, out) = (self.shape(w)[0], self.shape(w)[1]);
                let rows = dy.len() / out;
                self.accumulate(x, |g, dx| {
                    gemm(
                        rows,
                        out,
                        inp,
                        1.0,
                        View::row_major(dy, 0, out),
                        View::row_major(g.data(w), 0, out).transposed(),
                        1.0,
                        ViewMut::row_major(dx, 0, inp),
                    )
                });
                self.accumulate(w, |g, dw| {
                    gemm(
                        inp,
                        rows,
                        out,
                        1.0,
                        View::row_major(g.data(x), 0, inp).transposed(),
                        View::row_major(dy, 0, out),
                        1.0,
                        ViewMut::row_major(dw, 0, out),
                    )
                });
                self.accumulate(b, |_, db| {
                    for row in dy.chunks(out) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b, geom } => {
                let (x, w, b, geom) = (*x, *w, *b, *geom);
                let ck = geom.cin * geom.kernel;
                let per_in = geom.cin * geom.t_in;
                let per_out = geom.cout * geom.t_out;
                self.accumulate(w, |g, dw| {
                    let xd = g.data(x);
                    let mut cols = vec![0.0; ck * geom.t_out];
                    for n in 0..geom.batch {
                        im2col(&xd[n * per_in..(n + 1) * per_in], &geom, &mut cols);
                        gemm(
                            geom.cout,
                            geom.t_out,
                            ck,
                            1.0,
                            View::row_major(dy, n * per_out, geom.t_out),
                            View::row_major(&cols, 0, geom.t_out).transposed(),
                            1.0,
                            ViewMut::row_major(dw, 0, ck),
                        );
                    }
                });
                self.accumulate(b, |_, db| {
                    for (o, row) in dy.chunks(geom.t_out).enumerate() {
                        db[o % geom.cout] += row.iter().sum::<f64>();
                    }
                });
                self.accumulate(x, |g, dx| {
                    let wd = g.data(w);
                    let mut dcols = vec![0.0; ck * geom.t_out];
                    for n in 0..geom.batch {
                        gemm(
                            ck,
                            geom.cout,
                            geom.t_out,
                            1.0,
                            View::row_major(wd, 0, ck).transposed(),
                            View::row_major(dy, n * per_out, geom.t_out),
                            0.0,
                            ViewMut::row_major(&mut dcols, 0, geom.t_out),
                        );
                        col2im_add(&dcols, &geom, &mut dx[n * per_in..(n + 1) * per_in]);
                    }
                });
            }
            Op::MaxPool1d { x, argmax } => {
                self.accumulate(*x, |_, dx| {
                    for (&src, d) in argmax.iter().zip(dy) {
                        dx[src] += d;
                    }
                });
            }
            Op::Relu { x } => {
                let x = *x;
                self.accumulate(x, |g, dx| {
                    for ((d, v), u) in dx.iter_mut().zip(g.data(x)).zip(dy) {
                        if *v > 0.0 {
                            *d += u;
                        }
                    }
                });
            }
            Op::Softmax { x } => {
                let d = *self.nodes[i].value.shape().last().unwrap();
                let y = self.nodes[i].value.values().to_vec();
                self.accumulate(*x, |_, dx| {
                    for ((dxr, yr), dyr) in dx.chunks_mut(d).zip(y.chunks(d)).zip(dy.chunks(d)) {
                        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dxr[j] += yr[j] * (dyr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = self.shape(gamma)[0];
                self.accumulate(gamma, |_, dg| {
                    for (row_dy, row_h) in dy.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += row_dy[j] * row_h[j];
                        }
                    }
                });
                self.accumulate(beta, |_, db| {
                    for row in dy.chunks(d) {
                        for j in 0..d {
                            db[j] += row[j];
                        }
                    }
                });
                self.accumulate(x, |g, dx| {
                    let gd = g.data(gamma);
                    let mut dh = vec![0.0; d];
                    for (r, is) in inv_std.iter().enumerate() {
                        let row_dy = &dy[r * d..(r + 1) * d];
                        let row_h = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dh[j] = row_dy[j] * gd[j];
                        }
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(row_h).map(|(a, b)| a * b).sum();
                        let inv_d = 1.0 / d as f64;
                        for j in 0..d {
                            dx[r * d + j] += is * (dh[j] - inv_d * sum_dh - row_h[j] * inv_d * sum_dh_h);
                        }
                    }
                });
            }
            Op::GlobalAvgPool { x, steps, dim } => {
                let (steps, dim) = (*steps, *dim);
                let scale = 1.0 / steps as f64;
                self.accumulate(*x, |_, dx| {
                    for (n, row) in dy.chunks(dim).enumerate() {
                        for t in 0..steps {
                            let off = (n * steps + t) * dim;
                            for j in 0..dim {
                                dx[off + j] += row[j] * scale;
                            }
                        }
                    }
                });
            }
            Op::Attention { q, k, v, geom, probs } => {
                self.attention_backward(*q, *k, *v, geom, probs, dy);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, |_, da| {
                    for (d, u) in da.iter_mut().zip(dy) {
                        *d += u;
                    }
                });
                self.accumulate(b, |_, db| {
                    for chunk in dy.chunks(db.len()) {
                        for (d, u) in db.iter_mut().zip(chunk) {
                            *d += u;
                        }
                    }
                });
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, |g, da| {
                    for ((d, u), o) in da.iter_mut().zip(dy).zip(g.data(b)) {
                        *d += u * o;
                    }
                });
                self.accumulate(b, |g, db| {
                    for ((d, u), o) in db.iter_mut().zip(dy).zip(g.data(a)) {
                        *d += u * o;
                    }
                });
            }
            Op::Sum { x } => {
                self.accumulate(*x, |_, dx| dx.iter_mut().for_each(|d| *d += dy[0]));
            }
            Op::Flatten { x } => {
                self.accumulate(*x, |_, dx| {
                    for (d, u) in dx.iter_mut().zip(dy) {
                        *d += u;
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = probs.len() / labels.len();
                let scale = dy[0] / labels.len() as f64;
                self.accumulate(*logits, |_, dl| {
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let target = if c == label { 1.0 } else { 0.0 };
                            dl[r * classes + c] += scale * (probs[r * classes + c] - target);
                        }
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }

    fn attention_backward(&mut self, q: NodeId, k: NodeId, v: NodeId, geom: &AttnGeom, probs: &[f64], dy: &[f64]) {
        let (t, d, dh, heads) = (geom.steps, geom.dim, geom.head_dim(), geom.heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let any = [q, k, v].iter().any(|id| self.nodes[id.0].needs_grad);
        if !any {
            return;
        }
        // dS for every (batch, head), needed by both the query and key gradients.
        let mut ds = vec![0.0; probs.len()];
        {
            let vd = self.data(v);
            for n in 0..geom.batch {
                for h in 0..heads {
                    let off = n * t * d + h * dh;
                    let p_off = (n * heads + h) * t * t;
                    let dsb = &mut ds[p_off..p_off + t * t];
                    gemm(
                        t,
                        dh,
                        t,
                        1.0,
                        View::row_major(dy, off, d),
                        View::row_major(vd, off, d).transposed(),
                        0.0,
                        ViewMut::row_major(dsb, 0, t),
                    );
                    let p = &probs[p_off..p_off + t * t];
                    for (row_ds, row_p) in dsb.chunks_mut(t).zip(p.chunks(t)) {
                        let dot: f64 = row_ds.iter().zip(row_p).map(|(a, b)| a * b).sum();
                        for j in 0..t {
                            row_ds[j] = row_p[j] * (row_ds[j] - dot);
                        }
                    }
                }
            }
        }
        self.accumulate(v, |_, dv| {
            for n in 0..geom.batch {
                for h in 0..heads {
                    let off = n * t * d + h * dh;
                    let p_off = (n * heads + h) * t * t;
                    gemm(
                        t,
                        t,
                        dh,
                        1.0,
                        View::row_major(probs, p_off, t).transposed(),
                        View::row_major(dy, off, d),
                        1.0,
                        ViewMut::row_major(dv, off, d),
                    );
                }
            }
        });
        self.accumulate(q, |g, dq| {
            let kd = g.data(k);
            for n in 0..geom.batch {
                for h in 0..heads {
                    let off = n * t * d + h * dh;
                    let p_off = (n * heads + h) * t * t;
                    gemm(
                        t,
                        t,
                        dh,
                        scale,
                        View::row_major(&ds, p_off, t),
                        View::row_major(kd, off, d),
                        1.0,
                        ViewMut::row_major(dq, off, d),
                    );
                }
            }
        });
        self.accumulate(k, |g, dk| {
            let qd = g.data(q);
            for n in 0..geom.batch {
                for h in 0..heads {
                    let off = n * t * d + h * dh;
                    let p_off = (n * heads + h) * t * t;
                    gemm(
                        t,
                        t,
                        dh,
                        scale,
                        View::row_major(&ds, p_off, t).transposed(),
                        View::row_major(qd, off, d),
                        1.0,
                        ViewMut::row_major(dk, off, d),
                    );
                }
            }
        });
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Unrolls one sample `[cin, t_in]` into `[cin * kernel, t_out]` patches.
fn im2col(x: &[f64], geom: &ConvGeom, cols: &mut [f64]) {
    for c in 0..geom.cin {
        for j in 0..geom.kernel {
            let dst = (c * geom.kernel + j) * geom.t_out;
            let src = c * geom.t_in + j;
            cols[dst..dst + geom.t_out].copy_from_slice(&x[src..src + geom.t_out]);
        }
    }
}

fn col2im_add(cols: &[f64], geom: &ConvGeom, dx: &mut [f64]) {
    for c in 0..geom.cin {
        for j in 0..geom.kernel {
            let src = (c * geom.kernel + j) * geom.t_out;
            let dst = c * geom.t_in + j;
            for (d, v) in dx[dst..dst + geom.t_out].iter_mut().zip(&cols[src..src + geom.t_out]) {
                *d += v;
            }
        }
    }
}
