//! Reverse-mode tape over [`Tensor`].
//!
//! A [`Graph`] is built fresh for every step: leaves are bound from the
//! parameter store, ops compute their forward value immediately and record a
//! backward rule, and `backward` replays the tape once in reverse. In
//! `NoGrad` mode the same op methods run the same forward kernels (bitwise
//! identical values) but record nothing.
//!
//! Gradients are only retained on leaves; interior adjoints are dropped as
//! soon as they have been propagated. Nodes no gradient can reach (frozen
//! leaves and anything computed purely from them) are pruned from the
//! backward pass entirely via `needs_grad`.

use crate::tensor::{dot, mm, mm_nt, mm_tn, Scalar, Tensor};

/// Variance floor inside layer norm.
pub const LN_EPS: f64 = 1e-5;
/// Denominator floor inside cosine similarity.
pub const COS_EPS: f64 = 1e-8;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Record backward rules.
    Train,
    /// Forward values only (inference, oracle passes).
    NoGrad,
}

enum Op<S: Scalar> {
    Leaf,
    Matmul { a: Var, b: Var },
    MatmulNT { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, b: Var },
    Affine { x: Var, mul: S },
    MulConstT { x: Var, c: Tensor<S> },
    AddConstT { x: Var },
    Silu { x: Var },
    Sigmoid { x: Var },
    Relu { x: Var },
    Softplus { x: Var },
    SoftmaxRows { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<S>, inv_std: Vec<S> },
    CosineRows { a: Var, b: Var },
    CeRows { logits: Var, targets: Vec<usize>, probs: Vec<S> },
    HuberVs { x: Var, target: Tensor<S>, delta: S },
    ConcatCols { parts: Vec<Var> },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    StraightThrough { p: Var },
    Embed { table: Var, ids: Vec<usize> },
    MeanAll { x: Var },
    SumAll { x: Var },
    Gather { x: Var, idx: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { x: Var, idx: Vec<usize> },
    Transpose { x: Var },
    BroadcastRow { v: Var },
    RowScale { x: Var, s: Var },
    Reshape { x: Var },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
    needs_grad: bool,
    op: Op<S>,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    recording: bool,
}

impl<S: Scalar> Graph<S> {
    pub fn new(mode: Mode) -> Self {
        Graph { nodes: Vec::with_capacity(1024), recording: mode == Mode::Train }
    }

    pub fn recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Leaf gradient after `backward`; `None` if nothing flowed here.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        let (op, needs_grad) = if self.recording && needs_grad {
            (op, true)
        } else {
            (Op::Leaf, false)
        };
        self.nodes.push(Node { value, grad: None, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Differentiable leaf (a parameter bound for this step).
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let needs = self.recording;
        self.push(t, Op::Leaf, needs)
    }

    /// Non-differentiable input (data, labels, masks).
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: S) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Forward identity, zero adjoint upstream: the output is a constant.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let t = self.nodes[x.0].value.clone();
        self.push(t, Op::Leaf, false)
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(bv.rows(), k, "matmul inner dims {} vs {}", k, bv.rows());
        let mut out = Tensor::zeros(vec![m, n]);
        mm(av.data(), bv.data(), m, k, n, out.data_mut());
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Matmul { a, b }, needs)
    }

    /// a[m,k] @ b[n,k]^T, the layout used by `x @ W^T` linears.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        assert_eq!(bv.cols(), k, "matmul_nt inner dims {} vs {}", k, bv.cols());
        let mut out = Tensor::zeros(vec![m, n]);
        mm_nt(av.data(), bv.data(), m, k, n, out.data_mut());
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::MatmulNT { a, b }, needs)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (m, n) = (xv.rows(), xv.cols());
        let mut out = Tensor::zeros(vec![n, m]);
        let (xd, od) = (xv.data(), out.data_mut());
        for i in 0..m {
            for j in 0..n {
                od[j * m + i] = xd[i * n + j];
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::Transpose { x }, needs)
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.nodes[a.0].value.shape(),
            self.nodes[b.0].value.shape(),
            "{} shape mismatch",
            what
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "add");
        let out = zip_new(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add { a, b }, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sub");
        let out = zip_new(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub { a, b }, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mul");
        let out = zip_new(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul { a, b }, needs)
    }

    /// mul * x + add, scalar coefficients.
    pub fn affine(&mut self, x: Var, mul: S, add: S) -> Var {
        let out = map_new(&self.nodes[x.0].value, |v| mul * v + add);
        let needs = self.needs(x);
        self.push(out, Op::Affine { x, mul }, needs)
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, x: Var, c: &Tensor<S>) -> Var {
        assert_eq!(self.nodes[x.0].value.shape(), c.shape(), "mul_const shape mismatch");
        let out = zip_new(&self.nodes[x.0].value, c, |a, b| a * b);
        let needs = self.needs(x);
        self.push(out, Op::MulConstT { x, c: c.clone() }, needs)
    }

    /// Elementwise sum with a constant tensor (attention masks).
    pub fn add_const(&mut self, x: Var, c: &Tensor<S>) -> Var {
        assert_eq!(self.nodes[x.0].value.shape(), c.shape(), "add_const shape mismatch");
        let out = zip_new(&self.nodes[x.0].value, c, |a, b| a + b);
        let needs = self.needs(x);
        self.push(out, Op::AddConstT { x }, needs)
    }

    /// Broadcast a bias row over every row of x.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let n = xv.cols();
        assert_eq!(bv.numel(), n, "add_bias width mismatch");
        let mut out = xv.clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, &bi) in row.iter_mut().zip(bv.data()) {
                *o = *o + bi;
            }
        }
        let needs = self.needs(x) || self.needs(b);
        self.push(out, Op::AddBias { x, b }, needs)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = map_new(&self.nodes[x.0].value, |v| v * sigmoid_s(v));
        let needs = self.needs(x);
        self.push(out, Op::Silu { x }, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = map_new(&self.nodes[x.0].value, sigmoid_s);
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid { x }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = map_new(&self.nodes[x.0].value, |v| if v > S::zero() { v } else { S::zero() });
        let needs = self.needs(x);
        self.push(out, Op::Relu { x }, needs)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = map_new(&self.nodes[x.0].value, softplus_s);
        let needs = self.needs(x);
        self.push(out, Op::Softplus { x }, needs)
    }

    // ── structured ops ──────────────────────────────────────────────────

    /// Row-wise softmax. -inf entries (masked) get exactly zero weight.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let n = xv.cols();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            let mx = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::SoftmaxRows { x }, needs)
    }

    /// Layer norm over the last dim with learnable affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (m, n) = (xv.rows(), xv.cols());
        assert_eq!(self.nodes[gamma.0].value.numel(), n, "layer_norm gamma width");
        assert_eq!(self.nodes[beta.0].value.numel(), n, "layer_norm beta width");
        let eps = S::from64(LN_EPS);
        let inv_n = S::from64(1.0 / n as f64);

        let mut xhat = Tensor::zeros(vec![m, n]);
        let mut inv_std = vec![S::zero(); m];
        {
            let (xd, hd) = (xv.data(), xhat.data_mut());
            for i in 0..m {
                let row = &xd[i * n..(i + 1) * n];
                let mean = row.iter().cloned().sum::<S>() * inv_n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_n;
                let is = (var + eps).sqrt().recip();
                inv_std[i] = is;
                for (h, &v) in hd[i * n..(i + 1) * n].iter_mut().zip(row) {
                    *h = (v - mean) * is;
                }
            }
        }
        let gd = self.nodes[gamma.0].value.data().to_vec();
        let bd = self.nodes[beta.0].value.data().to_vec();
        let mut out = Tensor::zeros(vec![m, n]);
        for (orow, hrow) in out.data_mut().chunks_exact_mut(n).zip(xhat.data().chunks_exact(n)) {
            for j in 0..n {
                orow[j] = gd[j].mul_add(hrow[j], bd[j]);
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, needs)
    }

    /// Per-row cosine similarity with a denominator floor of [`COS_EPS`].
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "cosine_rows");
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, n) = (av.rows(), av.cols());
        let eps = S::from64(COS_EPS);
        let mut out = Tensor::zeros(vec![m]);
        for i in 0..m {
            let (ar, br) = (&av.data()[i * n..(i + 1) * n], &bv.data()[i * n..(i + 1) * n]);
            let num = dot(ar, br);
            let den = (dot(ar, ar).sqrt() * dot(br, br).sqrt()).max(eps);
            out.data_mut()[i] = num / den;
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::CosineRows { a, b }, needs)
    }

    /// Per-row next-token cross entropy: -log softmax(logits)[target].
    pub fn ce_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = &self.nodes[logits.0].value;
        let (m, v) = (lv.rows(), lv.cols());
        assert_eq!(targets.len(), m, "ce_rows needs one target per row");
        for &t in targets {
            assert!(t < v, "ce_rows target {} out of vocab {}", t, v);
        }
        let mut probs = vec![S::zero(); m * v];
        let mut out = Tensor::zeros(vec![m]);
        for i in 0..m {
            let row = &lv.data()[i * v..(i + 1) * v];
            let mx = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            let prow = &mut probs[i * v..(i + 1) * v];
            for (p, &x) in prow.iter_mut().zip(row) {
                *p = (x - mx).exp();
                sum = sum + *p;
            }
            for p in prow.iter_mut() {
                *p = *p / sum;
            }
            out.data_mut()[i] = sum.ln() + mx - row[targets[i]];
        }
        let needs = self.needs(logits);
        self.push(out, Op::CeRows { logits, targets: targets.to_vec(), probs }, needs)
    }

    /// Elementwise Huber distance to a constant target.
    pub fn huber_vs(&mut self, x: Var, target: &Tensor<S>, delta: S) -> Var {
        assert_eq!(self.nodes[x.0].value.shape(), target.shape(), "huber_vs shape mismatch");
        let half = S::from64(0.5);
        let out = zip_new(&self.nodes[x.0].value, target, |v, t| {
            let e = v - t;
            if e.abs() <= delta {
                half * e * e
            } else {
                delta * (e.abs() - half * delta)
            }
        });
        let needs = self.needs(x);
        self.push(out, Op::HuberVs { x, target: target.clone(), delta }, needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let m = self.nodes[parts[0].0].value.rows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut out = Tensor::zeros(vec![m, total]);
        let mut off = 0;
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            assert_eq!(pv.rows(), m, "concat_cols row mismatch");
            let w = pv.cols();
            for i in 0..m {
                out.data_mut()[i * total + off..i * total + off + w]
                    .copy_from_slice(&pv.data()[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatCols { parts: parts.to_vec() }, needs)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let (m, n) = (xv.rows(), xv.cols());
        assert!(start + len <= n, "slice_cols out of range");
        let mut out = Tensor::zeros(vec![m, len]);
        for i in 0..m {
            out.data_mut()[i * len..(i + 1) * len]
                .copy_from_slice(&xv.data()[i * n + start..i * n + start + len]);
        }
        let needs = self.needs(x);
        self.push(out, Op::SliceCols { x, start }, needs)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let (m, n) = (xv.rows(), xv.cols());
        assert!(start + len <= m, "slice_rows out of range");
        let out = Tensor::new(vec![len, n], xv.data()[start * n..(start + len) * n].to_vec());
        let needs = self.needs(x);
        self.push(out, Op::SliceRows { x, start }, needs)
    }

    /// Straight-through estimator: the forward value is exactly `hard`
    /// (binary, no float residue from `hard - p + p`), the backward rule is
    /// identity into `p`, realising d out/d p = 1.
    pub fn straight_through(&mut self, p: Var, hard: &Tensor<S>) -> Var {
        assert_eq!(self.nodes[p.0].value.shape(), hard.shape(), "straight_through shape mismatch");
        let needs = self.needs(p);
        self.push(hard.clone(), Op::StraightThrough { p }, needs)
    }

    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = &self.nodes[table.0].value;
        let (v, d) = (tv.rows(), tv.cols());
        let mut out = Tensor::zeros(vec![ids.len(), d]);
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < v, "embed id {} out of table {}", id, v);
            out.data_mut()[i * d..(i + 1) * d].copy_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        self.push(out, Op::Embed { table, ids: ids.to_vec() }, needs)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let n = S::from64(xv.numel() as f64);
        let s = xv.data().iter().cloned().sum::<S>() / n;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::MeanAll { x }, needs)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().cloned().sum::<S>();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, needs)
    }

    /// Gather from a rank-1 tensor; duplicate indices allowed.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.shape().len(), 1, "gather expects rank-1 input");
        let out = Tensor::new(vec![idx.len()], idx.iter().map(|&i| xv.data()[i]).collect());
        let needs = self.needs(x);
        self.push(out, Op::Gather { x, idx: idx.to_vec() }, needs)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = &self.nodes[x.0].value;
        let (m, n) = (xv.rows(), xv.cols());
        let mut out = Tensor::zeros(vec![idx.len(), n]);
        for (j, &i) in idx.iter().enumerate() {
            assert!(i < m, "gather_rows index out of range");
            out.data_mut()[j * n..(j + 1) * n].copy_from_slice(&xv.data()[i * n..(i + 1) * n]);
        }
        let needs = self.needs(x);
        self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, needs)
    }

    /// Place row j of x at row idx[j] of a zero [rows, n] output.
    /// Indices must be unique.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let n = xv.cols();
        assert_eq!(xv.rows(), idx.len(), "scatter_rows needs one index per row");
        let mut out = Tensor::zeros(vec![rows, n]);
        let mut seen = vec![false; rows];
        for (j, &i) in idx.iter().enumerate() {
            assert!(i < rows && !seen[i], "scatter_rows index invalid or duplicated");
            seen[i] = true;
            out.data_mut()[i * n..(i + 1) * n].copy_from_slice(&xv.data()[j * n..(j + 1) * n]);
        }
        let needs = self.needs(x);
        self.push(out, Op::ScatterRows { x, idx: idx.to_vec() }, needs)
    }

    /// Tile a rank-1 vector into `rows` identical rows.
    pub fn broadcast_row(&mut self, v: Var, rows: usize) -> Var {
        let vv = &self.nodes[v.0].value;
        let n = vv.numel();
        let mut out = Tensor::zeros(vec![rows, n]);
        for row in out.data_mut().chunks_exact_mut(n) {
            row.copy_from_slice(vv.data());
        }
        let needs = self.needs(v);
        self.push(out, Op::BroadcastRow { v }, needs)
    }

    /// Scale row i of x by s[i].
    pub fn row_scale(&mut self, x: Var, s: Var) -> Var {
        let (xv, sv) = (&self.nodes[x.0].value, &self.nodes[s.0].value);
        let (m, n) = (xv.rows(), xv.cols());
        assert_eq!(sv.numel(), m, "row_scale needs one scale per row");
        let mut out = xv.clone();
        for (i, row) in out.data_mut().chunks_exact_mut(n).enumerate() {
            let si = sv.data()[i];
            for v in row.iter_mut() {
                *v = *v * si;
            }
        }
        let needs = self.needs(x) || self.needs(s);
        self.push(out, Op::RowScale { x, s }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(
            shape.iter().product::<usize>(),
            xv.numel(),
            "reshape element count mismatch"
        );
        let out = Tensor::new(shape, xv.data().to_vec());
        let needs = self.needs(x);
        self.push(out, Op::Reshape { x }, needs)
    }

    // ── backward ────────────────────────────────────────────────────────

    fn accum_data(&mut self, v: Var, delta: Tensor<S>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(g) => {
                debug_assert_eq!(g.shape(), delta.shape());
                for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gi = *gi + *di;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    /// Reverse sweep from a scalar loss. Visits each node at most once in
    /// reverse creation order (creation order is topological by
    /// construction). Leaf gradients stay readable afterwards.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "backward needs a scalar loss");
        assert!(self.recording, "backward on a no-grad graph");
        self.nodes[loss.0].grad = Some(Tensor::scalar(S::one()));

        for id in (0..=loss.0).rev() {
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue; // leaves keep their grads; constants never get one
            }
            let Some(d) = self.nodes[id].grad.take() else { continue };
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
            self.apply_backward(Var(id), op, d);
        }
    }

    fn apply_backward(&mut self, out: Var, op: Op<S>, d: Tensor<S>) {
        match op {
            Op::Leaf => unreachable!(),
            Op::Matmul { a, b } => {
                let (m, n) = (d.rows(), d.cols());
                let k = self.nodes[a.0].value.cols();
                if self.needs(a) {
                    let mut da = Tensor::zeros(vec![m, k]);
                    mm_nt(d.data(), self.nodes[b.0].value.data(), m, n, k, da.data_mut());
                    self.accum_data(a, da);
                }
                if self.needs(b) {
                    let mut db = Tensor::zeros(vec![k, n]);
                    mm_tn(self.nodes[a.0].value.data(), d.data(), m, k, n, db.data_mut());
                    self.accum_data(b, db);
                }
            }
            Op::MatmulNT { a, b } => {
                let (m, n) = (d.rows(), d.cols());
                let k = self.nodes[a.0].value.cols();
                if self.needs(a) {
                    let mut da = Tensor::zeros(vec![m, k]);
                    mm(d.data(), self.nodes[b.0].value.data(), m, n, k, da.data_mut());
                    self.accum_data(a, da);
                }
                if self.needs(b) {
                    let mut db = Tensor::zeros(vec![n, k]);
                    mm_tn(d.data(), self.nodes[a.0].value.data(), m, n, k, db.data_mut());
                    self.accum_data(b, db);
                }
            }
            Op::Add { a, b } => {
                if self.needs(a) {
                    self.accum_data(a, d.clone());
                }
                if self.needs(b) {
                    self.accum_data(b, d);
                }
            }
            Op::Sub { a, b } => {
                if self.needs(a) {
                    self.accum_data(a, d.clone());
                }
                if self.needs(b) {
                    let neg = map_new(&d, |v| -v);
                    self.accum_data(b, neg);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(a) {
                    let da = zip_new(&d, &self.nodes[b.0].value, |x, y| x * y);
                    self.accum_data(a, da);
                }
                if self.needs(b) {
                    let db = zip_new(&d, &self.nodes[a.0].value, |x, y| x * y);
                    self.accum_data(b, db);
                }
            }
            Op::AddBias { x, b } => {
                if self.needs(b) {
                    let n = self.nodes[b.0].value.numel();
                    let mut db = Tensor::zeros(vec![n]);
                    for row in d.data().chunks_exact(n) {
                        for (g, &v) in db.data_mut().iter_mut().zip(row) {
                            *g = *g + v;
                        }
                    }
                    self.accum_data(b, db);
                }
                if self.needs(x) {
                    self.accum_data(x, d);
                }
            }
            Op::Affine { x, mul } => {
                if self.needs(x) {
                    let dx = map_new(&d, |v| v * mul);
                    self.accum_data(x, dx);
                }
            }
            Op::MulConstT { x, c } => {
                if self.needs(x) {
                    let dx = zip_new(&d, &c, |v, cv| v * cv);
                    self.accum_data(x, dx);
                }
            }
            Op::AddConstT { x } => {
                if self.needs(x) {
                    self.accum_data(x, d);
                }
            }
            Op::Silu { x } => {
                if self.needs(x) {
                    let dx = zip_new(&d, &self.nodes[x.0].value, |g, v| {
                        let s = sigmoid_s(v);
                        g * s * (S::one() + v * (S::one() - s))
                    });
                    self.accum_data(x, dx);
                }
            }
            Op::Sigmoid { x } => {
                if self.needs(x) {
                    let dx = zip_new(&d, &self.nodes[out.0].value, |g, y| g * y * (S::one() - y));
                    self.accum_data(x, dx);
                }
            }
            Op::Relu { x } => {
                if self.needs(x) {
                    let dx = zip_new(&d, &self.nodes[x.0].value, |g, v| {
                        if v > S::zero() {
                            g
                        } else {
                            S::zero()
                        }
                    });
                    self.accum_data(x, dx);
                }
            }
            Op::Softplus { x } => {
                if self.needs(x) {
                    let dx = zip_new(&d, &self.nodes[x.0].value, |g, v| g * sigmoid_s(v));
                    self.accum_data(x, dx);
                }
            }
            Op::SoftmaxRows { x } => {
                if self.needs(x) {
                    let y = &self.nodes[out.0].value;
                    let n = y.cols();
                    let mut dx = Tensor::zeros(y.shape().to_vec());
                    for ((drow, yrow), xrow) in d
                        .data()
                        .chunks_exact(n)
                        .zip(y.data().chunks_exact(n))
                        .zip(dx.data_mut().chunks_exact_mut(n))
                    {
                        let dotp = dot(drow, yrow);
                        for j in 0..n {
                            xrow[j] = yrow[j] * (drow[j] - dotp);
                        }
                    }
                    self.accum_data(x, dx);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (m, n) = (xhat.rows(), xhat.cols());
                let inv_n = S::from64(1.0 / n as f64);
                if self.needs(beta) {
                    let mut db = Tensor::zeros(vec![n]);
                    for row in d.data().chunks_exact(n) {
                        for (g, &v) in db.data_mut().iter_mut().zip(row) {
                            *g = *g + v;
                        }
                    }
                    self.accum_data(beta, db);
                }
                if self.needs(gamma) {
                    let mut dg = Tensor::zeros(vec![n]);
                    for (drow, hrow) in d.data().chunks_exact(n).zip(xhat.data().chunks_exact(n)) {
                        for j in 0..n {
                            dg.data_mut()[j] = dg.data_mut()[j] + drow[j] * hrow[j];
                        }
                    }
                    self.accum_data(gamma, dg);
                }
                if self.needs(x) {
                    let gd = self.nodes[gamma.0].value.data().to_vec();
                    let mut dx = Tensor::zeros(vec![m, n]);
                    for i in 0..m {
                        let drow = &d.data()[i * n..(i + 1) * n];
                        let hrow = &xhat.data()[i * n..(i + 1) * n];
                        let mut g_mean = S::zero();
                        let mut gh_mean = S::zero();
                        for j in 0..n {
                            let g = drow[j] * gd[j];
                            g_mean = g_mean + g;
                            gh_mean = gh_mean + g * hrow[j];
                        }
                        g_mean = g_mean * inv_n;
                        gh_mean = gh_mean * inv_n;
                        let is = inv_std[i];
                        let xrow = &mut dx.data_mut()[i * n..(i + 1) * n];
                        for j in 0..n {
                            let g = drow[j] * gd[j];
                            xrow[j] = is * (g - g_mean - hrow[j] * gh_mean);
                        }
                    }
                    self.accum_data(x, dx);
                }
            }
            Op::CosineRows { a, b } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, n) = (av.rows(), av.cols());
                let eps = S::from64(COS_EPS);
                let mut da = Tensor::zeros(vec![m, n]);
                let mut db = Tensor::zeros(vec![m, n]);
                for i in 0..m {
                    let ar = &av.data()[i * n..(i + 1) * n];
                    let br = &bv.data()[i * n..(i + 1) * n];
                    let di = d.data()[i];
                    let na = dot(ar, ar).sqrt();
                    let nb = dot(br, br).sqrt();
                    let raw = na * nb;
                    if raw > eps {
                        let num = dot(ar, br);
                        let inv = raw.recip();
                        let c = num * inv;
                        for j in 0..n {
                            da.data_mut()[i * n + j] = di * (br[j] * inv - c * ar[j] / (na * na));
                            db.data_mut()[i * n + j] = di * (ar[j] * inv - c * br[j] / (nb * nb));
                        }
                    } else {
                        // Floored region: denominator is the constant eps.
                        let inv = eps.recip();
                        for j in 0..n {
                            da.data_mut()[i * n + j] = di * br[j] * inv;
                            db.data_mut()[i * n + j] = di * ar[j] * inv;
                        }
                    }
                }
                if self.needs(a) {
                    self.accum_data(a, da);
                }
                if self.needs(b) {
                    self.accum_data(b, db);
                }
            }
            Op::CeRows { logits, targets, probs } => {
                if self.needs(logits) {
                    let v = self.nodes[logits.0].value.cols();
                    let mut dl = Tensor::zeros(vec![targets.len(), v]);
                    for (i, &t) in targets.iter().enumerate() {
                        let di = d.data()[i];
                        let prow = &probs[i * v..(i + 1) * v];
                        let drow = &mut dl.data_mut()[i * v..(i + 1) * v];
                        for j in 0..v {
                            drow[j] = di * prow[j];
                        }
                        drow[t] = drow[t] - di;
                    }
                    self.accum_data(logits, dl);
                }
            }
            Op::HuberVs { x, target, delta } => {
                if self.needs(x) {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = Tensor::zeros(xv.shape().to_vec());
                    for ((g, &v), (&t, &di)) in dx
                        .data_mut()
                        .iter_mut()
                        .zip(xv.data())
                        .zip(target.data().iter().zip(d.data()))
                    {
                        let e = v - t;
                        *g = di * e.max(-delta).min(delta);
                    }
                    self.accum_data(x, dx);
                }
            }
            Op::ConcatCols { parts } => {
                let total = d.cols();
                let m = d.rows();
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.cols();
                    if self.needs(p) {
                        let mut dp = Tensor::zeros(vec![m, w]);
                        for i in 0..m {
                            dp.data_mut()[i * w..(i + 1) * w]
                                .copy_from_slice(&d.data()[i * total + off..i * total + off + w]);
                        }
                        self.accum_data(p, dp);
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs(x) {
                    let xv = &self.nodes[x.0].value;
                    let (m, n) = (xv.rows(), xv.cols());
                    let w = d.cols();
                    let mut dx = Tensor::zeros(vec![m, n]);
                    for i in 0..m {
                        dx.data_mut()[i * n + start..i * n + start + w]
                            .copy_from_slice(&d.data()[i * w..(i + 1) * w]);
                    }
                    self.accum_data(x, dx);
                }
            }
            Op::SliceRows { x, start } => {
                if self.needs(x) {
                    let xv = &self.nodes[x.0].value;
                    let (m, n) = (xv.rows(), xv.cols());
                    let mut dx = Tensor::zeros(vec![m, n]);
                    dx.data_mut()[start * n..start * n + d.numel()].copy_from_slice(d.data());
                    self.accum_data(x, dx);
                }
            }
            Op::StraightThrough { p } => {
                if self.needs(p) {
                    self.accum_data(p, d);
                }
            }
            Op::Embed { table, ids } => {
                if self.needs(table) {
                    let tv = &self.nodes[table.0].value;
                    let (v, w) = (tv.rows(), tv.cols());
                    let mut dt = Tensor::zeros(vec![v, w]);
                    for (i, &id) in ids.iter().enumerate() {
                        let src = &d.data()[i * w..(i + 1) * w];
                        let dst = &mut dt.data_mut()[id * w..(id + 1) * w];
                        for (gd, &sv) in dst.iter_mut().zip(src) {
                            *gd = *gd + sv;
                        }
                    }
                    self.accum_data(table, dt);
                }
            }
            Op::MeanAll { x } => {
                if self.needs(x) {
                    let xv = &self.nodes[x.0].value;
                    let g = d.item() * S::from64(1.0 / xv.numel() as f64);
                    let dx = Tensor::new(xv.shape().to_vec(), vec![g; xv.numel()]);
                    self.accum_data(x, dx);
                }
            }
            Op::SumAll { x } => {
                if self.needs(x) {
                    let xv = &self.nodes[x.0].value;
                    let dx = Tensor::new(xv.shape().to_vec(), vec![d.item(); xv.numel()]);
                    self.accum_data(x, dx);
                }
            }
            Op::Gather { x, idx } => {
                if self.needs(x) {
                    let mut dx = Tensor::zeros(self.nodes[x.0].value.shape().to_vec());
                    for (j, &i) in idx.iter().enumerate() {
                        dx.data_mut()[i] = dx.data_mut()[i] + d.data()[j];
                    }
                    self.accum_data(x, dx);
                }
            }
            Op::GatherRows { x, idx } => {
                if self.needs(x) {
                    let xv = &self.nodes[x.0].value;
                    let n = xv.cols();
                    let mut dx = Tensor::zeros(xv.shape().to_vec());
                    for (j, &i) in idx.iter().enumerate() {
                        let src = &d.data()[j * n..(j + 1) * n];
                        let dst = &mut dx.data_mut()[i * n..(i + 1) * n];
                        for (gd, &sv) in dst.iter_mut().zip(src) {
                            *gd = *gd + sv;
                        }
                    }
                    self.accum_data(x, dx);
                }
            }
            Op::ScatterRows { x, idx } => {
                if self.needs(x) {
                    let n = d.cols();
                    let mut dx = Tensor::zeros(vec![idx.len(), n]);
                    for (j, &i) in idx.iter().enumerate() {
                        dx.data_mut()[j * n..(j + 1) * n]
                            .copy_from_slice(&d.data()[i * n..(i + 1) * n]);
                    }
                    self.accum_data(x, dx);
                }
            }
            Op::Transpose { x } => {
                if self.needs(x) {
                    let (m, n) = (d.rows(), d.cols());
                    let mut dx = Tensor::zeros(vec![n, m]);
                    for i in 0..m {
                        for j in 0..n {
                            dx.data_mut()[j * m + i] = d.data()[i * n + j];
                        }
                    }
                    self.accum_data(x, dx);
                }
            }
            Op::BroadcastRow { v } => {
                if self.needs(v) {
                    let n = self.nodes[v.0].value.numel();
                    let mut dv = Tensor::zeros(vec![n]);
                    for row in d.data().chunks_exact(n) {
                        for (g, &x) in dv.data_mut().iter_mut().zip(row) {
                            *g = *g + x;
                        }
                    }
                    self.accum_data(v, dv);
                }
            }
            Op::RowScale { x, s } => {
                let xv = &self.nodes[x.0].value;
                let sv = &self.nodes[s.0].value;
                let (m, n) = (xv.rows(), xv.cols());
                let dx = self.needs(x).then(|| {
                    let mut dx = Tensor::zeros(vec![m, n]);
                    for i in 0..m {
                        let si = sv.data()[i];
                        for j in 0..n {
                            dx.data_mut()[i * n + j] = d.data()[i * n + j] * si;
                        }
                    }
                    dx
                });
                let ds = self.needs(s).then(|| {
                    let mut ds = Tensor::zeros(vec![m]);
                    for i in 0..m {
                        ds.data_mut()[i] =
                            dot(&d.data()[i * n..(i + 1) * n], &xv.data()[i * n..(i + 1) * n]);
                    }
                    ds
                });
                if let Some(dx) = dx {
                    self.accum_data(x, dx);
                }
                if let Some(ds) = ds {
                    self.accum_data(s, ds);
                }
            }
            Op::Reshape { x } => {
                if self.needs(x) {
                    let dx = Tensor::new(self.nodes[x.0].value.shape().to_vec(), d.data().to_vec());
                    self.accum_data(x, dx);
                }
            }
        }
    }
}

// ── scalar helpers ──────────────────────────────────────────────────────────

#[inline]
fn sigmoid_s<S: Scalar>(x: S) -> S {
    // Split on sign so exp never overflows.
    if x >= S::zero() {
        (S::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[inline]
fn softplus_s<S: Scalar>(x: S) -> S {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|)
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

fn map_new<S: Scalar>(t: &Tensor<S>, f: impl Fn(S) -> S) -> Tensor<S> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip_new<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}
