//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Every node holds a 2-D value (`rows × cols`, where `rows` folds all leading
//! axes). Ops are coarse: a whole linear layer, layer norm, or multi-head causal
//! attention is one node with a hand-written backward pass. Values are kept on
//! the tape until the graph is dropped.

use crate::tensor::{gemm, MatMut, MatRef, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Key-padding and causal structure for [`Graph::causal_attention`].
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    /// `batch*seq` flags, `true` for real (attendable) tokens. `None` = all real.
    pub key_valid: Option<Vec<bool>>,
}

enum Op<F> {
    Leaf,
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Scale { x: NodeId, s: F },
    MulConst { x: NodeId, factors: Vec<F> },
    RowScale { x: NodeId, scales: Vec<F> },
    Gelu { x: NodeId },
    Tanh { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, stats: Vec<(F, F)> },
    Attention { q: NodeId, k: NodeId, v: NodeId, layout: AttentionLayout, probs: Vec<F> },
    Embedding { table: NodeId, ids: Vec<usize> },
    GatherRows { inputs: Vec<NodeId>, map: Vec<(usize, usize)> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, weights: Vec<F>, probs: Vec<F> },
    SquaredError { pred: NodeId, target: Vec<F>, weights: Vec<F> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Computation tape.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn as2d<F: Scalar>(t: Tensor<F>) -> Tensor<F> {
    let (r, c) = (t.rows(), t.cols());
    t.reshape(&[r, c]).expect("same numel")
}

fn gelu_parts<F: Scalar>(x: F) -> (F, F) {
    // tanh approximation used by GPT-2
    let c = F::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = F::from_f64_lossy(0.044715);
    let half = F::from_f64_lossy(0.5);
    let one = F::one();
    let three = F::from_f64_lossy(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + three * k * x * x);
    (y, dy)
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.rg(id)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// `x · wᵀ + b` with `w` laid out `[out, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, inp) = (xv.rows(), xv.cols());
        let out = wv.shape()[0];
        assert_eq!(wv.cols(), inp, "linear: input width {} vs weight {:?}", inp, wv.shape());
        let mut y = Tensor::zeros(&[n, out]);
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), out, "linear: bias length");
            for row in y.data_mut().chunks_mut(out) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { F::one() } else { F::zero() };
        gemm(F::one(), xv.as_mat(), wv.as_mat().t(), beta, MatMut::new(y.data_mut(), n, out));
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(y, Op::Linear { x, w, b }, rg)
    }

    /// Plain 2-D product `a · b`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.cols(), bv.rows(), "matmul inner dims");
        let (m, n) = (av.rows(), bv.cols());
        let mut y = Tensor::zeros(&[m, n]);
        gemm(F::one(), av.as_mat(), bv.as_mat(), F::zero(), MatMut::new(y.data_mut(), m, n));
        let rg = self.rg(a) || self.rg(b);
        self.push(y, Op::MatMul { a, b }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.numel(), bv.numel(), "add: {:?} vs {:?}", av.shape(), bv.shape());
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let y = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(y, Op::Add { a, b }, rg)
    }

    pub fn scale(&mut self, x: NodeId, s: F) -> NodeId {
        let y = self.value(x).scale(s);
        let rg = self.rg(x);
        self.push(y, Op::Scale { x, s }, rg)
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, x: NodeId, factors: Vec<F>) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.numel(), factors.len());
        let data = xv.data().iter().zip(&factors).map(|(&a, &f)| a * f).collect();
        let y = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(y, Op::MulConst { x, factors }, rg)
    }

    /// Multiplies row `i` by `scales[i]`.
    pub fn row_scale(&mut self, x: NodeId, scales: Vec<F>) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.rows(), scales.len());
        let c = xv.cols();
        let mut y = xv.clone();
        for (row, &s) in y.data_mut().chunks_mut(c).zip(&scales) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let rg = self.rg(x);
        self.push(y, Op::RowScale { x, scales }, rg)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu_parts(v).0).collect();
        let y = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(y, Op::Gelu { x }, rg)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.tanh()).collect();
        let y = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(y, Op::Tanh { x }, rg)
    }

    /// Row-wise layer norm with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let c = xv.cols();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        assert_eq!(g.len(), c);
        let eps = F::from_f64_lossy(LAYER_NORM_EPS);
        let cf = F::from_usize(c).expect("width");
        let mut y = xv.clone();
        let mut stats = Vec::with_capacity(xv.rows());
        for row in y.data_mut().chunks_mut(c) {
            let mean = row.iter().copied().sum::<F>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cf;
            let rstd = F::one() / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[j] + b[j];
            }
            stats.push((mean, rstd));
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(y, Op::LayerNorm { x, gain, bias, stats }, rg)
    }

    /// Multi-head causal self-attention on already-projected `q`, `k`, `v`
    /// (each `[batch*seq, d_model]`). Query `i` attends to keys `j ≤ i` that are
    /// marked valid; a query with no attendable key produces a zero row.
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: AttentionLayout,
    ) -> NodeId {
        let AttentionLayout { batch, seq, heads, .. } = layout;
        let d = self.value(q).cols();
        assert_eq!(self.value(q).rows(), batch * seq, "attention rows");
        assert_eq!(d % heads, 0);
        let hd = d / heads;
        let scale = F::one() / F::from_usize(hd).expect("head dim").sqrt();
        let mut probs = vec![F::zero(); batch * heads * seq * seq];
        let mut out = Tensor::zeros(&[batch * seq, d]);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for bi in 0..batch {
            for h in 0..heads {
                let off = bi * seq * d + h * hd;
                let p = &mut probs[(bi * heads + h) * seq * seq..(bi * heads + h + 1) * seq * seq];
                gemm(
                    scale,
                    MatRef::block(qd, off, seq, hd, d),
                    MatRef::block(kd, off, seq, hd, d).t(),
                    F::zero(),
                    MatMut::new(p, seq, seq),
                );
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    let allowed = |j: usize| {
                        j <= i
                            && layout.key_valid.as_ref().is_none_or(|m| m[bi * seq + j])
                    };
                    let mut max = F::neg_infinity();
                    for (j, &s) in row.iter().enumerate() {
                        if allowed(j) && s > max {
                            max = s;
                        }
                    }
                    if max == F::neg_infinity() {
                        row.iter_mut().for_each(|s| *s = F::zero());
                        continue;
                    }
                    let mut total = F::zero();
                    for (j, s) in row.iter_mut().enumerate() {
                        if allowed(j) {
                            *s = (*s - max).exp();
                            total += *s;
                        } else {
                            *s = F::zero();
                        }
                    }
                    row.iter_mut().for_each(|s| *s = *s / total);
                }
                gemm(
                    F::one(),
                    MatRef::new(p, seq, seq),
                    MatRef::block(vd, off, seq, hd, d),
                    F::zero(),
                    MatMut::block(out.data_mut(), off, seq, hd, d),
                );
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(out, Op::Attention { q, k, v, layout, probs }, rg)
    }

    /// Row lookup `table[ids[i]]`.
    pub fn embedding(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        let tv = self.value(table);
        let (rows, c) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in &ids {
            assert!(id < rows, "embedding id {id} out of range {rows}");
            data.extend_from_slice(tv.row(id));
        }
        let y = Tensor::new(vec![ids.len(), c], data).expect("shape");
        let rg = self.rg(table);
        self.push(y, Op::Embedding { table, ids }, rg)
    }

    /// Builds a matrix whose row `r` is row `map[r].1` of input `map[r].0`.
    pub fn gather_rows(&mut self, inputs: Vec<NodeId>, map: Vec<(usize, usize)>) -> NodeId {
        let c = self.value(inputs[0]).cols();
        assert!(inputs.iter().all(|&i| self.value(i).cols() == c), "gather_rows widths");
        let mut data = Vec::with_capacity(map.len() * c);
        for &(src, r) in &map {
            data.extend_from_slice(self.value(inputs[src]).row(r));
        }
        let y = Tensor::new(vec![map.len(), c], data).expect("shape");
        let rg = inputs.iter().any(|&i| self.rg(i));
        self.push(y, Op::GatherRows { inputs, map }, rg)
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[t_i])` as a 1-element tensor.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>, weights: Vec<F>) -> NodeId {
        let lv = self.value(logits);
        let (n, c) = (lv.rows(), lv.cols());
        assert_eq!(targets.len(), n);
        assert_eq!(weights.len(), n);
        let mut probs = vec![F::zero(); n * c];
        let mut total = F::zero();
        for i in 0..n {
            let row = lv.row(i);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * c + j] = e;
                z += e;
            }
            probs[i * c..(i + 1) * c].iter_mut().for_each(|p| *p = *p / z);
            assert!(targets[i] < c, "target {} out of range {c}", targets[i]);
            let nll = z.ln() + max - row[targets[i]];
            if weights[i] != F::zero() {
                total += weights[i] * nll;
            }
        }
        let rg = self.rg(logits);
        self.push(Tensor::scalar(total), Op::CrossEntropy { logits, targets, weights, probs }, rg)
    }

    /// `Σ_i w_i · ‖pred_i − target_i‖²` as a 1-element tensor.
    pub fn squared_error(&mut self, pred: NodeId, target: Vec<F>, weights: Vec<F>) -> NodeId {
        let pv = self.value(pred);
        assert_eq!(pv.numel(), target.len());
        let c = pv.cols();
        assert_eq!(weights.len(), pv.rows());
        let mut total = F::zero();
        for (i, &w) in weights.iter().enumerate() {
            if w == F::zero() {
                continue;
            }
            let row = pv.row(i);
            let err: F = row
                .iter()
                .zip(&target[i * c..(i + 1) * c])
                .map(|(&p, &t)| (p - t) * (p - t))
                .sum();
            total += w * err;
        }
        let rg = self.rg(pred);
        self.push(Tensor::scalar(total), Op::SquaredError { pred, target, weights }, rg)
    }

    /// Accumulated gradient of the last `backward` root w.r.t. `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    fn accumulate(&mut self, id: NodeId, g: Tensor<F>) {
        if !self.rg(id) {
            return;
        }
        match &mut self.grads[id.0] {
            Some(existing) => existing.add_assign_scaled(&g, F::one()),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse sweep from a scalar `root`. Leaf gradients stay available via
    /// [`Graph::grad`]; intermediate gradients are released as the sweep passes.
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(self.value(root).numel(), 1, "backward root must be scalar");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(root) {
            return;
        }
        self.grads[root.0] = Some(Tensor::full(self.value(root).shape(), F::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gy) = self.grads[i].take() else { continue };
            self.backward_node(i, as2d(gy));
        }
    }

    fn backward_node(&mut self, i: usize, gy: Tensor<F>) {
        // Temporarily move the op out so that inputs can be read while grads accumulate.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, out) = (gy.rows(), gy.cols());
                if self.rg(*x) {
                    let wv = self.value(*w);
                    let inp = wv.cols();
                    let mut dx = Tensor::zeros(&[n, inp]);
                    gemm(F::one(), gy.as_mat(), wv.as_mat(), F::zero(), MatMut::new(dx.data_mut(), n, inp));
                    let dx = dx.reshape(self.value(*x).shape()).expect("shape");
                    self.accumulate(*x, dx);
                }
                if self.rg(*w) {
                    let xv = self.value(*x);
                    let inp = xv.cols();
                    let mut dw = Tensor::zeros(&[out, inp]);
                    gemm(F::one(), gy.as_mat().t(), xv.as_mat(), F::zero(), MatMut::new(dw.data_mut(), out, inp));
                    let dw = dw.reshape(self.value(*w).shape()).expect("shape");
                    self.accumulate(*w, dw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![F::zero(); out];
                        for row in gy.data().chunks(out) {
                            for (d, &g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        let db = Tensor::new(self.value(*b).shape().to_vec(), db).expect("shape");
                        self.accumulate(*b, db);
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (m, n) = (gy.rows(), gy.cols());
                if self.rg(*a) {
                    let bv = self.value(*b);
                    let k = bv.rows();
                    let mut da = Tensor::zeros(&[m, k]);
                    gemm(F::one(), gy.as_mat(), bv.as_mat().t(), F::zero(), MatMut::new(da.data_mut(), m, k));
                    let da = da.reshape(self.value(*a).shape()).expect("shape");
                    self.accumulate(*a, da);
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    let k = av.cols();
                    let mut db = Tensor::zeros(&[k, n]);
                    gemm(F::one(), av.as_mat().t(), gy.as_mat(), F::zero(), MatMut::new(db.data_mut(), k, n));
                    let db = db.reshape(self.value(*b).shape()).expect("shape");
                    self.accumulate(*b, db);
                }
            }
            Op::Add { a, b } => {
                for id in [*a, *b] {
                    if self.rg(id) {
                        let g = gy.clone().reshape(self.value(id).shape()).expect("shape");
                        self.accumulate(id, g);
                    }
                }
            }
            Op::Scale { x, s } => {
                let g = gy.scale(*s).reshape(self.value(*x).shape()).expect("shape");
                self.accumulate(*x, g);
            }
            Op::MulConst { x, factors } => {
                let data = gy.data().iter().zip(factors).map(|(&g, &f)| g * f).collect();
                let g = Tensor::new(self.value(*x).shape().to_vec(), data).expect("shape");
                self.accumulate(*x, g);
            }
            Op::RowScale { x, scales } => {
                let c = gy.cols();
                let mut g = gy;
                for (row, &s) in g.data_mut().chunks_mut(c).zip(scales) {
                    row.iter_mut().for_each(|v| *v *= s);
                }
                let g = g.reshape(self.value(*x).shape()).expect("shape");
                self.accumulate(*x, g);
            }
            Op::Gelu { x } => {
                let xv = self.value(*x);
                let data = gy
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &v)| g * gelu_parts(v).1)
                    .collect();
                let g = Tensor::new(xv.shape().to_vec(), data).expect("shape");
                self.accumulate(*x, g);
            }
            Op::Tanh { x } => {
                let yv = self.value(NodeId(i));
                let data = gy
                    .data()
                    .iter()
                    .zip(yv.data())
                    .map(|(&g, &y)| g * (F::one() - y * y))
                    .collect();
                let g = Tensor::new(self.value(*x).shape().to_vec(), data).expect("shape");
                self.accumulate(*x, g);
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let cf = F::from_usize(c).expect("width");
                let gv = self.value(*gain).data();
                let mut dx = vec![F::zero(); xv.numel()];
                let mut dg = vec![F::zero(); c];
                let mut db = vec![F::zero(); c];
                let mut xhat = vec![F::zero(); c];
                let mut dxhat = vec![F::zero(); c];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let xr = xv.row(r);
                    let gr = &gy.data()[r * c..(r + 1) * c];
                    for j in 0..c {
                        xhat[j] = (xr[j] - mean) * rstd;
                        dg[j] += gr[j] * xhat[j];
                        db[j] += gr[j];
                        dxhat[j] = gr[j] * gv[j];
                    }
                    let m1 = dxhat.iter().copied().sum::<F>() / cf;
                    let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<F>() / cf;
                    for j in 0..c {
                        dx[r * c + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                let xs = xv.shape().to_vec();
                let gs = self.value(*gain).shape().to_vec();
                let bs = self.value(*bias).shape().to_vec();
                self.accumulate(*x, Tensor::new(xs, dx).expect("shape"));
                self.accumulate(*gain, Tensor::new(gs, dg).expect("shape"));
                self.accumulate(*bias, Tensor::new(bs, db).expect("shape"));
            }
            Op::Attention { q, k, v, layout, probs } => {
                let AttentionLayout { batch, seq, heads, .. } = *layout;
                let d = gy.cols();
                let hd = d / heads;
                let scale = F::one() / F::from_usize(hd).expect("head dim").sqrt();
                let (qd, kd, vd) =
                    (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = Tensor::zeros(&[batch * seq, d]);
                let mut dk = Tensor::zeros(&[batch * seq, d]);
                let mut dv = Tensor::zeros(&[batch * seq, d]);
                let mut dp = vec![F::zero(); seq * seq];
                for bi in 0..batch {
                    for h in 0..heads {
                        let off = bi * seq * d + h * hd;
                        let p = &probs[(bi * heads + h) * seq * seq..(bi * heads + h + 1) * seq * seq];
                        let go = MatRef::block(gy.data(), off, seq, hd, d);
                        // dV = Pᵀ dO
                        gemm(F::one(), MatRef::new(p, seq, seq).t(), go, F::zero(), MatMut::block(dv.data_mut(), off, seq, hd, d));
                        // dP = dO Vᵀ
                        gemm(F::one(), go, MatRef::block(vd, off, seq, hd, d).t(), F::zero(), MatMut::new(&mut dp, seq, seq));
                        // dS = P ⊙ (dP − rowsum(P ⊙ dP)), folded with the 1/√hd factor
                        for i in 0..seq {
                            let pr = &p[i * seq..(i + 1) * seq];
                            let dr = &mut dp[i * seq..(i + 1) * seq];
                            let dot: F = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                            for (ds, &pv) in dr.iter_mut().zip(pr) {
                                *ds = pv * (*ds - dot) * scale;
                            }
                        }
                        gemm(F::one(), MatRef::new(&dp, seq, seq), MatRef::block(kd, off, seq, hd, d), F::zero(), MatMut::block(dq.data_mut(), off, seq, hd, d));
                        gemm(F::one(), MatRef::new(&dp, seq, seq).t(), MatRef::block(qd, off, seq, hd, d), F::zero(), MatMut::block(dk.data_mut(), off, seq, hd, d));
                    }
                }
                let (qs, ks, vs) = (
                    self.value(*q).shape().to_vec(),
                    self.value(*k).shape().to_vec(),
                    self.value(*v).shape().to_vec(),
                );
                self.accumulate(*q, dq.reshape(&qs).expect("shape"));
                self.accumulate(*k, dk.reshape(&ks).expect("shape"));
                self.accumulate(*v, dv.reshape(&vs).expect("shape"));
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let c = tv.cols();
                let mut dt = Tensor::zeros(tv.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt.data_mut()[id * c..(id + 1) * c];
                    for (d, &g) in dst.iter_mut().zip(&gy.data()[r * c..(r + 1) * c]) {
                        *d += g;
                    }
                }
                self.accumulate(*table, dt);
            }
            Op::GatherRows { inputs, map } => {
                let c = gy.cols();
                let mut parts: Vec<Option<Tensor<F>>> = inputs
                    .iter()
                    .map(|&id| self.rg(id).then(|| Tensor::zeros(self.value(id).shape())))
                    .collect();
                for (r, &(src, row)) in map.iter().enumerate() {
                    if let Some(part) = parts[src].as_mut() {
                        let dst = &mut part.data_mut()[row * c..(row + 1) * c];
                        for (d, &g) in dst.iter_mut().zip(&gy.data()[r * c..(r + 1) * c]) {
                            *d += g;
                        }
                    }
                }
                for (&id, part) in inputs.iter().zip(parts) {
                    if let Some(part) = part {
                        self.accumulate(id, part);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let g0 = gy.data()[0];
                let c = self.value(*logits).cols();
                let mut dl = probs.clone();
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let row = &mut dl[r * c..(r + 1) * c];
                    row[t] -= F::one();
                    let s = w * g0;
                    row.iter_mut().for_each(|v| *v *= s);
                }
                let shape = self.value(*logits).shape().to_vec();
                self.accumulate(*logits, Tensor::new(shape, dl).expect("shape"));
            }
            Op::SquaredError { pred, target, weights } => {
                let g0 = gy.data()[0];
                let pv = self.value(*pred);
                let c = pv.cols();
                let two = F::from_f64_lossy(2.0);
                let mut dp = vec![F::zero(); pv.numel()];
                for (r, &w) in weights.iter().enumerate() {
                    for j in 0..c {
                        let idx = r * c + j;
                        dp[idx] = two * w * g0 * (pv.data()[idx] - target[idx]);
                    }
                }
                let shape = pv.shape().to_vec();
                self.accumulate(*pred, Tensor::new(shape, dp).expect("shape"));
            }
        }
        self.nodes[i].op = op;
    }
}
