//! Reverse-mode tape over a fixed set of primitives.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep. A node is
//! *tracked* when any of its inputs is tracked; untracked nodes never receive
//! gradient storage.

use super::linalg::gemm_acc;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Elementwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "silu" => Some(Activation::Silu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Act { x: Var, act: Activation },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SumSquares(Var),
    Mean(Var),
    Dot(Var, Var),
    RowNorms(Var),
    Combine(Vec<(Var, f64)>),
    SoftmaxWeightedSum { logits: Var, values: Var },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
    /// Cached softmax weights for `SoftmaxWeightedSum`.
    aux: Vec<f64>,
}

/// A single-use computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, tracked: bool) -> Var {
        self.push_aux(shape, value, op, tracked, Vec::new())
    }

    fn push_aux(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, tracked: bool, aux: Vec<f64>) -> Var {
        self.nodes.push(Node { shape, value, op, tracked, aux });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Untracked leaf; gradients never flow into it.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, false)
    }

    pub fn constant_values(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::dim(&[n], &[values.len()]));
        }
        Ok(self.push(shape, values, Op::Leaf, false))
    }

    /// Leaf tracked according to the tensor's `requires_grad` flag.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Leaf with an explicit tracking choice (used when binding parameters).
    pub fn leaf(&mut self, t: &Tensor, tracked: bool) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, tracked)
    }

    /// Same values, no gradient path back to `v`.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.node(v).tracked
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node invariant")
    }

    /// `x[B,in] · w[in,out] + b[out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(Error::Dimension { expected: vec![xs.first().copied().unwrap_or(0), ws[0]], got: xs });
        }
        let (rows, k, n) = (xs[0], ws[0], ws[1]);
        let bias = &self.node(b).value;
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        gemm_acc(rows, k, n, &self.node(x).value, false, &self.node(w).value, false, &mut out);
        let tracked = self.is_tracked(x) || self.is_tracked(w) || self.is_tracked(b);
        Ok(self.push(vec![rows, n], out, Op::Affine { x, w, b }, tracked))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let n = self.node(x);
        let value = n.value.iter().map(|&v| act.apply(v)).collect();
        let (shape, tracked) = (n.shape.clone(), n.tracked);
        self.push(shape, value, Op::Act { x, act }, tracked)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape != nb.shape {
            return Err(Error::dim(&na.shape, &nb.shape));
        }
        let value = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        let (shape, tracked) = (na.shape.clone(), na.tracked || nb.tracked);
        Ok(self.push(shape, value, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let n = self.node(x);
        let value = n.value.iter().map(|v| v * c).collect();
        let (shape, tracked) = (n.shape.clone(), n.tracked);
        self.push(shape, value, Op::Scale(x, c), tracked)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let s = n.value.iter().sum();
        let tracked = n.tracked;
        self.push(vec![], vec![s], Op::Sum(x), tracked)
    }

    /// `Σ x²` over all elements.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let s = n.value.iter().map(|v| v * v).sum();
        let tracked = n.tracked;
        self.push(vec![], vec![s], Op::SumSquares(x), tracked)
    }

    /// Mean over all elements.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let s = n.value.iter().sum::<f64>() / n.value.len().max(1) as f64;
        let tracked = n.tracked;
        self.push(vec![], vec![s], Op::Mean(x), tracked)
    }

    /// `Σ a·b` over all elements.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape != nb.shape {
            return Err(Error::dim(&na.shape, &nb.shape));
        }
        let s = na.value.iter().zip(&nb.value).map(|(x, y)| x * y).sum();
        let tracked = na.tracked || nb.tracked;
        Ok(self.push(vec![], vec![s], Op::Dot(a, b), tracked))
    }

    /// Euclidean norm of each row of a `[B,d]` node, giving `[B]`.
    pub fn row_norms(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let d = n.shape.last().copied().unwrap_or(1).max(1);
        let value: Vec<f64> = n.value.chunks(d).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let tracked = n.tracked;
        let rows = value.len();
        self.push(vec![rows], value, Op::RowNorms(x), tracked)
    }

    /// Weighted sum of scalar nodes.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        let mut tracked = false;
        for &(v, c) in terms {
            let n = self.node(v);
            if n.value.len() != 1 {
                return Err(Error::dim(&[], &n.shape));
            }
            s += c * n.value[0];
            tracked |= n.tracked;
        }
        Ok(self.push(vec![], vec![s], Op::Combine(terms.to_vec()), tracked))
    }

    /// Row-wise softmax of `logits[B,M]` used to average `values[M,d]`, giving `[B,d]`.
    pub fn softmax_weighted_sum(&mut self, logits: Var, values: Var) -> Result<Var> {
        let (nl, nv) = (self.node(logits), self.node(values));
        if nl.shape.len() != 2 || nv.shape.len() != 2 || nl.shape[1] != nv.shape[0] {
            return Err(Error::dim(&nl.shape, &nv.shape));
        }
        let (b, m, d) = (nl.shape[0], nl.shape[1], nv.shape[1]);
        let mut weights = vec![0.0; b * m];
        for i in 0..b {
            let row = &nl.value[i * m..(i + 1) * m];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w = &mut weights[i * m..(i + 1) * m];
            let mut z = 0.0;
            for (wj, &l) in w.iter_mut().zip(row) {
                *wj = (l - mx).exp();
                z += *wj;
            }
            w.iter_mut().for_each(|v| *v /= z);
        }
        let mut out = vec![0.0; b * d];
        gemm_acc(b, m, d, &weights, false, &nv.value, false, &mut out);
        let tracked = nl.tracked || nv.tracked;
        Ok(self.push_aux(vec![b, d], out, Op::SoftmaxWeightedSum { logits, values }, tracked, weights))
    }

    /// Reverse sweep from a scalar. Gradients from any previous call are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.node(loss).tracked {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].tracked {
            return;
        }
        let len = self.nodes[v.0].shape.iter().product::<usize>();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(buf);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Borrow juggling: ops are small and cloned out so `acc` can take &mut self.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let (rows, k) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let n = self.nodes[w.0].shape[1];
                if self.nodes[x.0].tracked {
                    let wv = std::mem::take(&mut self.nodes[w.0].value);
                    self.acc(x, |buf| gemm_acc(rows, n, k, g, false, &wv, true, buf));
                    self.nodes[w.0].value = wv;
                }
                if self.nodes[w.0].tracked {
                    let xv = std::mem::take(&mut self.nodes[x.0].value);
                    self.acc(w, |buf| gemm_acc(k, rows, n, &xv, true, g, false, buf));
                    self.nodes[x.0].value = xv;
                }
                self.acc(b, |buf| {
                    for r in g.chunks(n) {
                        buf.iter_mut().zip(r).for_each(|(a, v)| *a += v);
                    }
                });
            }
            Op::Act { x, act } => {
                let (x, act) = (*x, *act);
                let xv = std::mem::take(&mut self.nodes[x.0].value);
                self.acc(x, |buf| {
                    for ((a, &gi), &xi) in buf.iter_mut().zip(g).zip(&xv) {
                        *a += gi * act.derivative(xi);
                    }
                });
                self.nodes[x.0].value = xv;
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, |buf| buf.iter_mut().zip(g).for_each(|(p, v)| *p += v));
                self.acc(b, |buf| buf.iter_mut().zip(g).for_each(|(p, v)| *p += v));
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, |buf| buf.iter_mut().zip(g).for_each(|(p, v)| *p += v));
                self.acc(b, |buf| buf.iter_mut().zip(g).for_each(|(p, v)| *p -= v));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                self.acc(a, |buf| {
                    for ((p, gi), y) in buf.iter_mut().zip(g).zip(&bv) {
                        *p += gi * y;
                    }
                });
                self.acc(b, |buf| {
                    for ((p, gi), x) in buf.iter_mut().zip(g).zip(&av) {
                        *p += gi * x;
                    }
                });
            }
            Op::Scale(x, c) => {
                let (x, c) = (*x, *c);
                self.acc(x, |buf| buf.iter_mut().zip(g).for_each(|(p, v)| *p += c * v));
            }
            Op::Sum(x) => {
                let x = *x;
                self.acc(x, |buf| buf.iter_mut().for_each(|p| *p += g[0]));
            }
            Op::SumSquares(x) => {
                let x = *x;
                let xv = std::mem::take(&mut self.nodes[x.0].value);
                self.acc(x, |buf| buf.iter_mut().zip(&xv).for_each(|(p, v)| *p += 2.0 * v * g[0]));
                self.nodes[x.0].value = xv;
            }
            Op::Mean(x) => {
                let x = *x;
                let n = self.nodes[x.0].value.len().max(1) as f64;
                self.acc(x, |buf| buf.iter_mut().for_each(|p| *p += g[0] / n));
            }
            Op::Dot(a, b) => {
                let (a, b) = (*a, *b);
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                self.acc(a, |buf| buf.iter_mut().zip(&bv).for_each(|(p, y)| *p += g[0] * y));
                self.acc(b, |buf| buf.iter_mut().zip(&av).for_each(|(p, x)| *p += g[0] * x));
            }
            Op::RowNorms(x) => {
                let x = *x;
                let norms = self.nodes[i].value.clone();
                let xv = std::mem::take(&mut self.nodes[x.0].value);
                let d = self.nodes[x.0].shape.last().copied().unwrap_or(1).max(1);
                self.acc(x, |buf| {
                    for (r, (brow, xrow)) in buf.chunks_mut(d).zip(xv.chunks(d)).enumerate() {
                        // The norm is not differentiable at the origin; use the zero subgradient.
                        if norms[r] > 0.0 {
                            for (p, v) in brow.iter_mut().zip(xrow) {
                                *p += g[r] * v / norms[r];
                            }
                        }
                    }
                });
                self.nodes[x.0].value = xv;
            }
            Op::Combine(terms) => {
                let terms = terms.clone();
                for (v, c) in terms {
                    self.acc(v, |buf| buf[0] += c * g[0]);
                }
            }
            Op::SoftmaxWeightedSum { logits, values } => {
                let (logits, values) = (*logits, *values);
                let (b, m) = (self.nodes[logits.0].shape[0], self.nodes[logits.0].shape[1]);
                let d = self.nodes[values.0].shape[1];
                let weights = self.nodes[i].aux.clone();
                let out = self.nodes[i].value.clone();
                let vals = self.nodes[values.0].value.clone();
                self.acc(values, |buf| gemm_acc(m, b, d, &weights, true, g, false, buf));
                self.acc(logits, |buf| {
                    // d out_b / d l_bj = w_bj (v_j - out_b)
                    let mut gv = vec![0.0; b * m];
                    gemm_acc(b, d, m, g, false, &vals, true, &mut gv);
                    for r in 0..b {
                        let go: f64 = g[r * d..(r + 1) * d].iter().zip(&out[r * d..(r + 1) * d]).map(|(x, y)| x * y).sum();
                        for j in 0..m {
                            buf[r * m + j] += weights[r * m + j] * (gv[r * m + j] - go);
                        }
                    }
                });
            }
        }
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v` is tracked.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to `v`, zeros when nothing reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; self.node(v).value.len()])
    }

    /// Adds the gradient for `v` into the tensor's own gradient buffer.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        t.accumulate_grad(&self.grad_or_zeros(v))
    }
}
