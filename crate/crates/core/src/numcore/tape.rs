//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to the
//! owning [`Tape`]. [`Tape::backward`] walks the nodes in reverse recording
//! order and accumulates gradients into the leaves created with
//! [`Tape::param`]. Leaf gradients persist until [`Tape::zero_grad`], so two
//! backward passes add up.

use std::cell::{Ref, RefCell};

use super::{NumError, Tensor};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(usize),
    SegmentSoftmax {
        x: usize,
        segments: Vec<usize>,
    },
    ConcatLast(usize, usize),
    Gather {
        src: usize,
        index: Vec<usize>,
    },
    ScatterAdd {
        src: usize,
        index: Vec<usize>,
    },
    HeadDot {
        a: usize,
        b: usize,
        heads: usize,
    },
    HeadScale {
        v: usize,
        w: usize,
        heads: usize,
    },
    Sum(usize),
    Mean(usize),
    BceLogits {
        z: usize,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
    SoftmaxCe {
        z: usize,
        targets: Vec<usize>,
    },
    Mse {
        x: usize,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Records operations for one forward/backward pass. Single-writer.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        self.nodes.borrow()[var.id].grad.clone()
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Back-propagates from a scalar loss, adding into every reachable leaf.
    pub fn backward(&self, loss: Var<'_>) -> Result<(), NumError> {
        let mut nodes = self.nodes.borrow_mut();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(NumError::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", root.value.shape()),
            });
        }
        if !root.requires_grad {
            return Err(NumError::Tape("loss is detached from every trainable leaf".into()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        adj[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = nodes[id].op {
                let node = &mut nodes[id];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            backprop_node(&nodes, id, &g, &mut adj);
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, grad: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut adj[id] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&grad) {
                *a += b;
            }
        }
        slot => *slot = Some(grad),
    }
}

fn backprop_node(nodes: &[Node], id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k, n) = (val(*a).rows(), val(*a).cols(), val(*b).cols());
            if nodes[*a].requires_grad {
                // dA = dC · Bᵀ
                let bd = val(*b).data();
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        da[i * k + p] = dot(&g[i * n..(i + 1) * n], &bd[p * n..(p + 1) * n]);
                    }
                }
                accumulate(adj, nodes, *a, da);
            }
            if nodes[*b].requires_grad {
                // dB = Aᵀ · dC
                let ad = val(*a).data();
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        axpy(ad[i * k + p], &g[i * n..(i + 1) * n], &mut db[p * n..(p + 1) * n]);
                    }
                }
                accumulate(adj, nodes, *b, db);
            }
        }
        Op::MatMulNt(a, b) => {
            let (m, k, n) = (val(*a).rows(), val(*a).cols(), val(*b).rows());
            if nodes[*a].requires_grad {
                // dA = dC · B
                let bd = val(*b).data();
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    let row = &mut da[i * k..(i + 1) * k];
                    for j in 0..n {
                        axpy(g[i * n + j], &bd[j * k..(j + 1) * k], row);
                    }
                }
                accumulate(adj, nodes, *a, da);
            }
            if nodes[*b].requires_grad {
                // dB = dCᵀ · A
                let ad = val(*a).data();
                let mut db = vec![0.0; n * k];
                for i in 0..m {
                    let arow = &ad[i * k..(i + 1) * k];
                    for j in 0..n {
                        axpy(g[i * n + j], arow, &mut db[j * k..(j + 1) * k]);
                    }
                }
                accumulate(adj, nodes, *b, db);
            }
        }
        Op::Add(a, b) => {
            accumulate(adj, nodes, *a, g.to_vec());
            accumulate(adj, nodes, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(adj, nodes, *a, g.to_vec());
            accumulate(adj, nodes, *b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            accumulate(adj, nodes, *a, g.iter().zip(bd).map(|(g, b)| g * b).collect());
            accumulate(adj, nodes, *b, g.iter().zip(ad).map(|(g, a)| g * a).collect());
        }
        Op::AddRow(x, b) => {
            accumulate(adj, nodes, *x, g.to_vec());
            let n = val(*b).len();
            let mut db = vec![0.0; n];
            for chunk in g.chunks(n) {
                axpy(1.0, chunk, &mut db);
            }
            accumulate(adj, nodes, *b, db);
        }
        Op::Scale(x, c) => accumulate(adj, nodes, *x, g.iter().map(|v| v * c).collect()),
        Op::Sigmoid(x) => {
            let dx = g.iter().zip(out.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
            accumulate(adj, nodes, *x, dx);
        }
        Op::Tanh(x) => {
            let dx = g.iter().zip(out.data()).map(|(g, t)| g * (1.0 - t * t)).collect();
            accumulate(adj, nodes, *x, dx);
        }
        Op::Gelu(x) => {
            let dx = g.iter().zip(val(*x).data()).map(|(g, &x)| g * gelu_grad(x)).collect();
            accumulate(adj, nodes, *x, dx);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let d = val(*gamma).len();
            let gam = val(*gamma).data();
            if nodes[*x].requires_grad {
                let mut dx = vec![0.0; g.len()];
                for (r, s) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let dxhat: Vec<f64> = gr.iter().zip(gam).map(|(g, c)| g * c).collect();
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                    let n = d as f64;
                    for c in 0..d {
                        dx[r * d + c] = s / n * (n * dxhat[c] - sum_d - xh[c] * sum_dx);
                    }
                }
                accumulate(adj, nodes, *x, dx);
            }
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            for (gr, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                for c in 0..d {
                    dgamma[c] += gr[c] * xh[c];
                    dbeta[c] += gr[c];
                }
            }
            accumulate(adj, nodes, *gamma, dgamma);
            accumulate(adj, nodes, *beta, dbeta);
        }
        Op::SoftmaxRows(x) => {
            let n = out.cols();
            let mut dx = vec![0.0; g.len()];
            for ((dr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                let s = dot(gr, yr);
                for c in 0..n {
                    dr[c] = yr[c] * (gr[c] - s);
                }
            }
            accumulate(adj, nodes, *x, dx);
        }
        Op::SegmentSoftmax { x, segments } => {
            let h = out.cols();
            let n_seg = segments.iter().max().map_or(0, |m| m + 1);
            let y = out.data();
            let mut inner = vec![0.0; n_seg * h];
            for (r, &s) in segments.iter().enumerate() {
                for c in 0..h {
                    inner[s * h + c] += g[r * h + c] * y[r * h + c];
                }
            }
            let mut dx = vec![0.0; g.len()];
            for (r, &s) in segments.iter().enumerate() {
                for c in 0..h {
                    dx[r * h + c] = y[r * h + c] * (g[r * h + c] - inner[s * h + c]);
                }
            }
            accumulate(adj, nodes, *x, dx);
        }
        Op::ConcatLast(a, b) => {
            let (ca, cb) = (val(*a).cols(), val(*b).cols());
            let rows = val(*a).rows();
            let mut da = Vec::with_capacity(rows * ca);
            let mut db = Vec::with_capacity(rows * cb);
            for r in g.chunks(ca + cb) {
                da.extend_from_slice(&r[..ca]);
                db.extend_from_slice(&r[ca..]);
            }
            accumulate(adj, nodes, *a, da);
            accumulate(adj, nodes, *b, db);
        }
        Op::Gather { src, index } => {
            let c = out.cols();
            let mut ds = vec![0.0; val(*src).len()];
            for (r, &i) in index.iter().enumerate() {
                axpy(1.0, &g[r * c..(r + 1) * c], &mut ds[i * c..(i + 1) * c]);
            }
            accumulate(adj, nodes, *src, ds);
        }
        Op::ScatterAdd { src, index } => {
            let c = out.cols();
            let mut ds = Vec::with_capacity(val(*src).len());
            for &i in index {
                ds.extend_from_slice(&g[i * c..(i + 1) * c]);
            }
            accumulate(adj, nodes, *src, ds);
        }
        Op::HeadDot { a, b, heads } => {
            let d = val(*a).cols();
            let dk = d / heads;
            let (ad, bd) = (val(*a).data(), val(*b).data());
            let mut da = vec![0.0; ad.len()];
            let mut db = vec![0.0; bd.len()];
            for r in 0..val(*a).rows() {
                for k in 0..*heads {
                    let gs = g[r * heads + k];
                    let span = r * d + k * dk..r * d + (k + 1) * dk;
                    axpy(gs, &bd[span.clone()], &mut da[span.clone()]);
                    axpy(gs, &ad[span.clone()], &mut db[span]);
                }
            }
            accumulate(adj, nodes, *a, da);
            accumulate(adj, nodes, *b, db);
        }
        Op::HeadScale { v, w, heads } => {
            let d = val(*v).cols();
            let dk = d / heads;
            let (vd, wd) = (val(*v).data(), val(*w).data());
            let mut dv = vec![0.0; vd.len()];
            let mut dw = vec![0.0; wd.len()];
            for r in 0..val(*v).rows() {
                for k in 0..*heads {
                    let span = r * d + k * dk..r * d + (k + 1) * dk;
                    let wk = wd[r * heads + k];
                    axpy(wk, &g[span.clone()], &mut dv[span.clone()]);
                    dw[r * heads + k] = dot(&g[span.clone()], &vd[span]);
                }
            }
            accumulate(adj, nodes, *v, dv);
            accumulate(adj, nodes, *w, dw);
        }
        Op::Sum(x) => accumulate(adj, nodes, *x, vec![g[0]; val(*x).len()]),
        Op::Mean(x) => {
            let n = val(*x).len() as f64;
            accumulate(adj, nodes, *x, vec![g[0] / n; val(*x).len()]);
        }
        Op::BceLogits { z, targets, weights } => {
            let total: f64 = weights.iter().sum();
            let dz = val(*z)
                .data()
                .iter()
                .zip(targets)
                .zip(weights)
                .map(|((&z, &y), &w)| g[0] * w * (sigmoid(z) - y) / total)
                .collect();
            accumulate(adj, nodes, *z, dz);
        }
        Op::SoftmaxCe { z, targets } => {
            let c = val(*z).cols();
            let m = targets.len() as f64;
            let mut dz = Vec::with_capacity(val(*z).len());
            for (row, &t) in val(*z).data().chunks(c).zip(targets) {
                let p = softmax_slice(row);
                for (j, pj) in p.into_iter().enumerate() {
                    let onehot = if j == t { 1.0 } else { 0.0 };
                    dz.push(g[0] * (pj - onehot) / m);
                }
            }
            accumulate(adj, nodes, *z, dz);
        }
        Op::Mse { x, targets, weights } => {
            let total: f64 = weights.iter().sum();
            let dx = val(*x)
                .data()
                .iter()
                .zip(targets)
                .zip(weights)
                .map(|((&p, &y), &w)| g[0] * 2.0 * w * (p - y) / total)
                .collect();
            accumulate(adj, nodes, *x, dx);
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

fn softmax_slice(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrow of the forward value. Drop it before recording new ops.
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'t> {
        let rg = self.tape.requires(inputs);
        self.tape.push(value, op, rg)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, NumError> {
        self.same_tape(&other);
        let value = {
            let (a, b) = (self.value(), other.value());
            if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
                return Err(shape_err("matmul", &a, &b));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let (ad, bd) = (a.data(), b.data());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    axpy(ad[i * k + p], &bd[p * n..(p + 1) * n], row);
                }
            }
            Tensor::new(vec![m, n], out)?
        };
        Ok(self.record(value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// `self · otherᵀ` for `self: m x k`, `other: n x k`. This is the linear
    /// map `x Wᵀ` with weights stored `out x in`.
    pub fn matmul_nt(self, other: Var<'t>) -> Result<Var<'t>, NumError> {
        self.same_tape(&other);
        let value = {
            let (a, b) = (self.value(), other.value());
            if a.cols() != b.cols() || b.rank() != 2 {
                return Err(shape_err("matmul_nt", &a, &b));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.rows());
            let (ad, bd) = (a.data(), b.data());
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                let arow = &ad[i * k..(i + 1) * k];
                for j in 0..n {
                    out.push(dot(arow, &bd[j * k..(j + 1) * k]));
                }
            }
            Tensor::new(vec![m, n], out)?
        };
        Ok(self.record(value, Op::MatMulNt(self.id, other.id), &[self.id, other.id]))
    }

    fn zip_with(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>, NumError> {
        self.same_tape(&other);
        let value = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() {
                return Err(shape_err(name, &a, &b));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.record(value, op, &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, NumError> {
        self.zip_with(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, NumError> {
        self.zip_with(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, NumError> {
        self.zip_with(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// Adds a length-`n` vector to every row of an `m x n` value.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>, NumError> {
        self.same_tape(&bias);
        let value = {
            let (x, b) = (self.value(), bias.value());
            if b.len() != x.cols() {
                return Err(shape_err("add_row", &x, &b));
            }
            let mut data = x.data().to_vec();
            for chunk in data.chunks_mut(b.len()) {
                axpy(1.0, b.data(), chunk);
            }
            Tensor::new(x.shape().to_vec(), data)?
        };
        Ok(self.record(value, Op::AddRow(self.id, bias.id), &[self.id, bias.id]))
    }

    fn map(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let value = {
            let x = self.value();
            let data = x.data().iter().map(|&v| f(v)).collect();
            Tensor::new(x.shape().to_vec(), data).expect("same shape")
        };
        self.record(value, op, &[self.id])
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.map(|v| v * c, Op::Scale(self.id, c))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.map(sigmoid, Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        self.map(f64::tanh, Op::Tanh(self.id))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        self.map(gelu, Op::Gelu(self.id))
    }

    /// Per-row normalization over the last axis with `eps` inside the square
    /// root, followed by the affine map `gamma * x̂ + beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>, NumError> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let (value, xhat, inv_std) = {
            let (x, g, b) = (self.value(), gamma.value(), beta.value());
            let d = x.cols();
            if g.len() != d || b.len() != d {
                return Err(shape_err("layer_norm", &x, &g));
            }
            let mut out = Vec::with_capacity(x.len());
            let mut xhat = Vec::with_capacity(x.len());
            let mut inv_std = Vec::with_capacity(x.rows());
            for row in x.data().chunks(d) {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let s = 1.0 / (var + eps).sqrt();
                inv_std.push(s);
                for c in 0..d {
                    let h = (row[c] - mean) * s;
                    xhat.push(h);
                    out.push(g.data()[c] * h + b.data()[c]);
                }
            }
            (Tensor::new(x.shape().to_vec(), out)?, xhat, inv_std)
        };
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            inv_std,
        };
        Ok(self.record(value, op, &[self.id, gamma.id, beta.id]))
    }

    /// Row-wise softmax over the last axis. `mask` (same length as the value,
    /// `true` = keep) forces excluded entries to exactly zero.
    pub fn softmax_rows(self, mask: Option<&[bool]>) -> Result<Var<'t>, NumError> {
        let value = {
            let x = self.value();
            let n = x.cols();
            if let Some(m) = mask {
                if m.len() != x.len() {
                    return Err(NumError::Shape {
                        op: "softmax_rows",
                        detail: format!("mask length {} for {} values", m.len(), x.len()),
                    });
                }
            }
            let mut out = vec![0.0; x.len()];
            for (r, row) in x.data().chunks(n).enumerate() {
                let keep = |c: usize| mask.map_or(true, |m| m[r * n + c]);
                let max = (0..n)
                    .filter(|&c| keep(c))
                    .map(|c| row[c])
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY && !(0..n).any(keep) {
                    return Err(NumError::Mask { row: r });
                }
                let mut sum = 0.0;
                for c in (0..n).filter(|&c| keep(c)) {
                    let e = (row[c] - max).exp();
                    out[r * n + c] = e;
                    sum += e;
                }
                for v in &mut out[r * n..(r + 1) * n] {
                    *v /= sum;
                }
            }
            Tensor::new(x.shape().to_vec(), out)?
        };
        Ok(self.record(value, Op::SoftmaxRows(self.id), &[self.id]))
    }

    /// Softmax over the rows sharing a segment id, independently per column.
    /// Used for attention over a node's incoming arcs.
    pub fn segment_softmax(self, segments: &[usize]) -> Result<Var<'t>, NumError> {
        let value = {
            let x = self.value();
            let h = x.cols();
            if segments.len() != x.rows() {
                return Err(NumError::Shape {
                    op: "segment_softmax",
                    detail: format!("{} segment ids for {} rows", segments.len(), x.rows()),
                });
            }
            let n_seg = segments.iter().max().map_or(0, |m| m + 1);
            let xd = x.data();
            let mut max = vec![f64::NEG_INFINITY; n_seg * h];
            for (r, &s) in segments.iter().enumerate() {
                for c in 0..h {
                    max[s * h + c] = max[s * h + c].max(xd[r * h + c]);
                }
            }
            let mut out = vec![0.0; x.len()];
            let mut sum = vec![0.0; n_seg * h];
            for (r, &s) in segments.iter().enumerate() {
                for c in 0..h {
                    let e = (xd[r * h + c] - max[s * h + c]).exp();
                    out[r * h + c] = e;
                    sum[s * h + c] += e;
                }
            }
            for (r, &s) in segments.iter().enumerate() {
                for c in 0..h {
                    out[r * h + c] /= sum[s * h + c];
                }
            }
            Tensor::new(x.shape().to_vec(), out)?
        };
        let op = Op::SegmentSoftmax {
            x: self.id,
            segments: segments.to_vec(),
        };
        Ok(self.record(value, op, &[self.id]))
    }

    /// Concatenates two matrices with equal row counts along the last axis.
    pub fn concat_last(self, other: Var<'t>) -> Result<Var<'t>, NumError> {
        self.same_tape(&other);
        let value = {
            let (a, b) = (self.value(), other.value());
            if a.rows() != b.rows() {
                return Err(shape_err("concat_last", &a, &b));
            }
            let mut data = Vec::with_capacity(a.len() + b.len());
            for r in 0..a.rows() {
                data.extend_from_slice(a.row(r));
                data.extend_from_slice(b.row(r));
            }
            Tensor::new(vec![a.rows(), a.cols() + b.cols()], data)?
        };
        Ok(self.record(value, Op::ConcatLast(self.id, other.id), &[self.id, other.id]))
    }

    /// Selects rows by index: `out[r] = self[index[r]]`. Embedding lookup.
    pub fn gather_rows(self, index: &[usize]) -> Result<Var<'t>, NumError> {
        let value = {
            let x = self.value();
            let c = x.cols();
            let mut data = Vec::with_capacity(index.len() * c);
            for &i in index {
                if i >= x.rows() {
                    return Err(NumError::Index {
                        index: i,
                        len: x.rows(),
                    });
                }
                data.extend_from_slice(x.row(i));
            }
            Tensor::new(vec![index.len(), c], data)?
        };
        let op = Op::Gather {
            src: self.id,
            index: index.to_vec(),
        };
        Ok(self.record(value, op, &[self.id]))
    }

    /// Sums row `r` into output row `index[r]` of an `n_out`-row result.
    pub fn scatter_add_rows(self, index: &[usize], n_out: usize) -> Result<Var<'t>, NumError> {
        let value = {
            let x = self.value();
            if index.len() != x.rows() {
                return Err(NumError::Shape {
                    op: "scatter_add_rows",
                    detail: format!("{} indices for {} rows", index.len(), x.rows()),
                });
            }
            let c = x.cols();
            let mut data = vec![0.0; n_out * c];
            for (r, &i) in index.iter().enumerate() {
                if i >= n_out {
                    return Err(NumError::Index { index: i, len: n_out });
                }
                axpy(1.0, x.row(r), &mut data[i * c..(i + 1) * c]);
            }
            Tensor::new(vec![n_out, c], data)?
        };
        let op = Op::ScatterAdd {
            src: self.id,
            index: index.to_vec(),
        };
        Ok(self.record(value, op, &[self.id]))
    }

    /// Per-row, per-head dot products of two `m x d` values whose columns are
    /// split into `heads` contiguous blocks. Result is `m x heads`.
    pub fn head_dot(self, other: Var<'t>, heads: usize) -> Result<Var<'t>, NumError> {
        self.same_tape(&other);
        let value = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() || heads == 0 || a.cols() % heads != 0 {
                return Err(shape_err("head_dot", &a, &b));
            }
            let dk = a.cols() / heads;
            let mut data = Vec::with_capacity(a.rows() * heads);
            for (ra, rb) in a.data().chunks(a.cols()).zip(b.data().chunks(b.cols())) {
                for k in 0..heads {
                    data.push(dot(&ra[k * dk..(k + 1) * dk], &rb[k * dk..(k + 1) * dk]));
                }
            }
            Tensor::new(vec![a.rows(), heads], data)?
        };
        let op = Op::HeadDot {
            a: self.id,
            b: other.id,
            heads,
        };
        Ok(self.record(value, op, &[self.id, other.id]))
    }

    /// Scales head block `k` of row `r` by `weights[r, k]`.
    pub fn head_scale(self, weights: Var<'t>) -> Result<Var<'t>, NumError> {
        self.same_tape(&weights);
        let (value, heads) = {
            let (v, w) = (self.value(), weights.value());
            let heads = w.cols();
            if v.rows() != w.rows() || heads == 0 || v.cols() % heads != 0 {
                return Err(shape_err("head_scale", &v, &w));
            }
            let dk = v.cols() / heads;
            let mut data = v.data().to_vec();
            for (r, row) in data.chunks_mut(v.cols()).enumerate() {
                for k in 0..heads {
                    let s = w.data()[r * heads + k];
                    row[k * dk..(k + 1) * dk].iter_mut().for_each(|x| *x *= s);
                }
            }
            (Tensor::new(v.shape().to_vec(), data)?, heads)
        };
        let op = Op::HeadScale {
            v: self.id,
            w: weights.id,
            heads,
        };
        Ok(self.record(value, op, &[self.id, weights.id]))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.record(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t> {
        let s = {
            let x = self.value();
            x.data().iter().sum::<f64>() / x.len() as f64
        };
        self.record(Tensor::scalar(s), Op::Mean(self.id), &[self.id])
    }

    /// Weighted mean binary cross-entropy on logits, in the stable form
    /// `max(z, 0) - z y + ln(1 + e^-|z|)`. A zero weight drops an entry.
    pub fn bce_with_logits(self, targets: &[f64], weights: Option<&[f64]>) -> Result<Var<'t>, NumError> {
        let weights = weights.map_or_else(|| vec![1.0; targets.len()], <[f64]>::to_vec);
        let loss = {
            let z = self.value();
            if z.len() != targets.len() || weights.len() != targets.len() {
                return Err(NumError::Shape {
                    op: "bce_with_logits",
                    detail: format!(
                        "{} logits, {} targets, {} weights",
                        z.len(),
                        targets.len(),
                        weights.len()
                    ),
                });
            }
            let total: f64 = weights.iter().sum();
            if total <= 0.0 {
                return Err(NumError::Shape {
                    op: "bce_with_logits",
                    detail: "no weighted entries".into(),
                });
            }
            z.data()
                .iter()
                .zip(targets)
                .zip(&weights)
                .map(|((&z, &y), &w)| w * (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()))
                .sum::<f64>()
                / total
        };
        let op = Op::BceLogits {
            z: self.id,
            targets: targets.to_vec(),
            weights,
        };
        Ok(self.record(Tensor::scalar(loss), op, &[self.id]))
    }

    /// Mean categorical negative log-likelihood of `targets` under the
    /// row-wise softmax of `self` (log-sum-exp form).
    pub fn softmax_cross_entropy(self, targets: &[usize]) -> Result<Var<'t>, NumError> {
        let loss = {
            let z = self.value();
            let c = z.cols();
            if z.rows() != targets.len() || targets.is_empty() {
                return Err(NumError::Shape {
                    op: "softmax_cross_entropy",
                    detail: format!("{} rows, {} targets", z.rows(), targets.len()),
                });
            }
            let mut total = 0.0;
            for (row, &t) in z.data().chunks(c).zip(targets) {
                if t >= c {
                    return Err(NumError::Index { index: t, len: c });
                }
                total += log_sum_exp(row) - row[t];
            }
            total / targets.len() as f64
        };
        let op = Op::SoftmaxCe {
            z: self.id,
            targets: targets.to_vec(),
        };
        Ok(self.record(Tensor::scalar(loss), op, &[self.id]))
    }

    /// Weighted mean squared error against fixed targets.
    pub fn mse(self, targets: &[f64], weights: Option<&[f64]>) -> Result<Var<'t>, NumError> {
        let weights = weights.map_or_else(|| vec![1.0; targets.len()], <[f64]>::to_vec);
        let loss = {
            let x = self.value();
            if x.len() != targets.len() || weights.len() != targets.len() {
                return Err(NumError::Shape {
                    op: "mse",
                    detail: format!("{} predictions, {} targets", x.len(), targets.len()),
                });
            }
            let total: f64 = weights.iter().sum();
            if total <= 0.0 {
                return Err(NumError::Shape {
                    op: "mse",
                    detail: "no weighted entries".into(),
                });
            }
            x.data()
                .iter()
                .zip(targets)
                .zip(&weights)
                .map(|((&p, &y), &w)| w * (p - y) * (p - y))
                .sum::<f64>()
                / total
        };
        let op = Op::Mse {
            x: self.id,
            targets: targets.to_vec(),
            weights,
        };
        Ok(self.record(Tensor::scalar(loss), op, &[self.id]))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NumError {
    NumError::Shape {
        op,
        detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
    }
}
