//! Define-by-run computation graph with reverse-mode gradients.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order and the backward sweep is a single reverse pass.

use std::collections::BTreeMap;

use super::array::{matmul_into, DenseArray};
use crate::error::{Error, Result};

/// Guard added to the row variance inside layer normalization.
pub const EPS_NORM: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    LayerNorm(NodeId),
    LogSoftmax(NodeId),
    GatherRows(NodeId, Vec<usize>),
    Pick(NodeId, Vec<usize>),
    Sum(NodeId),
    Mean(NodeId),
    Square(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Tanh(NodeId),
    Clamp(NodeId, f64, f64),
    StopGradient,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "elementwise-mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::LayerNorm(..) => "row-layer-normalize",
            Op::LogSoftmax(..) => "log-softmax",
            Op::GatherRows(..) => "gather-rows",
            Op::Pick(..) => "gather-index",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Square(..) => "square",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Tanh(..) => "tanh",
            Op::Clamp(..) => "clamp",
            Op::StopGradient => "stop-gradient",
        }
    }
}

/// How the right operand of a binary op lines up with the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

fn broadcast_kind(a: &DenseArray, b: &DenseArray) -> Option<Broadcast> {
    if a.shape() == b.shape() {
        Some(Broadcast::Same)
    } else if b.is_scalar() {
        Some(Broadcast::Scalar)
    } else if b.rows() == 1 && b.cols() == a.cols() {
        Some(Broadcast::Row)
    } else {
        None
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    ops: Vec<Op>,
    values: Vec<DenseArray>,
    params: BTreeMap<String, NodeId>,
}

/// Gradients of one backward sweep, indexed by node.
#[derive(Debug)]
pub struct NodeGrads {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl NodeGrads {
    /// Gradient of the loss with respect to `node`, zeros if it was not reached.
    pub fn of(&self, node: NodeId) -> DenseArray {
        let shape = &self.shapes[node.0];
        match &self.grads[node.0] {
            Some(g) => DenseArray::new(shape.clone(), g.clone()).expect("grad shape"),
            None => DenseArray::zeros(shape),
        }
    }
}

/// Gradient map over the trainable parameters registered on a graph.
pub type Gradients = BTreeMap<String, DenseArray>;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &DenseArray {
        &self.values[id.0]
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.values[id.0].item()
    }

    /// Untracked input. Receives gradient in [`Graph::backward_all`] but is not
    /// reported as a parameter.
    pub fn constant(&mut self, value: DenseArray) -> NodeId {
        self.ops.push(Op::Leaf);
        self.values.push(value);
        NodeId(self.ops.len() - 1)
    }

    /// Trainable leaf. Registering the same name twice returns the first node.
    pub fn param(&mut self, name: &str, value: &DenseArray) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.constant(value.clone());
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    fn push(&mut self, op: Op, value: DenseArray) -> Result<NodeId> {
        let node = self.ops.len();
        if let Some(bad) = value.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                node,
                op: op.name(),
                detail: format!(
                    "non-finite value {bad} in output of shape {:?}",
                    value.shape()
                ),
            });
        }
        self.ops.push(op);
        self.values.push(value);
        Ok(NodeId(node))
    }

    fn binary_shapes(&self, kind: &str, a: NodeId, b: NodeId) -> Result<Broadcast> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        broadcast_kind(va, vb).ok_or_else(|| {
            Error::contract(format!(
                "{kind}: shapes {:?} and {:?} do not conform",
                va.shape(),
                vb.shape()
            ))
        })
    }

    fn elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let kind = self.binary_shapes(op.name(), a, b)?;
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        let cols = va.cols();
        let data: Vec<f64> = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match kind {
                    Broadcast::Same => vb.data()[i],
                    Broadcast::Row => vb.data()[i % cols],
                    Broadcast::Scalar => vb.data()[0],
                };
                f(x, y)
            })
            .collect();
        let out = DenseArray::new(va.shape().to_vec(), data)?;
        self.push(op, out)
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let va = &self.values[a.0];
        let out = DenseArray::new(
            va.shape().to_vec(),
            va.data().iter().map(|&x| f(x)).collect(),
        )?;
        self.push(op, out)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if vb.shape().len() != 2 || va.cols() != vb.rows() {
            return Err(Error::contract(format!(
                "matmul: shapes {:?} and {:?} do not conform",
                va.shape(),
                vb.shape()
            )));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let mut out = vec![0.0; m * n];
        matmul_into(va.data(), vb.data(), &mut out, m, k, n);
        let out = DenseArray::matrix(m, n, out)?;
        self.push(Op::MatMul(a, b), out)
    }

    /// `a + b`; `b` may be a single row or a scalar broadcast over `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        self.unary(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn offset(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        self.unary(a, Op::Offset(a), |x| x + k)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.scale(a, -1.0)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Identity forward; blocks every gradient path through this node.
    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::StopGradient, |x| x)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.values[a.0].data().iter().sum();
        self.push(Op::Sum(a), DenseArray::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = &self.values[a.0];
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Op::Mean(a), DenseArray::scalar(s))
    }

    /// Per-row `(x - mean) / sqrt(var + EPS_NORM)`.
    pub fn layer_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let v = &self.values[a.0];
        let cols = v.cols();
        let mut out = Vec::with_capacity(v.len());
        for r in 0..v.rows() {
            let row = v.row(r);
            let m = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + EPS_NORM).sqrt();
            out.extend(row.iter().map(|x| (x - m) * inv));
        }
        let out = DenseArray::new(v.shape().to_vec(), out)?;
        self.push(Op::LayerNorm(a), out)
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = &self.values[a.0];
        let mut out = Vec::with_capacity(v.len());
        for r in 0..v.rows() {
            let row = v.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|x| x - lse));
        }
        let out = DenseArray::new(v.shape().to_vec(), out)?;
        self.push(Op::LogSoftmax(a), out)
    }

    /// Row lookup: output row `i` is row `idx[i]` of `table`.
    pub fn gather_rows(&mut self, table: NodeId, idx: &[usize]) -> Result<NodeId> {
        let v = &self.values[table.0];
        if idx.is_empty() {
            return Err(Error::contract("gather-rows: empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.rows()) {
            return Err(Error::contract(format!(
                "gather-rows: index {bad} out of range for shape {:?}",
                v.shape()
            )));
        }
        let cols = v.cols();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(v.row(i));
        }
        let out = DenseArray::matrix(idx.len(), cols, out)?;
        self.push(Op::GatherRows(table, idx.to_vec()), out)
    }

    /// Per-row element pick: output `[rows]` with `a[r, idx[r]]`.
    pub fn pick(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let v = &self.values[a.0];
        if idx.len() != v.rows() {
            return Err(Error::contract(format!(
                "gather-index: {} indices for shape {:?}",
                idx.len(),
                v.shape()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.cols()) {
            return Err(Error::contract(format!(
                "gather-index: index {bad} out of range for shape {:?}",
                v.shape()
            )));
        }
        let out: Vec<f64> = idx.iter().enumerate().map(|(r, &c)| v.get(r, c)).collect();
        self.push(Op::Pick(a, idx.to_vec()), DenseArray::vector(out))
    }

    /// Reverse sweep from a scalar node; returns gradients for every node.
    pub fn backward_all(&self, loss: NodeId) -> Result<NodeGrads> {
        if !self.values[loss.0].is_scalar() {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.ops.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(NodeGrads {
            grads,
            shapes: self.values.iter().map(|v| v.shape().to_vec()).collect(),
        })
    }

    /// Gradients for every registered parameter; unreached ones are zero.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let all = self.backward_all(loss)?;
        Ok(self
            .params
            .iter()
            .map(|(name, &id)| (name.clone(), all.of(id)))
            .collect())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.values[i];
        let mut acc = |id: NodeId, f: &dyn Fn(&mut [f64])| {
            let len = self.values[id.0].len();
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &self.ops[i] {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.values[a.0], &self.values[b.0]);
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                // dA = G · Bᵀ
                acc(*a, &|s| {
                    for r in 0..m {
                        for p in 0..k {
                            let mut t = 0.0;
                            for c in 0..n {
                                t += g[r * n + c] * vb.data()[p * n + c];
                            }
                            s[r * k + p] += t;
                        }
                    }
                });
                // dB = Aᵀ · G
                acc(*b, &|s| {
                    for r in 0..m {
                        for p in 0..k {
                            let av = va.data()[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for c in 0..n {
                                s[p * n + c] += av * g[r * n + c];
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.ops[i], Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                let kind = broadcast_kind(&self.values[a.0], &self.values[b.0]).expect("checked");
                let cols = out.cols();
                acc(*b, &|s| reduce_broadcast(s, g, kind, cols, sign, None));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.values[a.0], &self.values[b.0]);
                let kind = broadcast_kind(va, vb).expect("checked");
                let cols = out.cols();
                acc(*a, &|s| {
                    for (j, sj) in s.iter_mut().enumerate() {
                        let y = match kind {
                            Broadcast::Same => vb.data()[j],
                            Broadcast::Row => vb.data()[j % cols],
                            Broadcast::Scalar => vb.data()[0],
                        };
                        *sj += g[j] * y;
                    }
                });
                acc(*b, &|s| {
                    reduce_broadcast(s, g, kind, cols, 1.0, Some(va.data()))
                });
            }
            Op::Scale(a, k) => acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += k * g)),
            Op::Offset(a) => acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::Square(a) => {
                let x = self.values[a.0].data();
                acc(*a, &|s| {
                    for j in 0..s.len() {
                        s[j] += 2.0 * x[j] * g[j];
                    }
                });
            }
            Op::Log(a) => {
                let x = self.values[a.0].data();
                acc(*a, &|s| {
                    for j in 0..s.len() {
                        s[j] += g[j] / x[j];
                    }
                });
            }
            Op::Exp(a) => {
                let y = out.data();
                acc(*a, &|s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * y[j];
                    }
                });
            }
            Op::Tanh(a) => {
                let y = out.data();
                acc(*a, &|s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * (1.0 - y[j] * y[j]);
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.values[a.0].data();
                acc(*a, &|s| {
                    for j in 0..s.len() {
                        if x[j] >= *lo && x[j] <= *hi {
                            s[j] += g[j];
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &|s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(a) => {
                let n = self.values[a.0].len() as f64;
                acc(*a, &|s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::LayerNorm(a) => {
                let x = &self.values[a.0];
                let cols = x.cols();
                acc(*a, &|s| {
                    for r in 0..x.rows() {
                        let row = x.row(r);
                        let m = row.iter().sum::<f64>() / cols as f64;
                        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / cols as f64;
                        let inv = 1.0 / (var + EPS_NORM).sqrt();
                        let y = out.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let g_mean = gr.iter().sum::<f64>() / cols as f64;
                        let gy_mean =
                            gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            s[r * cols + c] += inv * (gr[c] - g_mean - y[c] * gy_mean);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let cols = out.cols();
                acc(*a, &|s| {
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let gs: f64 = gr.iter().sum();
                        for c in 0..cols {
                            s[r * cols + c] += gr[c] - y[c].exp() * gs;
                        }
                    }
                });
            }
            Op::GatherRows(t, idx) => {
                let cols = out.cols();
                acc(*t, &|s| {
                    for (r, &row) in idx.iter().enumerate() {
                        for c in 0..cols {
                            s[row * cols + c] += g[r * cols + c];
                        }
                    }
                });
            }
            Op::Pick(a, idx) => {
                let cols = self.values[a.0].cols();
                acc(*a, &|s| {
                    for (r, &c) in idx.iter().enumerate() {
                        s[r * cols + c] += g[r];
                    }
                });
            }
        }
    }
}

/// Sums an upstream gradient back onto a broadcast operand, optionally
/// multiplied elementwise by `other` (for products).
fn reduce_broadcast(
    s: &mut [f64],
    g: &[f64],
    kind: Broadcast,
    cols: usize,
    sign: f64,
    other: Option<&[f64]>,
) {
    for (j, gj) in g.iter().enumerate() {
        let v = sign * gj * other.map_or(1.0, |o| o[j]);
        match kind {
            Broadcast::Same => s[j] += v,
            Broadcast::Row => s[j % cols] += v,
            Broadcast::Scalar => s[0] += v,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity() {
        let mut rng = StreamRng::new(1, "t");
        let a = DenseArray::randn(&[3, 3], 1.0, &mut rng);
        let mut g = Graph::new();
        let i = g.constant(DenseArray::identity(3));
        let x = g.constant(a.clone());
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y), &a);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(DenseArray::vector(vec![2.0, 2.0, 2.0]));
        let y = g.layer_norm(x).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn log_softmax_symmetric() {
        let mut g = Graph::new();
        let x = g.constant(DenseArray::vector(vec![0.0, 0.0]));
        let y = g.log_softmax(x).unwrap();
        let l2 = -(2.0f64.ln());
        assert!(close(g.value(y).data(), &[l2, l2], 1e-15));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(DenseArray::zeros(&[2, 3]));
        let b = g.constant(DenseArray::zeros(&[2, 2]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn non_finite_is_numeric_fault() {
        let mut g = Graph::new();
        let a = g.constant(DenseArray::vector(vec![0.0, 1.0]));
        let err = g.log(a).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Numeric {
                    op: "log",
                    node: 1,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let w = g.param("w", &DenseArray::vector(vec![1.0, 2.0]));
        let sq = g.square(w).unwrap();
        let l = g.sum(sq).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads["w"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn mean_gradient() {
        let mut g = Graph::new();
        let w = g.param("w", &DenseArray::vector(vec![1.0, -3.0, 0.5, 9.0]));
        let l = g.mean(w).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads["w"].data(), &[0.25; 4]);
    }

    #[test]
    fn stop_gradient_halves_the_product_rule() {
        let mut g = Graph::new();
        let x = g.param("x", &DenseArray::vector(vec![3.0]));
        let sx = g.stop_gradient(x).unwrap();
        let p = g.mul(x, sx).unwrap();
        let l = g.sum(p).unwrap();
        assert_eq!(g.backward(l).unwrap()["x"].data(), &[3.0]);

        let mut g = Graph::new();
        let x = g.param("x", &DenseArray::vector(vec![1.0, 2.0]));
        let sx = g.stop_gradient(x).unwrap();
        let l = g.sum(sx).unwrap();
        assert_eq!(g.backward(l).unwrap()["x"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn untouched_param_gets_zero() {
        let mut g = Graph::new();
        let a = g.param("a", &DenseArray::vector(vec![1.0]));
        g.param("b", &DenseArray::vector(vec![5.0, 6.0]));
        let l = g.sum(a).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads["b"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let a = g.param("a", &DenseArray::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // l = sum(w + w) -> dl/dw = 2
        let mut g = Graph::new();
        let w = g.param("w", &DenseArray::vector(vec![0.3, -0.7]));
        let s = g.add(w, w).unwrap();
        let l = g.sum(s).unwrap();
        assert_eq!(g.backward(l).unwrap()["w"].data(), &[2.0, 2.0]);
    }

    #[test]
    fn row_broadcast_add_reduces_gradient() {
        let mut g = Graph::new();
        let a = g.constant(DenseArray::zeros(&[3, 2]));
        let b = g.param("b", &DenseArray::vector(vec![1.0, 1.0]));
        let s = g.add(a, b).unwrap();
        let l = g.sum(s).unwrap();
        assert_eq!(g.backward(l).unwrap()["b"].data(), &[3.0, 3.0]);
    }
}
