//! Reverse-mode differentiation over a dynamically recorded graph of
//! dense-matrix operations.
//!
//! Every operation appends a node holding its forward value to a [`Tape`].
//! Node ids are assigned in creation order, which is a topological order of
//! the recorded graph, so [`Tape::backward`] only has to walk the ids from
//! the root downwards once.

use std::cell::RefCell;

use crate::error::NumError;

use super::Tensor;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MulScalarVar(usize, usize),
    Transpose(usize),
    Relu(usize),
    Sigmoid(usize),
    SoftmaxRows(usize),
    Powf(usize, f64),
    Sum(usize),
    Trace(usize),
    RowSum(usize),
    ColSum(usize),
    ScaleRows(usize, usize),
    ScaleCols(usize, usize),
    Frobenius(usize),
    GatherRows(usize, Vec<usize>),
    CrossEntropy(usize, usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Recording of one forward computation. Confined to a single thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    non_finite: RefCell<Option<String>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar root with respect to every recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros when the root does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.id];
                Tensor::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Var<'_> {
        if cfg!(debug_assertions) && !value.is_finite() {
            let mut nf = self.non_finite.borrow_mut();
            if nf.is_none() {
                *nf = Some(format!("{op:?}"));
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Propagates gradients from a 1x1 `root` back to every node it depends on.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients, NumError> {
        if let Some(op) = self.non_finite.borrow().clone() {
            return Err(NumError::NonFinite { op });
        }
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.shape() != (1, 1) {
            return Err(NumError::NonScalarRoot(root_value.shape()));
        }
        if !root_value.is_finite() {
            return Err(NumError::NonFinite {
                op: format!("{:?}", nodes[root.id].op),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.id] = Some(Tensor::scalar(1.0));

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if node.requires_grad {
                backprop_node(&nodes, node, &g, &mut grads)?;
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}

fn accumulate(
    nodes: &[Node],
    grads: &mut [Option<Tensor>],
    id: usize,
    g: Tensor,
) -> Result<(), NumError> {
    if !nodes[id].requires_grad {
        return Ok(());
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g)?,
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

fn backprop_node(
    nodes: &[Node],
    node: &Node,
    g: &Tensor,
    grads: &mut [Option<Tensor>],
) -> Result<(), NumError> {
    let val = |id: usize| &nodes[id].value;
    let wants = |id: usize| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if wants(*a) {
                accumulate(nodes, grads, *a, g.matmul(&val(*b).transpose())?)?;
            }
            if wants(*b) {
                accumulate(nodes, grads, *b, val(*a).transpose().matmul(g)?)?;
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone())?;
            accumulate(nodes, grads, *b, g.clone())?;
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone())?;
            accumulate(nodes, grads, *b, g.scale(-1.0))?;
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                accumulate(nodes, grads, *a, g.hadamard(val(*b))?)?;
            }
            if wants(*b) {
                accumulate(nodes, grads, *b, g.hadamard(val(*a))?)?;
            }
        }
        Op::Div(a, b) => {
            let bv = val(*b);
            if wants(*a) {
                accumulate(nodes, grads, *a, g.zip_map(bv, "div", |gi, bi| gi / bi)?)?;
            }
            if wants(*b) {
                let num = g.hadamard(val(*a))?;
                let db = num.zip_map(bv, "div", |n, bi| -n / (bi * bi))?;
                accumulate(nodes, grads, *b, db)?;
            }
        }
        Op::Scale(a, s) => accumulate(nodes, grads, *a, g.scale(*s))?,
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.clone())?,
        Op::MulScalarVar(x, s) => {
            let sv = val(*s).item();
            if wants(*x) {
                accumulate(nodes, grads, *x, g.scale(sv))?;
            }
            if wants(*s) {
                let ds = g.hadamard(val(*x))?.sum();
                accumulate(nodes, grads, *s, Tensor::scalar(ds))?;
            }
        }
        Op::Transpose(a) => accumulate(nodes, grads, *a, g.transpose())?,
        Op::Relu(a) => {
            let d = g.zip_map(val(*a), "relu", |gi, x| if x > 0.0 { gi } else { 0.0 })?;
            accumulate(nodes, grads, *a, d)?;
        }
        Op::Sigmoid(a) => {
            let d = g.zip_map(&node.value, "sigmoid", |gi, y| gi * y * (1.0 - y))?;
            accumulate(nodes, grads, *a, d)?;
        }
        Op::SoftmaxRows(a) => {
            let y = &node.value;
            let mut d = Tensor::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(gi, yi)| gi * yi).sum();
                for c in 0..y.cols() {
                    d.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                }
            }
            accumulate(nodes, grads, *a, d)?;
        }
        Op::Powf(a, p) => {
            let d = g.zip_map(val(*a), "powf", |gi, x| gi * p * x.powf(p - 1.0))?;
            accumulate(nodes, grads, *a, d)?;
        }
        Op::Sum(a) => {
            let (r, c) = val(*a).shape();
            accumulate(nodes, grads, *a, Tensor::filled(r, c, g.item()))?;
        }
        Op::Trace(a) => {
            let n = val(*a).rows();
            accumulate(nodes, grads, *a, Tensor::identity(n).scale(g.item()))?;
        }
        Op::RowSum(a) => {
            let (r, c) = val(*a).shape();
            let mut d = Tensor::zeros(r, c);
            for i in 0..r {
                for j in 0..c {
                    d.set(i, j, g.get(i, 0));
                }
            }
            accumulate(nodes, grads, *a, d)?;
        }
        Op::ColSum(a) => {
            let (r, c) = val(*a).shape();
            let mut d = Tensor::zeros(r, c);
            for i in 0..r {
                for j in 0..c {
                    d.set(i, j, g.get(0, j));
                }
            }
            accumulate(nodes, grads, *a, d)?;
        }
        Op::ScaleRows(x, v) => {
            let (xv, vv) = (val(*x), val(*v));
            let (r, c) = xv.shape();
            if wants(*x) {
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        d.set(i, j, g.get(i, j) * vv.get(i, 0));
                    }
                }
                accumulate(nodes, grads, *x, d)?;
            }
            if wants(*v) {
                let mut d = Tensor::zeros(r, 1);
                for i in 0..r {
                    d.set(i, 0, (0..c).map(|j| g.get(i, j) * xv.get(i, j)).sum());
                }
                accumulate(nodes, grads, *v, d)?;
            }
        }
        Op::ScaleCols(x, v) => {
            let (xv, vv) = (val(*x), val(*v));
            let (r, c) = xv.shape();
            if wants(*x) {
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        d.set(i, j, g.get(i, j) * vv.get(0, j));
                    }
                }
                accumulate(nodes, grads, *x, d)?;
            }
            if wants(*v) {
                let mut d = Tensor::zeros(1, c);
                for j in 0..c {
                    d.set(0, j, (0..r).map(|i| g.get(i, j) * xv.get(i, j)).sum());
                }
                accumulate(nodes, grads, *v, d)?;
            }
        }
        Op::Frobenius(a) => {
            let norm = node.value.item();
            let gv = g.item();
            let d = if norm > 0.0 {
                val(*a).scale(gv / norm)
            } else {
                // subgradient 0 at the origin
                let (r, c) = val(*a).shape();
                Tensor::zeros(r, c)
            };
            accumulate(nodes, grads, *a, d)?;
        }
        Op::GatherRows(table, ids) => {
            let (r, c) = val(*table).shape();
            let mut d = Tensor::zeros(r, c);
            for (out_row, &src) in ids.iter().enumerate() {
                for j in 0..c {
                    let cur = d.get(src, j);
                    d.set(src, j, cur + g.get(out_row, j));
                }
            }
            accumulate(nodes, grads, *table, d)?;
        }
        Op::CrossEntropy(logits, label) => {
            let probs = softmax_slice(val(*logits).data());
            let gv = g.item();
            let (r, c) = val(*logits).shape();
            let data = probs
                .iter()
                .enumerate()
                .map(|(i, p)| gv * (p - if i == *label { 1.0 } else { 0.0 }))
                .collect();
            accumulate(nodes, grads, *logits, Tensor::from_vec(r, c, data)?)?;
        }
    }
    Ok(())
}

fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Numerically stable `ln Σ exp(x)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id).clone()
    }

    /// Value of a 1x1 node.
    pub fn item(&self) -> f64 {
        self.tape.value_of(self.id).item()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.value_of(self.id).shape()
    }

    fn unary(self, op: Op, value: Tensor) -> Var<'t> {
        let rg = self.tape.requires(self.id);
        self.tape.push(op, value, rg)
    }

    fn binary(self, other: Var<'t>, op: Op, value: Tensor) -> Var<'t> {
        let rg = self.tape.requires(self.id) || self.tape.requires(other.id);
        self.tape.push(op, value, rg)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, NumError> {
        let v = self.tape.value_of(self.id).matmul(&self.tape.value_of(other.id))?;
        Ok(self.binary(other, Op::MatMul(self.id, other.id), v))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, NumError> {
        let v = self.tape.value_of(self.id).add(&self.tape.value_of(other.id))?;
        Ok(self.binary(other, Op::Add(self.id, other.id), v))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, NumError> {
        let v = self.tape.value_of(self.id).sub(&self.tape.value_of(other.id))?;
        Ok(self.binary(other, Op::Sub(self.id, other.id), v))
    }

    /// Element-wise product.
    pub fn hadamard(self, other: Var<'t>) -> Result<Var<'t>, NumError> {
        let v = self.tape.value_of(self.id).hadamard(&self.tape.value_of(other.id))?;
        Ok(self.binary(other, Op::Mul(self.id, other.id), v))
    }

    /// Element-wise quotient.
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>, NumError> {
        let v = self
            .tape
            .value_of(self.id)
            .zip_map(&self.tape.value_of(other.id), "div", |a, b| a / b)?;
        Ok(self.binary(other, Op::Div(self.id, other.id), v))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.tape.value_of(self.id).scale(s);
        self.unary(Op::Scale(self.id, s), v)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.tape.value_of(self.id).map(|x| x + c);
        self.unary(Op::AddScalar(self.id), v)
    }

    /// Multiplies every entry by the 1x1 node `s`.
    pub fn mul_scalar_var(self, s: Var<'t>) -> Result<Var<'t>, NumError> {
        let sv = self.tape.value_of(s.id).clone();
        if sv.shape() != (1, 1) {
            return Err(NumError::Shape {
                op: "mul_scalar_var",
                lhs: self.shape(),
                rhs: sv.shape(),
            });
        }
        let v = self.tape.value_of(self.id).scale(sv.item());
        Ok(self.binary(s, Op::MulScalarVar(self.id, s.id), v))
    }

    pub fn t(self) -> Var<'t> {
        let v = self.tape.value_of(self.id).transpose();
        self.unary(Op::Transpose(self.id), v)
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.tape.value_of(self.id).map(|x| x.max(0.0));
        self.unary(Op::Relu(self.id), v)
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.tape.value_of(self.id).map(sigmoid);
        self.unary(Op::Sigmoid(self.id), v)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(self) -> Var<'t> {
        let x = self.tape.value_of(self.id).clone();
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            for (c, p) in softmax_slice(x.row(r)).into_iter().enumerate() {
                out.set(r, c, p);
            }
        }
        self.unary(Op::SoftmaxRows(self.id), out)
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        let v = self.tape.value_of(self.id).map(|x| x.powf(p));
        self.unary(Op::Powf(self.id, p), v)
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.tape.value_of(self.id).sum());
        self.unary(Op::Sum(self.id), v)
    }

    pub fn trace(self) -> Result<Var<'t>, NumError> {
        let v = Tensor::scalar(self.tape.value_of(self.id).trace()?);
        Ok(self.unary(Op::Trace(self.id), v))
    }

    pub fn row_sum(self) -> Var<'t> {
        let v = self.tape.value_of(self.id).row_sums();
        self.unary(Op::RowSum(self.id), v)
    }

    pub fn col_sum(self) -> Var<'t> {
        let v = self.tape.value_of(self.id).col_sums();
        self.unary(Op::ColSum(self.id), v)
    }

    /// Multiplies row `i` by `v[i]`; `v` is `rows x 1`.
    pub fn scale_rows(self, v: Var<'t>) -> Result<Var<'t>, NumError> {
        let x = self.tape.value_of(self.id).clone();
        let s = self.tape.value_of(v.id).clone();
        if s.shape() != (x.rows(), 1) {
            return Err(NumError::Shape {
                op: "scale_rows",
                lhs: x.shape(),
                rhs: s.shape(),
            });
        }
        let mut out = x;
        for i in 0..out.rows() {
            for j in 0..out.cols() {
                out.set(i, j, out.get(i, j) * s.get(i, 0));
            }
        }
        Ok(self.binary(v, Op::ScaleRows(self.id, v.id), out))
    }

    /// Multiplies column `j` by `v[j]`; `v` is `1 x cols`.
    pub fn scale_cols(self, v: Var<'t>) -> Result<Var<'t>, NumError> {
        let x = self.tape.value_of(self.id).clone();
        let s = self.tape.value_of(v.id).clone();
        if s.shape() != (1, x.cols()) {
            return Err(NumError::Shape {
                op: "scale_cols",
                lhs: x.shape(),
                rhs: s.shape(),
            });
        }
        let mut out = x;
        for i in 0..out.rows() {
            for j in 0..out.cols() {
                out.set(i, j, out.get(i, j) * s.get(0, j));
            }
        }
        Ok(self.binary(v, Op::ScaleCols(self.id, v.id), out))
    }

    /// Frobenius norm; the gradient at the zero matrix is taken as zero.
    pub fn frobenius(self) -> Var<'t> {
        let v = Tensor::scalar(self.tape.value_of(self.id).frobenius());
        self.unary(Op::Frobenius(self.id), v)
    }

    /// Selects rows of an embedding table.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t>, NumError> {
        let table = self.tape.value_of(self.id).clone();
        let mut data = Vec::with_capacity(ids.len() * table.cols());
        for &i in ids {
            if i >= table.rows() {
                return Err(NumError::Index {
                    op: "gather_rows",
                    index: i,
                    len: table.rows(),
                });
            }
            data.extend_from_slice(table.row(i));
        }
        let v = Tensor::from_vec(ids.len(), table.cols(), data)?;
        Ok(self.unary(Op::GatherRows(self.id, ids.to_vec()), v))
    }

    /// Softmax cross-entropy of a logit vector against a class index.
    pub fn cross_entropy(self, label: usize) -> Result<Var<'t>, NumError> {
        let logits = self.tape.value_of(self.id).clone();
        if label >= logits.len() {
            return Err(NumError::Index {
                op: "cross_entropy",
                index: label,
                len: logits.len(),
            });
        }
        let loss = log_sum_exp(logits.data()) - logits.data()[label];
        Ok(self.unary(Op::CrossEntropy(self.id, label), Tensor::scalar(loss)))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_xtx_gradient_is_two_x() {
        let tape = Tape::new();
        let x = tape.var(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0], vec![4.0, 0.0]]));
        let y = x.t().matmul(x).unwrap().trace().unwrap();
        let g = tape.backward(y).unwrap().wrt(x);
        assert_eq!(g, x.value().scale(2.0));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_are_stable() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![1000.0, 0.0, -5.0]]));
        let p = x.softmax_rows().value();
        for c in 0..3 {
            assert!((p.get(0, c) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((p.get(1, 0) - 1.0).abs() < 1e-12);
        assert!(p.get(1, 1) < 1e-300 || p.get(1, 1) >= 0.0);
        assert!(p.is_finite());
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln2() {
        let tape = Tape::new();
        let x = tape.var(Tensor::from_rows(&[vec![0.0, 0.0]]));
        let l = x.cross_entropy(0).unwrap();
        assert!((l.item() - std::f64::consts::LN_2).abs() < 1e-15);
        let dominant = tape.var(Tensor::from_rows(&[vec![50.0, -50.0]]));
        assert!(dominant.cross_entropy(0).unwrap().item() < 1e-40);
        assert!(matches!(
            x.cross_entropy(2),
            Err(NumError::Index { index: 2, .. })
        ));
    }

    #[test]
    fn sigmoid_and_relu_basics() {
        assert_eq!(sigmoid(0.0), 0.5);
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![-3.0, 2.0]]));
        assert_eq!(x.relu().value().data(), &[0.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let tape = Tape::new();
        let x = tape.var(Tensor::zeros(2, 2));
        assert!(matches!(
            tape.backward(x),
            Err(NumError::NonScalarRoot((2, 2)))
        ));
    }

    #[test]
    fn frobenius_at_zero_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.var(Tensor::zeros(2, 3));
        let n = x.frobenius();
        let g = tape.backward(n).unwrap().wrt(x);
        assert_eq!(g, Tensor::zeros(2, 3));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::identity(2));
        let x = tape.var(Tensor::ones(2, 1));
        let y = a.matmul(x).unwrap().sum();
        let grads = tape.backward(y).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.wrt(x), Tensor::ones(2, 1));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let tape = Tape::new();
            let x = tape.var(Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.7]]));
            let y = x.matmul(x.t()).unwrap().sigmoid().softmax_rows().frobenius();
            tape.backward(y).unwrap().wrt(x)
        };
        assert_eq!(run(), run());
    }
}
