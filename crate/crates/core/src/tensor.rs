//! Dense row-major `f64` tensors with a define-by-run reverse-mode tape.
//!
//! Every differentiable operation goes through a [`Tape`]. An operation is
//! recorded only when at least one input is attached to the tape, so the same
//! code path serves training (parameters registered with [`Tape::leaf`]) and
//! inference (nothing registered, nothing recorded).

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("softmax over a zero-width row")]
    EmptyRow,
    #[error("data length {len} does not match shape {shape:?}")]
    Length { shape: Vec<usize>, len: usize },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Immutable dense tensor. Cloning is cheap: the buffer is shared.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
    node: Option<NodeId>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &&self.data[..])
            .field("node", &self.node)
            .finish()
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data[..] == other.data[..]
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::Length {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: data.into(),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n].into(),
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value].into(),
            node: None,
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::Shape {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    /// `n×1` column.
    pub fn column(values: &[f64]) -> Self {
        Tensor {
            shape: vec![values.len(), 1],
            data: values.into(),
            node: None,
        }
    }

    /// `1×n` row.
    pub fn row(values: &[f64]) -> Self {
        Tensor {
            shape: vec![1, values.len()],
            data: values.into(),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    /// Copy of the values with the tape link removed.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    /// Rows as owned vectors (2-D view).
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        let cols = self.cols();
        if cols == 0 {
            return vec![Vec::new(); self.rows()];
        }
        self.data.chunks(cols).map(<[f64]>::to_vec).collect()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same values, new shape.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::Length {
                shape: shape.to_vec(),
                len: self.data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            node: None,
        })
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Scale(f64),
    Sin,
    Relu,
    Transpose,
    SoftmaxRows,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    MatMul,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Unary(Unary, Tensor),
    Binary(Binary, Tensor, Tensor),
    ConcatColumns(Vec<Tensor>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    out: Tensor,
}

/// Deliberate backward-rule corruptions, used only as negative controls for
/// gradient checking.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    SinDerivativeSign,
}

/// Gradients keyed by the node id of each leaf.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    grads: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: &Tensor) -> Option<&Tensor> {
        leaf.node.and_then(|id| self.grads.get(&id))
    }

    /// Gradient of `leaf`, or zeros of its shape when the loss does not depend on it.
    pub fn get_or_zeros(&self, leaf: &Tensor) -> Tensor {
        self.get(leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(leaf.shape()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Single-owner operation record. One tape per execution context.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape == b.shape || b.is_scalar() {
        Ok(a.shape.clone())
    } else if a.is_scalar() {
        Ok(b.shape.clone())
    } else {
        Err(TensorError::Shape {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        })
    }
}

fn at(t: &Tensor, i: usize) -> f64 {
    if t.is_scalar() {
        t.data[0]
    } else {
        t.data[i]
    }
}

/// `a (m×k) · b (k×n)` into a fresh buffer.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Fault) -> Self {
        Tape {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Registers `value` as a differentiable leaf and returns the attached copy.
    pub fn leaf(&mut self, value: &Tensor) -> Tensor {
        let mut out = value.detach();
        out.node = Some(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            out: out.clone(),
        });
        out
    }

    fn record(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        let tracked = match &op {
            Op::Leaf => true,
            Op::Unary(_, a) => a.node.is_some(),
            Op::Binary(_, a, b) => a.node.is_some() || b.node.is_some(),
            Op::ConcatColumns(parts) => parts.iter().any(|p| p.node.is_some()),
        };
        let mut out = Tensor {
            shape,
            data: data.into(),
            node: None,
        };
        if tracked {
            out.node = Some(self.nodes.len());
            self.nodes.push(Node {
                op,
                out: out.clone(),
            });
        }
        out
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = a.dims2("matmul")?;
        let (k2, n) = b.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let data = matmul_raw(&a.data, &b.data, m, k, n);
        Ok(self.record(
            Op::Binary(Binary::MatMul, a.clone(), b.clone()),
            vec![m, n],
            data,
        ))
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        let (m, n) = a.dims2("transpose")?;
        let data = transpose_raw(&a.data, m, n);
        Ok(self.record(Op::Unary(Unary::Transpose, a.clone()), vec![n, m], data))
    }

    /// Numerically stable softmax over each row of a matrix.
    pub fn softmax_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        let (m, n) = a.dims2("softmax_rows")?;
        if n == 0 {
            return Err(TensorError::EmptyRow);
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &a.data[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[i * n..(i + 1) * n];
            let mut total = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - max).exp();
                total += *o;
            }
            for o in out.iter_mut() {
                *o /= total;
            }
        }
        Ok(self.record(Op::Unary(Unary::SoftmaxRows, a.clone()), vec![m, n], data))
    }

    fn binary_elementwise(
        &mut self,
        kind: Binary,
        name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let shape = broadcast_shape(name, a, b)?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| f(at(a, i), at(b, i))).collect();
        Ok(self.record(Op::Binary(kind, a.clone(), b.clone()), shape, data))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(Binary::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(Binary::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(Binary::Mul, "mul", a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: &Tensor, factor: f64) -> Tensor {
        let data = a.data.iter().map(|x| x * factor).collect();
        self.record(
            Op::Unary(Unary::Scale(factor), a.clone()),
            a.shape.clone(),
            data,
        )
    }

    pub fn sin(&mut self, a: &Tensor) -> Tensor {
        let data = a.data.iter().map(|x| x.sin()).collect();
        self.record(Op::Unary(Unary::Sin, a.clone()), a.shape.clone(), data)
    }

    pub fn relu(&mut self, a: &Tensor) -> Tensor {
        let data = a.data.iter().map(|&x| x.max(0.0)).collect();
        self.record(Op::Unary(Unary::Relu, a.clone()), a.shape.clone(), data)
    }

    /// Sum of all entries as a one-element tensor.
    pub fn sum(&mut self, a: &Tensor) -> Tensor {
        let total = a.data.iter().sum();
        self.record(Op::Unary(Unary::Sum, a.clone()), vec![1], vec![total])
    }

    /// Column-wise concatenation of matrices sharing a row count.
    pub fn concat_columns(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_columns of zero parts".into()))?;
        let (rows, _) = first.dims2("concat_columns")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, w) = p.dims2("concat_columns")?;
            if r != rows {
                return Err(TensorError::Shape {
                    op: "concat_columns",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[i * w..(i + 1) * w]);
            }
        }
        Ok(self.record(Op::ConcatColumns(parts.to_vec()), vec![rows, total], data))
    }

    /// Reverse sweep from a scalar `loss`, which must be the last recorded
    /// node. Returns the gradient of every leaf reachable from the loss and
    /// clears the tape.
    pub fn backward(&mut self, loss: &Tensor) -> Result<Gradients> {
        if !loss.is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape
            )));
        }
        let root = match loss.node {
            Some(id) if id + 1 == self.nodes.len() => id,
            _ => {
                return Err(TensorError::Contract(
                    "loss is not the last node of the tape".into(),
                ))
            }
        };
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0]);
        let nodes = std::mem::take(&mut self.nodes);
        let mut leaves = HashMap::new();

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {
                    leaves.insert(
                        id,
                        Tensor {
                            shape: node.out.shape.clone(),
                            data: g.into(),
                            node: None,
                        },
                    );
                }
                Op::Unary(kind, a) => {
                    let ga = self.unary_grad(*kind, a, &node.out, &g);
                    accumulate(&mut grads, a, ga);
                }
                Op::Binary(kind, a, b) => match kind {
                    Binary::MatMul => {
                        let (m, k) = (a.shape[0], a.shape[1]);
                        let n = b.shape[1];
                        if a.node.is_some() {
                            let bt = transpose_raw(&b.data, k, n);
                            accumulate(&mut grads, a, matmul_raw(&g, &bt, m, n, k));
                        }
                        if b.node.is_some() {
                            let at_ = transpose_raw(&a.data, m, k);
                            accumulate(&mut grads, b, matmul_raw(&at_, &g, k, m, n));
                        }
                    }
                    Binary::Add | Binary::Sub | Binary::Mul => {
                        let (da, db): (Vec<f64>, Vec<f64>) = match kind {
                            Binary::Add => (g.clone(), g.clone()),
                            Binary::Sub => (g.clone(), g.iter().map(|v| -v).collect()),
                            _ => (
                                g.iter().enumerate().map(|(i, v)| v * at(b, i)).collect(),
                                g.iter().enumerate().map(|(i, v)| v * at(a, i)).collect(),
                            ),
                        };
                        accumulate(&mut grads, a, reduce_broadcast(a, da));
                        accumulate(&mut grads, b, reduce_broadcast(b, db));
                    }
                },
                Op::ConcatColumns(parts) => {
                    let rows = node.out.shape[0];
                    let total = node.out.shape[1];
                    let mut offset = 0;
                    for p in parts {
                        let w = p.shape[1];
                        if p.node.is_some() {
                            let mut gp = Vec::with_capacity(rows * w);
                            for i in 0..rows {
                                gp.extend_from_slice(
                                    &g[i * total + offset..i * total + offset + w],
                                );
                            }
                            accumulate(&mut grads, p, gp);
                        }
                        offset += w;
                    }
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn unary_grad(&self, kind: Unary, a: &Tensor, out: &Tensor, g: &[f64]) -> Vec<f64> {
        match kind {
            Unary::Scale(f) => g.iter().map(|v| v * f).collect(),
            Unary::Sin => {
                let sign = if self.fault == Some(Fault::SinDerivativeSign) {
                    -1.0
                } else {
                    1.0
                };
                g.iter()
                    .zip(a.data.iter())
                    .map(|(v, x)| sign * v * x.cos())
                    .collect()
            }
            Unary::Relu => g
                .iter()
                .zip(a.data.iter())
                .map(|(v, &x)| if x > 0.0 { *v } else { 0.0 })
                .collect(),
            Unary::Transpose => transpose_raw(g, out.shape[0], out.shape[1]),
            Unary::SoftmaxRows => {
                let (m, n) = (out.shape[0], out.shape[1]);
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    let s = &out.data[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = s.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for j in 0..n {
                        ga[i * n + j] = s[j] * (gr[j] - dot);
                    }
                }
                ga
            }
            Unary::Sum => vec![g[0]; a.data.len()],
        }
    }
}

fn reduce_broadcast(input: &Tensor, grad: Vec<f64>) -> Vec<f64> {
    if input.data.len() == grad.len() {
        grad
    } else {
        vec![grad.iter().sum()]
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], input: &Tensor, g: Vec<f64>) {
    let Some(id) = input.node else { return };
    match &mut grads[id] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        slot => *slot = Some(g),
    }
}

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Maximum relative error per parameter tensor, in input order.
    pub per_tensor: Vec<f64>,
    /// Maximum absolute difference per parameter tensor.
    pub per_tensor_abs: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.per_tensor.iter().copied().fold(0.0, f64::max)
    }
}

/// Relative error measure used by [`finite_diff_check`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of `f` against central differences,
/// perturbing each scalar of `params` by `±eps`.
///
/// `f` builds a scalar loss on the given tape from the given parameters; it
/// must be deterministic.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    finite_diff_check_on(Tape::new, f, params, eps)
}

#[doc(hidden)]
pub fn finite_diff_check_on<T, F>(
    make_tape: T,
    f: F,
    params: &[Tensor],
    eps: f64,
) -> Result<GradCheck>
where
    T: Fn() -> Tape,
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    let mut tape = make_tape();
    let attached: Vec<Tensor> = params.iter().map(|p| tape.leaf(p)).collect();
    let loss = f(&mut tape, &attached)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor> = attached.iter().map(|p| grads.get_or_zeros(p)).collect();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        f(&mut t, ps)?.item()
    };

    let mut per_tensor = Vec::with_capacity(params.len());
    let mut per_tensor_abs = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor> = params.iter().map(Tensor::detach).collect();
    for (pi, p) in params.iter().enumerate() {
        let mut worst: f64 = 0.0;
        let mut worst_abs: f64 = 0.0;
        for i in 0..p.len() {
            let base = p.data.to_vec();
            let mut plus = base.clone();
            plus[i] += eps;
            let mut minus = base.clone();
            minus[i] -= eps;
            work[pi] = Tensor::new(p.shape.clone(), plus)?;
            let fp = eval(&work)?;
            work[pi] = Tensor::new(p.shape.clone(), minus)?;
            let fm = eval(&work)?;
            work[pi] = p.detach();
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[pi].data[i], numeric));
            worst_abs = worst_abs.max((analytic[pi].data[i] - numeric).abs());
        }
        per_tensor.push(worst);
        per_tensor_abs.push(worst_abs);
    }
    Ok(GradCheck {
        per_tensor,
        per_tensor_abs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(i, p) * b.get(p, j);
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_selector() {
        let mut tape = Tape::new();
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(tape.matmul(&eye, &m).unwrap().data(), m.data());

        let sel = Tensor::row(&[1.0, 0.0]);
        let col = Tensor::column(&[5.0, 7.0]);
        let out = tape.matmul(&sel, &col).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.data(), &[5.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let out = Tape::new().matmul(&a, &b).unwrap();
        for (x, y) in out.data().iter().zip(triple_loop(&a, &b)) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Tape::new()
            .matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3]))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_known_rows() {
        let mut tape = Tape::new();
        let uniform = tape.softmax_rows(&Tensor::row(&[3.5; 4])).unwrap();
        assert_eq!(uniform.data(), &[0.25; 4]);
        let single = tape.softmax_rows(&Tensor::row(&[-12.0])).unwrap();
        assert_eq!(single.data(), &[1.0]);
        let analytic = tape
            .softmax_rows(&Tensor::row(&[0.0, 3f64.ln()]))
            .unwrap();
        assert!((analytic.data()[0] - 0.25).abs() < 1e-15);
        assert!((analytic.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_zero_width() {
        let err = Tape::new().softmax_rows(&Tensor::zeros(&[2, 0])).unwrap_err();
        assert_eq!(err, TensorError::EmptyRow);
    }

    #[test]
    fn elementwise_known_values() {
        let mut tape = Tape::new();
        let s = tape.sin(&Tensor::row(&[0.0, std::f64::consts::FRAC_PI_2]));
        assert_eq!(s.data(), &[0.0, 1.0]);
        let r = tape.relu(&Tensor::row(&[-1.0, 2.0]));
        assert_eq!(r.data(), &[0.0, 2.0]);
        let a = tape
            .add(&Tensor::row(&[1.0, 2.0]), &Tensor::row(&[3.0, 4.0]))
            .unwrap();
        assert_eq!(a.data(), &[4.0, 6.0]);
        let b = tape
            .mul(&Tensor::row(&[1.0, 2.0]), &Tensor::scalar(3.0))
            .unwrap();
        assert_eq!(b.data(), &[3.0, 6.0]);
        assert!(tape
            .add(&Tensor::row(&[1.0, 2.0]), &Tensor::row(&[1.0, 2.0, 3.0]))
            .is_err());
    }

    #[test]
    fn concat_columns_cases() {
        let mut tape = Tape::new();
        let out = tape
            .concat_columns(&[Tensor::column(&[1.0, 2.0]), Tensor::column(&[3.0, 4.0])])
            .unwrap();
        assert_eq!(out.shape(), &[2, 2]);
        assert_eq!(out.data(), &[1.0, 3.0, 2.0, 4.0]);

        let single = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(tape.concat_columns(&[single.clone()]).unwrap(), single);

        let parts: Vec<Tensor> = (0..8).map(|_| Tensor::zeros(&[3, 1])).collect();
        assert_eq!(tape.concat_columns(&parts).unwrap().shape(), &[3, 8]);

        assert!(tape
            .concat_columns(&[Tensor::zeros(&[2, 1]), Tensor::zeros(&[3, 1])])
            .is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let p = tape.leaf(&Tensor::full(&[2, 3], 0.7));
        let loss = tape.sum(&p);
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&p).unwrap().data(), &[1.0; 6]);
        assert!(tape.is_empty());
    }

    #[test]
    fn backward_of_half_square_norm_is_identity() {
        let mut tape = Tape::new();
        let p = tape.leaf(&Tensor::row(&[1.5, -2.0, 0.25]));
        let sq = tape.mul(&p, &p).unwrap();
        let s = tape.sum(&sq);
        let loss = tape.scale(&s, 0.5);
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&p).unwrap().data(), p.data());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let p = tape.leaf(&Tensor::zeros(&[2]));
        assert!(matches!(
            tape.backward(&p),
            Err(TensorError::Contract(_))
        ));
    }

    #[test]
    fn gradcheck_polynomial_and_sine() {
        let square = |t: &mut Tape, p: &[Tensor]| -> Result<Tensor> {
            let sq = t.mul(&p[0], &p[0])?;
            Ok(t.sum(&sq))
        };
        let r = finite_diff_check(square, &[Tensor::scalar(3.0)], 1e-5).unwrap();
        assert!(r.max_rel_error() < 1e-9, "{r:?}");

        let sine = |t: &mut Tape, p: &[Tensor]| -> Result<Tensor> {
            let s = t.sin(&p[0]);
            Ok(t.sum(&s))
        };
        let r = finite_diff_check(sine, &[Tensor::scalar(1.0)], 1e-5).unwrap();
        assert!(r.max_rel_error() < 1e-8, "{r:?}");
    }

    #[test]
    fn gradcheck_detects_faulty_rule() {
        let sine = |t: &mut Tape, p: &[Tensor]| -> Result<Tensor> {
            let s = t.sin(&p[0]);
            Ok(t.sum(&s))
        };
        let r = finite_diff_check_on(
            || Tape::with_fault(Fault::SinDerivativeSign),
            sine,
            &[Tensor::scalar(1.0)],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error() > 0.5);
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 5);
        let c = random(&mut rng, 3, 2);
        let f = |t: &mut Tape, p: &[Tensor]| -> Result<Tensor> {
            let ab = t.matmul(&p[0], &p[1])?;
            let sm = t.softmax_rows(&ab)?;
            let s = t.sin(&sm);
            let joined = t.concat_columns(&[s, p[2].clone()])?;
            let tr = t.transpose(&joined)?;
            let sq = t.mul(&tr, &tr)?;
            let sc = t.scale(&sq, 1.7);
            let shifted = t.sub(&sc, &Tensor::scalar(0.3))?;
            let r = t.relu(&shifted);
            let total = t.sum(&r);
            let extra = t.sum(&p[2]);
            t.add(&total, &extra)
        };
        let r = finite_diff_check(f, &[a, b, c], 1e-5).unwrap();
        assert!(r.max_rel_error() <= 1e-5, "{r:?}");
    }

    proptest! {
        #[test]
        fn softmax_rows_normalized_and_shift_invariant(
            row in proptest::collection::vec(-30.0f64..30.0, 1..12),
            shift in -50.0f64..50.0,
        ) {
            let mut tape = Tape::new();
            let s = tape.softmax_rows(&Tensor::row(&row)).unwrap();
            let total: f64 = s.data().iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(s.data().iter().all(|&v| v > 0.0 && v <= 1.0));
            let moved: Vec<f64> = row.iter().map(|v| v + shift).collect();
            let s2 = tape.softmax_rows(&Tensor::row(&moved)).unwrap();
            for (x, y) in s.data().iter().zip(s2.data()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn matmul_agrees_with_oracle(m in 1usize..64, k in 1usize..64, n in 1usize..64, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, m, k);
            let b = random(&mut rng, k, n);
            let out = Tape::new().matmul(&a, &b).unwrap();
            for (x, y) in out.data().iter().zip(triple_loop(&a, &b)) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn ops_are_pure(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, 4, 3);
            let b = random(&mut rng, 3, 5);
            let run = || {
                let mut t = Tape::new();
                let x = t.matmul(&a, &b).unwrap();
                let y = t.softmax_rows(&x).unwrap();
                t.sin(&y).to_vec()
            };
            prop_assert_eq!(run(), run());
        }
    }
}
