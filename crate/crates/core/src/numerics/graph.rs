//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, so the tape is
//! already a topological order and `backward` is one reverse sweep.

use std::cell::Cell;

use super::{sigmoid, softplus, Scalar, Tensor};
use crate::error::{Error, Result};

/// Exponent arguments are clamped to `[-EXP_CLAMP, EXP_CLAMP]`.
pub const EXP_CLAMP: f64 = 30.0;
/// `log` arguments are floored at this value.
pub const LOG_FLOOR: f64 = 1e-30;
/// Rows with a smaller norm are not projected onto the sphere.
pub const SPHERE_EPS: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    AddRow,
    Sub,
    Mul,
    MulCol,
    DivCol,
    Scale,
    AddScalar,
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
    Softplus,
    Abs,
    Square,
    Sum,
    Mean,
    SumCols,
    L2NormRows,
    SphereProject,
    ConcatCols,
    ConcatRows,
    SliceRows,
    Detach,
}

impl OpKind {
    /// Every op with a backward rule.
    pub const DIFFERENTIABLE: [OpKind; 26] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::AddRow,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::MulCol,
        OpKind::DivCol,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Neg,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::Relu,
        OpKind::Softplus,
        OpKind::Abs,
        OpKind::Square,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SumCols,
        OpKind::L2NormRows,
        OpKind::SphereProject,
        OpKind::ConcatCols,
        OpKind::ConcatRows,
        OpKind::SliceRows,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::AddRow => "add_row",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::MulCol => "mul_col",
            OpKind::DivCol => "div_col",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Neg => "neg",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Softplus => "softplus",
            OpKind::Abs => "abs",
            OpKind::Square => "square",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumCols => "sum_cols",
            OpKind::L2NormRows => "l2_norm_rows",
            OpKind::SphereProject => "sphere_project",
            OpKind::ConcatCols => "concat_cols",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SliceRows => "slice_rows",
            OpKind::Detach => "detach",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::DIFFERENTIABLE
            .iter()
            .chain([OpKind::Leaf, OpKind::Detach].iter())
            .copied()
            .find(|k| k.name() == name)
    }
}

thread_local! {
    static SIGN_FAULT: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// While alive, the backward rule of one op kind on this thread returns
/// negated gradients. Used as a negative control for gradient checks.
pub struct FaultGuard {
    previous: Option<OpKind>,
}

impl FaultGuard {
    pub fn flip_sign(kind: OpKind) -> Self {
        let previous = SIGN_FAULT.with(|f| f.replace(Some(kind)));
        FaultGuard { previous }
    }
}

impl Drop for FaultGuard {
    fn drop(&mut self) {
        SIGN_FAULT.with(|f| f.set(self.previous));
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    L2NormRows(Var),
    SphereProject(Var, T),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    SliceRows(Var, usize, usize),
    Detach,
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::MulCol(..) => OpKind::MulCol,
            Op::DivCol(..) => OpKind::DivCol,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Neg(..) => OpKind::Neg,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Relu(..) => OpKind::Relu,
            Op::Softplus(..) => OpKind::Softplus,
            Op::Abs(..) => OpKind::Abs,
            Op::Square(..) => OpKind::Square,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SumCols(..) => OpKind::SumCols,
            Op::L2NormRows(..) => OpKind::L2NormRows,
            Op::SphereProject(..) => OpKind::SphereProject,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::SliceRows(..) => OpKind::SliceRows,
            Op::Detach => OpKind::Detach,
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Moves out the gradients of `vars`, zero-filled where nothing flowed.
    pub fn collect(&mut self, graph: &Graph<T>, vars: &[Var]) -> Vec<Tensor<T>> {
        vars.iter()
            .map(|&v| {
                self.grads[v.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
            })
            .collect()
    }
}

/// Computation graph over `[rows, cols]` tensors.
#[derive(Clone, Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

fn check_matrix<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            left: t.shape().to_vec(),
            right: vec![0, 0],
        })
    }
}

fn mismatch<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].op.kind()
    }

    /// Scalar value of a `[1, 1]` node.
    pub fn scalar(&self, var: Var) -> Option<T> {
        self.value(var).item()
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        check_matrix("leaf", &value)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf: gradients are reported for it.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Result<Var> {
        let kind = op.kind();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: kind.name() });
        }
        let requires_grad = match &op {
            Op::Leaf | Op::Detach => false,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulCol(a, b)
            | Op::DivCol(a, b)
            | Op::ConcatCols(a, b)
            | Op::ConcatRows(a, b) => self.requires_grad(*a) || self.requires_grad(*b),
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Neg(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::Abs(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumCols(a)
            | Op::L2NormRows(a)
            | Op::SphereProject(a, _)
            | Op::SliceRows(a, _, _) => self.requires_grad(*a),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- binary ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(mismatch("matmul", ta, tb));
        }
        let out = matmul(ta, tb);
        self.push(Op::MatMul(a, b), out)
    }

    fn zip_same(&mut self, op: Op<T>, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op.kind().name(), ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(op, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    /// `a + row` where `row` is `[1, cols]` and is broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(mismatch("add_row", ta, tr));
        }
        let cols = ta.cols();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(cols.max(1)) {
            for (x, &b) in chunk.iter_mut().zip(tr.data()) {
                *x = *x + b;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(Op::AddRow(a, row), out)
    }

    fn col_broadcast(&mut self, op: Op<T>, a: Var, col: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(col));
        if tc.cols() != 1 || tc.rows() != ta.rows() {
            return Err(mismatch(op.kind().name(), ta, tc));
        }
        let cols = ta.cols();
        let mut data = ta.data().to_vec();
        for (r, chunk) in data.chunks_mut(cols.max(1)).enumerate() {
            let c = tc.data()[r];
            for x in chunk.iter_mut() {
                *x = f(*x, c);
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(op, out)
    }

    /// Scales row `i` of `a` by `col[i]`; `col` is `[rows, 1]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.col_broadcast(Op::MulCol(a, col), a, col, |x, c| x * c)
    }

    /// Divides row `i` of `a` by `col[i]`.
    pub fn div_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.col_broadcast(Op::DivCol(a, col), a, col, |x, c| x / c)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(mismatch("concat_cols", ta, tb));
        }
        let (rows, ca, cb) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let out = Tensor::matrix(rows, ca + cb, data)?;
        self.push(Op::ConcatCols(a, b), out)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(mismatch("concat_rows", ta, tb));
        }
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let out = Tensor::matrix(ta.rows() + tb.rows(), ta.cols(), data)?;
        self.push(Op::ConcatRows(a, b), out)
    }

    // ---- unary ops --------------------------------------------------------

    fn unary(&mut self, op: Op<T>, a: Var, f: impl Fn(T) -> T) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push(op, out)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary(Op::Scale(a, s), a, |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary(Op::AddScalar(a, s), a, |x| x + s)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Neg(a), a, |x| -x)
    }

    /// `exp(clamp(x, -30, 30))`.
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let c = T::lit(EXP_CLAMP);
        self.unary(Op::Exp(a), a, |x| x.max(-c).min(c).exp())
    }

    /// `ln(max(x, 1e-30))`.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let floor = T::lit(LOG_FLOOR);
        self.unary(Op::Log(a), a, |x| x.max(floor).ln())
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Tanh(a), a, |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Sigmoid(a), a, sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Relu(a), a, |x| x.max(T::zero()))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Softplus(a), a, softplus)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Abs(a), a, |x| x.abs())
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Square(a), a, |x| x * x)
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).clone();
        self.push(Op::Detach, out)
    }

    // ---- reductions and reshaping ----------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let s: T = t.data().iter().copied().sum();
        let m = s / T::lit(t.numel() as f64);
        self.push(Op::Mean(a), Tensor::scalar(m))
    }

    /// Per-row sum: `[rows, cols] -> [rows, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = (0..t.rows()).map(|r| t.row(r).iter().copied().sum()).collect();
        let out = Tensor::matrix(t.rows(), 1, data)?;
        self.push(Op::SumCols(a), out)
    }

    /// Per-row Euclidean norm: `[rows, cols] -> [rows, 1]`.
    pub fn l2_norm_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = (0..t.rows())
            .map(|r| t.row(r).iter().map(|&x| x * x).sum::<T>().sqrt())
            .collect();
        let out = Tensor::matrix(t.rows(), 1, data)?;
        self.push(Op::L2NormRows(a), out)
    }

    /// Projects each row onto the sphere of the given radius. Rows with norm
    /// below [`SPHERE_EPS`] map to `radius * e_1` and pass no gradient.
    pub fn sphere_project(&mut self, a: Var, radius: T) -> Result<Var> {
        let t = self.value(a);
        let cols = t.cols();
        let eps = T::lit(SPHERE_EPS);
        let mut data = Vec::with_capacity(t.numel());
        for r in 0..t.rows() {
            let row = t.row(r);
            let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            if norm < eps {
                log::warn!("sphere_project: row {r} has norm {norm}; substituting a fixed direction");
                data.push(radius);
                data.extend(std::iter::repeat_n(T::zero(), cols.saturating_sub(1)));
            } else {
                data.extend(row.iter().map(|&x| radius * x / norm));
            }
        }
        let out = Tensor::matrix(t.rows(), cols, data)?;
        self.push(Op::SphereProject(a, radius), out)
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start >= end || end > t.rows() {
            return Err(Error::invalid(format!(
                "slice_rows {start}..{end} out of range for {:?}",
                t.shape()
            )));
        }
        let cols = t.cols();
        let data = t.data()[start * cols..end * cols].to_vec();
        let out = Tensor::matrix(end - start, cols, data)?;
        self.push(Op::SliceRows(a, start, end), out)
    }

    // ---- differentiation --------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(lt.shape(), T::one()));
        let fault = SIGN_FAULT.with(Cell::get);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let flip = fault == Some(node.op.kind());
            let mut contributions = self.local_grads(node, &g);
            if flip {
                for (_, t) in contributions.iter_mut() {
                    *t = t.map(|x| -x);
                }
            }
            for (var, contrib) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let y = &node.value;
        let zip = |x: &Tensor<T>, f: &dyn Fn(T, T) -> T| -> Tensor<T> {
            let data = g.data().iter().zip(x.data()).map(|(&gi, &xi)| f(gi, xi)).collect();
            Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
        };
        match node.op {
            Op::Leaf | Op::Detach => vec![],
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let mut out = Vec::with_capacity(2);
                if self.requires_grad(a) {
                    out.push((a, matmul_a_bt(g, tb)));
                }
                if self.requires_grad(b) {
                    out.push((b, matmul_at_b(ta, g)));
                }
                out
            }
            Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            Op::Sub(a, b) => vec![(a, g.clone()), (b, g.map(|x| -x))],
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                vec![(a, zip(tb, &|gi, bi| gi * bi)), (b, zip(ta, &|gi, ai| gi * ai))]
            }
            Op::AddRow(a, row) => {
                let cols = g.cols();
                let mut gb = vec![T::zero(); cols];
                for r in 0..g.rows() {
                    for (acc, &v) in gb.iter_mut().zip(g.row(r)) {
                        *acc = *acc + v;
                    }
                }
                vec![(a, g.clone()), (row, Tensor::matrix(1, cols, gb).expect("shape"))]
            }
            Op::MulCol(a, col) => {
                let (ta, tc) = (self.value(a), self.value(col));
                let mut ga = g.clone();
                let mut gc = Vec::with_capacity(tc.rows());
                for r in 0..g.rows() {
                    let c = tc.data()[r];
                    let cols = g.cols();
                    let mut acc = T::zero();
                    for j in 0..cols {
                        ga.data_mut()[r * cols + j] = g.get(r, j) * c;
                        acc = acc + g.get(r, j) * ta.get(r, j);
                    }
                    gc.push(acc);
                }
                vec![(a, ga), (col, Tensor::matrix(tc.rows(), 1, gc).expect("shape"))]
            }
            Op::DivCol(a, col) => {
                let (ta, tc) = (self.value(a), self.value(col));
                let mut ga = g.clone();
                let mut gc = Vec::with_capacity(tc.rows());
                let cols = g.cols();
                for r in 0..g.rows() {
                    let c = tc.data()[r];
                    let mut acc = T::zero();
                    for j in 0..cols {
                        ga.data_mut()[r * cols + j] = g.get(r, j) / c;
                        acc = acc - g.get(r, j) * ta.get(r, j) / (c * c);
                    }
                    gc.push(acc);
                }
                vec![(a, ga), (col, Tensor::matrix(tc.rows(), 1, gc).expect("shape"))]
            }
            Op::Scale(a, s) => vec![(a, g.map(|x| x * s))],
            Op::AddScalar(a, _) => vec![(a, g.clone())],
            Op::Neg(a) => vec![(a, g.map(|x| -x))],
            Op::Exp(a) => {
                let c = T::lit(EXP_CLAMP);
                let x = self.value(a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(y.data())
                    .map(|((&gi, &xi), &yi)| if xi.abs() <= c { gi * yi } else { T::zero() })
                    .collect();
                vec![(a, Tensor::new(x.shape().to_vec(), data).expect("shape"))]
            }
            Op::Log(a) => {
                let floor = T::lit(LOG_FLOOR);
                vec![(
                    a,
                    zip(self.value(a), &|gi, xi| if xi > floor { gi / xi } else { T::zero() }),
                )]
            }
            Op::Tanh(a) => vec![(a, zip(y, &|gi, yi| gi * (T::one() - yi * yi)))],
            Op::Sigmoid(a) => vec![(a, zip(y, &|gi, yi| gi * yi * (T::one() - yi)))],
            Op::Relu(a) => {
                vec![(
                    a,
                    zip(self.value(a), &|gi, xi| if xi > T::zero() { gi } else { T::zero() }),
                )]
            }
            Op::Softplus(a) => vec![(a, zip(self.value(a), &|gi, xi| gi * sigmoid(xi)))],
            Op::Abs(a) => vec![(
                a,
                zip(self.value(a), &|gi, xi| {
                    if xi > T::zero() {
                        gi
                    } else if xi < T::zero() {
                        -gi
                    } else {
                        T::zero()
                    }
                }),
            )],
            Op::Square(a) => vec![(a, zip(self.value(a), &|gi, xi| gi * (xi + xi)))],
            Op::Sum(a) => {
                let gv = g.data()[0];
                vec![(a, Tensor::filled(self.value(a).shape(), gv))]
            }
            Op::Mean(a) => {
                let t = self.value(a);
                let gv = g.data()[0] / T::lit(t.numel() as f64);
                vec![(a, Tensor::filled(t.shape(), gv))]
            }
            Op::SumCols(a) => {
                let t = self.value(a);
                let cols = t.cols();
                let mut data = Vec::with_capacity(t.numel());
                for r in 0..t.rows() {
                    data.extend(std::iter::repeat_n(g.data()[r], cols));
                }
                vec![(a, Tensor::new(t.shape().to_vec(), data).expect("shape"))]
            }
            Op::L2NormRows(a) => {
                let t = self.value(a);
                let cols = t.cols();
                let mut data = Vec::with_capacity(t.numel());
                for r in 0..t.rows() {
                    let n = y.data()[r];
                    let gr = g.data()[r];
                    data.extend(
                        t.row(r)
                            .iter()
                            .map(|&x| if n > T::zero() { gr * x / n } else { T::zero() }),
                    );
                }
                debug_assert_eq!(data.len(), t.rows() * cols);
                vec![(a, Tensor::new(t.shape().to_vec(), data).expect("shape"))]
            }
            Op::SphereProject(a, radius) => {
                let t = self.value(a);
                let eps = T::lit(SPHERE_EPS);
                let mut data = Vec::with_capacity(t.numel());
                for r in 0..t.rows() {
                    let row = t.row(r);
                    let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
                    let gr = g.row(r);
                    if norm < eps {
                        data.extend(std::iter::repeat_n(T::zero(), row.len()));
                        continue;
                    }
                    // d(r u)/dz = (r/|z|)(I - u u^T), u = z/|z|
                    let dot: T = row.iter().zip(gr).map(|(&z, &gv)| z * gv).sum::<T>() / norm;
                    data.extend(
                        row.iter()
                            .zip(gr)
                            .map(|(&z, &gv)| radius / norm * (gv - z / norm * dot)),
                    );
                }
                vec![(a, Tensor::new(t.shape().to_vec(), data).expect("shape"))]
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(a).cols();
                let cb = self.value(b).cols();
                let rows = g.rows();
                let mut ga = Vec::with_capacity(rows * ca);
                let mut gb = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    let row = g.row(r);
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                vec![
                    (a, Tensor::matrix(rows, ca, ga).expect("shape")),
                    (b, Tensor::matrix(rows, cb, gb).expect("shape")),
                ]
            }
            Op::ConcatRows(a, b) => {
                let ra = self.value(a).rows();
                let cols = g.cols();
                let split = ra * cols;
                vec![
                    (a, Tensor::matrix(ra, cols, g.data()[..split].to_vec()).expect("shape")),
                    (
                        b,
                        Tensor::matrix(g.rows() - ra, cols, g.data()[split..].to_vec()).expect("shape"),
                    ),
                ]
            }
            Op::SliceRows(a, start, end) => {
                let t = self.value(a);
                let cols = t.cols();
                let mut out = Tensor::zeros(t.shape());
                out.data_mut()[start * cols..end * cols].copy_from_slice(g.data());
                vec![(a, out)]
            }
        }
    }

    /// Which side of every non-differentiable point (relu/abs kinks, clamp
    /// boundaries) each recorded input lies on. Two graphs with equal patterns
    /// evaluate the same smooth branch, so a finite difference between them
    /// is valid.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        let exp_c = T::lit(EXP_CLAMP);
        let floor = T::lit(LOG_FLOOR);
        let eps = T::lit(SPHERE_EPS);
        for node in &self.nodes {
            match node.op {
                Op::Relu(a) => pattern.extend(self.value(a).data().iter().map(|&x| x > T::zero())),
                Op::Abs(a) => pattern.extend(self.value(a).data().iter().map(|&x| x > T::zero())),
                Op::Exp(a) => pattern.extend(self.value(a).data().iter().map(|&x| x.abs() <= exp_c)),
                Op::Log(a) => pattern.extend(self.value(a).data().iter().map(|&x| x > floor)),
                Op::SphereProject(a, _) => {
                    let t = self.value(a);
                    pattern.extend((0..t.rows()).map(|r| t.row(r).iter().map(|&x| x * x).sum::<T>().sqrt() >= eps))
                }
                _ => {}
            }
        }
        pattern
    }
}

/// `a · b`.
pub(crate) fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    let mut c = vec![T::zero(); k * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..k {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..m {
            let aip = ad[i * m + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj = *cj + aip * bj;
            }
        }
    }
    Tensor::matrix(k, n, c).expect("matmul shape")
}

/// `g · bᵀ` for `g: [k, n]`, `b: [m, n]`.
fn matmul_a_bt<T: Scalar>(g: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    // Transposing first keeps the inner loop contiguous and vectorizable.
    let (m, n) = (b.rows(), b.cols());
    let bd = b.data();
    let mut bt = vec![T::zero(); m * n];
    for p in 0..m {
        for j in 0..n {
            bt[j * m + p] = bd[p * n + j];
        }
    }
    matmul(g, &Tensor::matrix(n, m, bt).expect("transpose shape"))
}

/// `aᵀ · g` for `a: [k, m]`, `g: [k, n]`.
fn matmul_at_b<T: Scalar>(a: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let (k, m, n) = (a.rows(), a.cols(), g.cols());
    let mut out = vec![T::zero(); m * n];
    for i in 0..k {
        let arow = a.row(i);
        let grow = g.row(i);
        for p in 0..m {
            let aip = arow[p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gj) in orow.iter_mut().zip(grow) {
                *o = *o + aip * gj;
            }
        }
    }
    Tensor::matrix(m, n, out).expect("matmul shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(1, 1, &[0.0])).unwrap();
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.scalar(y), Some(0.5));
    }

    #[test]
    fn concat_row_vectors() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(1, 2, &[1.0, 2.0])).unwrap();
        let b = g.constant(t(1, 1, &[3.0])).unwrap();
        let c = g.concat_cols(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn softplus_of_zero_is_ln2() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(1, 1, &[0.0])).unwrap();
        let y = g.softplus(x).unwrap();
        assert!((g.scalar(y).unwrap() - std::f64::consts::LN_2).abs() < 1e-14);
    }

    #[test]
    fn derivative_of_square_at_three() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(1, 1, &[3.0])).unwrap();
        let y = g.square(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn derivative_of_sigmoid_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(1, 1, &[0.0])).unwrap();
        let y = g.sigmoid(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(2, 3, &[0.0; 6])).unwrap();
        let b = g.constant(t(2, 3, &[0.0; 6])).unwrap();
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_leaf_rejected() {
        let mut g = Graph::<f32>::new();
        let bad = Tensor::matrix(1, 2, vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(g.constant(bad), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(1, 2, &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn exp_is_clamped() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::matrix(1, 1, vec![1000.0]).unwrap()).unwrap();
        let y = g.exp(x).unwrap();
        assert_eq!(g.scalar(y), Some(30f32.exp()));
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(1, 1, &[2.0])).unwrap();
        let d = g.detach(x).unwrap();
        let y = g.mul(x, d).unwrap();
        let grads = g.backward(y).unwrap();
        // d/dx (x * stop(x)) = stop(x)
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn degenerate_sphere_row_substitutes_axis() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(2, 2, &[0.0, 0.0, 3.0, 4.0])).unwrap();
        let y = g.sphere_project(x, 2.0).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 0.0, 1.2, 1.6]);
    }

    #[test]
    fn fault_guard_flips_one_rule() {
        let run = || {
            let mut g = Graph::<f64>::new();
            let x = g.param(t(1, 1, &[0.3])).unwrap();
            let y = g.tanh(x).unwrap();
            g.backward(y).unwrap().get(x).unwrap().data()[0]
        };
        let clean = run();
        let faulty = {
            let _guard = FaultGuard::flip_sign(OpKind::Tanh);
            run()
        };
        assert_eq!(faulty, -clean);
        assert_eq!(run(), clean);
    }

    #[test]
    fn op_names_round_trip() {
        for kind in OpKind::DIFFERENTIABLE {
            assert_eq!(OpKind::from_name(kind.name()), Some(kind));
        }
    }
}
