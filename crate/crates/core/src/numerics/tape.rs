//! Reverse-mode differentiation over a dynamic tape of matrix primitives.
//!
//! Each primitive records its operands by index; [`Tape::backward`] walks the
//! record in reverse and accumulates adjoints. Constants and any node that
//! does not depend on a differentiable leaf are skipped during the sweep, so
//! the gradient of a parameter the forward pass never touched is exactly zero.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::scalar::{sigmoid, softplus};
use crate::numerics::{ParamId, ParamStore, Real, Tensor};

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Constant,
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sqrt(Var),
    Recip(Var),
    ClampMin(Var, T),
    RowSum(Var),
    SumAll(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    Transpose(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to any node; zero when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Gradient of a parameter, `None` when it never entered the tape.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|v| self.grads[v.0].as_ref())
    }

    /// Gradient of a parameter, with zeros for parameters the loss ignores.
    pub fn param_or_zero(&self, id: ParamId, store: &ParamStore<T>) -> Tensor<T> {
        self.param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, a: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A differentiable input that is not a stored parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Brings a stored parameter onto the tape; repeated calls share one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// Brings a parameter on as a constant (frozen for this pass).
    pub fn frozen_param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.constant(store.get(id).clone())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(a, b, out, Op::MatMul(a, b)))
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.same_shape(y) {
            Ok(())
        } else {
            Err(Error::shape(
                op,
                format!("{}×{} vs {}×{}", x.rows(), x.cols(), y.rows(), y.cols()),
            ))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.binary(a, b, out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.binary(a, b, out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.binary(a, b, out, Op::Mul(a, b)))
    }

    fn check_row(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() == 1 && r.cols() == x.cols() {
            Ok(())
        } else {
            Err(Error::shape(
                op,
                format!("{}×{} with row {}×{}", x.rows(), x.cols(), r.rows(), r.cols()),
            ))
        }
    }

    fn check_col(&self, op: &'static str, a: Var, col: Var) -> Result<()> {
        let (x, c) = (self.value(a), self.value(col));
        if c.cols() == 1 && c.rows() == x.rows() {
            Ok(())
        } else {
            Err(Error::shape(
                op,
                format!("{}×{} with column {}×{}", x.rows(), x.cols(), c.rows(), c.cols()),
            ))
        }
    }

    /// `a (n×m) + row (1×m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("add_row", a, row)?;
        let out = broadcast_row(self.value(a), self.value(row), |x, y| x + y);
        Ok(self.binary(a, row, out, Op::AddRow(a, row)))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("mul_row", a, row)?;
        let out = broadcast_row(self.value(a), self.value(row), |x, y| x * y);
        Ok(self.binary(a, row, out, Op::MulRow(a, row)))
    }

    /// `a (n×m) + col (n×1)` broadcast over columns.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.check_col("add_col", a, col)?;
        let out = broadcast_col(self.value(a), self.value(col), |x, y| x + y);
        Ok(self.binary(a, col, out, Op::AddCol(a, col)))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.check_col("mul_col", a, col)?;
        let out = broadcast_col(self.value(a), self.value(col), |x, y| x * y);
        Ok(self.binary(a, col, out, Op::MulCol(a, col)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.unary(a, out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.unary(a, out, Op::AddScalar(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.unary(a, out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::exp);
        self.unary(a, out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::ln);
        self.unary(a, out, Op::Log(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.unary(a, out, Op::Softplus(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::sqrt);
        self.unary(a, out, Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::recip);
        self.unary(a, out, Op::Recip(a))
    }

    /// `max(a, floor)`; gradient passes only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: T) -> Var {
        let out = self.value(a).map(|x| if x > floor { x } else { floor });
        self.unary(a, out, Op::ClampMin(a, floor))
    }

    /// Sums each row: `n×m → n×1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let sums = (0..x.rows()).map(|r| x.row_slice(r).iter().copied().sum()).collect();
        let out = Tensor::column(sums);
        self.unary(a, out, Op::RowSum(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.unary(a, out, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize_lossy(self.value(a).len());
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no operands"))?;
        let n = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.rows() != n {
                return Err(Error::shape("concat_cols", format!("row counts {n} and {}", v.rows())));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let out = Tensor::new(vec![n, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start >= end || end > x.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("range {start}..{end} of {} columns", x.cols()),
            ));
        }
        let n = x.rows();
        let mut data = Vec::with_capacity(n * (end - start));
        for r in 0..n {
            data.extend_from_slice(&x.row_slice(r)[start..end]);
        }
        let out = Tensor::new(vec![n, end - start], data)?;
        Ok(self.unary(a, out, Op::SliceCols(a, start)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.unary(a, out, Op::Reshape(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.unary(a, out, Op::Transpose(a))
    }

    /// Row-wise softmax, stabilized by subtracting the (detached) row maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let maxes = (0..x.rows())
            .map(|r| x.row_slice(r).iter().copied().fold(T::neg_infinity(), T::max))
            .collect();
        let shift = self.constant(Tensor::column(maxes));
        let neg_shift = self.neg(shift);
        let centered = self.add_col(a, neg_shift)?;
        let e = self.exp(centered);
        let z = self.row_sum(e);
        let inv = self.recip(z);
        self.mul_col(e, inv)
    }

    /// Layer normalization over each row, without the affine part.
    pub fn normalize_rows(&mut self, a: Var, eps: T) -> Result<Var> {
        let m = T::from_usize_lossy(self.value(a).cols());
        let s = self.row_sum(a);
        let mean = self.scale(s, T::one() / m);
        let neg_mean = self.neg(mean);
        let centered = self.add_col(a, neg_mean)?;
        let sq = self.mul(centered, centered)?;
        let ss = self.row_sum(sq);
        let var = self.scale(ss, T::one() / m);
        let var_eps = self.add_scalar(var, eps);
        let sd = self.sqrt(var_eps);
        let inv = self.recip(sd);
        self.mul_col(centered, inv)
    }

    /// Back-propagates from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidInput("backward on an empty tape".into()));
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        let target_shape = self.value(v).shape();
        let g = if g.shape() == target_shape {
            g
        } else {
            g.reshape(target_shape).expect("gradient has operand's element count")
        };
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Constant | Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    self.accumulate(grads, *row, col_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, broadcast_row(g, self.value(*row), |x, y| x * y));
                }
                if self.rg(*row) {
                    let prod = g.zip_map(self.value(*a), |x, y| x * y);
                    self.accumulate(grads, *row, col_sums(&prod));
                }
            }
            Op::AddCol(a, col) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*col) {
                    self.accumulate(grads, *col, row_sums(g));
                }
            }
            Op::MulCol(a, col) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, broadcast_col(g, self.value(*col), |x, y| x * y));
                }
                if self.rg(*col) {
                    let prod = g.zip_map(self.value(*a), |x, y| x * y);
                    self.accumulate(grads, *col, row_sums(&prod));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::AddScalar(a, _) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |gi, x| if x > T::zero() { gi } else { T::zero() });
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(y, |gi, yi| gi * yi)),
            Op::Log(a) => {
                self.accumulate(grads, *a, g.zip_map(self.value(*a), |gi, x| gi / x));
            }
            Op::Softplus(a) => {
                self.accumulate(grads, *a, g.zip_map(self.value(*a), |gi, x| gi * sigmoid(x)));
            }
            Op::Sqrt(a) => {
                let two = T::lit(2.0);
                self.accumulate(grads, *a, g.zip_map(y, |gi, yi| gi / (two * yi)));
            }
            Op::Recip(a) => self.accumulate(grads, *a, g.zip_map(y, |gi, yi| -gi * yi * yi)),
            Op::ClampMin(a, floor) => {
                let floor = *floor;
                let d = g.zip_map(self.value(*a), |gi, x| if x > floor { gi } else { T::zero() });
                self.accumulate(grads, *a, d);
            }
            Op::RowSum(a) => {
                let x = self.value(*a);
                let mut d = Tensor::zeros(&[x.rows(), x.cols()]);
                let m = x.cols();
                for (r, chunk) in d.data_mut().chunks_mut(m).enumerate() {
                    chunk.fill(g.data()[r]);
                }
                self.accumulate(grads, *a, d);
            }
            Op::SumAll(a) => {
                let d = Tensor::full(self.value(*a).shape(), g.data()[0]);
                self.accumulate(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let n = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut data = Vec::with_capacity(n * w);
                        for r in 0..n {
                            data.extend_from_slice(&g.row_slice(r)[offset..offset + w]);
                        }
                        let part = Tensor::new(vec![n, w], data).expect("slice of gradient");
                        self.accumulate(grads, p, part);
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let (n, m) = (x.rows(), x.cols());
                let w = g.cols();
                let mut d = Tensor::zeros(&[n, m]);
                for r in 0..n {
                    d.data_mut()[r * m + start..r * m + start + w].copy_from_slice(g.row_slice(r));
                }
                self.accumulate(grads, *a, d);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.clone()),
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
        }
    }
}

fn broadcast_row<T: Real>(a: &Tensor<T>, row: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let m = a.cols();
    let r = row.data();
    let data = a.data().iter().enumerate().map(|(i, &x)| f(x, r[i % m])).collect();
    Tensor::new(vec![a.rows(), m], data).expect("broadcast keeps shape")
}

fn broadcast_col<T: Real>(a: &Tensor<T>, col: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let m = a.cols();
    let c = col.data();
    let data = a.data().iter().enumerate().map(|(i, &x)| f(x, c[i / m])).collect();
    Tensor::new(vec![a.rows(), m], data).expect("broadcast keeps shape")
}

fn col_sums<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let m = g.cols();
    let mut out = vec![T::zero(); m];
    for chunk in g.data().chunks(m) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::row(out)
}

fn row_sums<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let m = g.cols();
    Tensor::column(g.data().chunks(m).map(|c| c.iter().copied().sum()).collect())
}
