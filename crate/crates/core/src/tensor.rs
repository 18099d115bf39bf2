//! Dense `f64` tensors and a tape-based reverse-mode differentiator.
//!
//! A [`Tensor`] is a plain value: shape, row-major data and, for parameters,
//! an accumulated gradient. Computation happens on a [`Tape`]: tensors enter
//! as leaves, every operation appends a node, and [`Tape::backward`] walks the
//! nodes once in reverse order. Gradients of leaves that require them are
//! accumulated on the tape until [`Tape::zero_grad`] and can then be pulled
//! into the owning tensors with [`Tensor::accumulate_grad`].
//!
//! Broadcasting is limited to scalar-vs-tensor. The row-wise operations the
//! classifiers need (bias add, softmax, log-softmax, label pick) are fused
//! nodes with their own local gradient rules.
//!
//! All reductions sum left to right, so identical inputs and tape order give
//! bit-identical values and gradients.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Dense row-major tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// # Panics
    /// If any dimension is zero.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; numel]).expect("zeros: positive dimensions")
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// 1-D tensor. Panics on an empty slice.
    pub fn vector(data: &[f64]) -> Self {
        Self::new(vec![data.len()], data.to_vec()).expect("vector: non-empty data")
    }

    /// 2-D tensor from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::Dimension {
                    op: "from_rows",
                    lhs: vec![rows.len(), cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Row count of a 2-D tensor (length of a 1-D one).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a 2-D tensor (1 for a 1-D one).
    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!("item() on tensor of shape {:?}", self.shape)))
        }
    }

    /// Value-identical copy that does not require gradient.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Adds `g` into the stored gradient. Tensors that do not require
    /// gradient ignore the call.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if !self.requires_grad {
            return Ok(());
        }
        if g.len() != self.data.len() {
            return Err(Error::Dimension {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Selects rows by index into a new 2-D tensor.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= self.rows() {
                return Err(Error::Data(format!(
                    "row index {i} out of range for {} rows",
                    self.rows()
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![indices.len(), c], data)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary(BinOp, Var, Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Exp(Var),
    Ln(Var),
    Relu(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Softmax(Var, f64),
    LogSoftmax(Var, f64),
    Pick(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Ordered record of operations. Nodes only ever reference earlier nodes.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn add_into(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node, including accumulated leaf gradients.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records `t` as a leaf; it participates in differentiation iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Records a gradient-free leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    /// Value-identical, gradient-free copy of `v`, disconnected from its history.
    pub fn detach(&mut self, v: Var) -> Var {
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Value of a single-element node.
    pub fn item(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        if n.value.len() == 1 {
            Ok(n.value[0])
        } else {
            Err(Error::Contract(format!("item() on node of shape {:?}", n.shape)))
        }
    }

    /// Detached copy of a node's value as a standalone tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Accumulated gradient of a leaf; `None` if nothing reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn binary(&mut self, kind: BinOp, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        let (la, lb) = (na.value.len(), nb.value.len());
        let op = match kind {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        };
        let shape = if na.shape == nb.shape || lb == 1 {
            na.shape.clone()
        } else if la == 1 {
            nb.shape.clone()
        } else {
            return Err(Error::Dimension {
                op,
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        };
        let n = la.max(lb);
        let xa = |i: usize| if la == 1 { na.value[0] } else { na.value[i] };
        let xb = |i: usize| if lb == 1 { nb.value[0] } else { nb.value[i] };
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (x, y) = (xa(i), xb(i));
            out.push(match kind {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div => {
                    if y == 0.0 {
                        return Err(Error::Domain {
                            op,
                            detail: format!("division by zero at element {i}"),
                        });
                    }
                    x / y
                }
            });
        }
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(shape, out, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, a, b)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let n = self.node(a);
        let value = n.value.iter().map(|&x| f(x)).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, value, op, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), math::exp)
    }

    /// Natural log; every element must be strictly positive.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if let Some(i) = self.node(a).value.iter().position(|&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "ln",
                detail: format!("non-positive value {} at element {i}", self.node(a).value[i]),
            });
        }
        Ok(self.unary(a, Op::Ln(a), math::ln))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, Op::ClampMin(a, floor), |x| if x > floor { x } else { floor })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        }
        let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = na.value[i * k + p];
                let brow = &nb.value[p * n..(p + 1) * n];
                for (o, &y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// Adds the vector `bias` (length `c`) to every row of the `n×c` matrix `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(bias));
        if na.shape.len() != 2 || nb.value.len() != na.shape[1] {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        }
        let c = na.shape[1];
        let out = na.value.iter().enumerate().map(|(i, &x)| x + nb.value[i % c]).collect();
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(na.shape.clone(), out, Op::AddRow(a, bias), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let n = self.node(a);
        let s = n.value.iter().fold(0.0, |acc, &x| acc + x);
        let rg = n.requires_grad;
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.node(a);
        let s = n.value.iter().fold(0.0, |acc, &x| acc + x) / n.value.len() as f64;
        let rg = n.requires_grad;
        self.push(vec![1], vec![s], Op::Mean(a), rg)
    }

    /// Sums a 2-D node over `axis` (0: down columns, 1: along rows).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = self.node(a);
        if n.shape.len() != 2 || axis > 1 {
            return Err(Error::Dimension {
                op: "sum_axis",
                lhs: n.shape.clone(),
                rhs: vec![axis],
            });
        }
        let (r, c) = (n.shape[0], n.shape[1]);
        let out: Vec<f64> = if axis == 1 {
            (0..r)
                .map(|i| n.value[i * c..(i + 1) * c].iter().fold(0.0, |acc, &x| acc + x))
                .collect()
        } else {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for (o, &x) in out.iter_mut().zip(&n.value[i * c..(i + 1) * c]) {
                    *o += x;
                }
            }
            out
        };
        let rg = n.requires_grad;
        let len = out.len();
        Ok(self.push(vec![len], out, Op::SumAxis(a, axis), rg))
    }

    fn check_tau(tau: f64) -> Result<()> {
        if tau > 0.0 && tau.is_finite() {
            Ok(())
        } else {
            Err(Error::Parameter {
                name: "tau",
                detail: format!("temperature must be positive, got {tau}"),
            })
        }
    }

    fn rows_of(&self, a: Var, op: &'static str) -> Result<(usize, usize)> {
        let n = self.node(a);
        if n.shape.len() != 2 {
            return Err(Error::Dimension {
                op,
                lhs: n.shape.clone(),
                rhs: vec![],
            });
        }
        Ok((n.shape[0], n.shape[1]))
    }

    /// Row-wise `softmax(a / tau)` with max subtraction.
    pub fn softmax(&mut self, a: Var, tau: f64) -> Result<Var> {
        Self::check_tau(tau)?;
        let (r, c) = self.rows_of(a, "softmax")?;
        let n = self.node(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let z = &n.value[i * c..(i + 1) * c];
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let row = &mut out[i * c..(i + 1) * c];
            let mut total = 0.0;
            for (o, &x) in row.iter_mut().zip(z) {
                *o = math::exp((x - m) / tau);
                total += *o;
            }
            row.iter_mut().for_each(|o| *o /= total);
        }
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(shape, out, Op::Softmax(a, tau), rg))
    }

    /// Row-wise `log_softmax(a / tau)`.
    pub fn log_softmax(&mut self, a: Var, tau: f64) -> Result<Var> {
        Self::check_tau(tau)?;
        let (r, c) = self.rows_of(a, "log_softmax")?;
        let n = self.node(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let z = &n.value[i * c..(i + 1) * c];
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let row = &mut out[i * c..(i + 1) * c];
            let mut total = 0.0;
            for (o, &x) in row.iter_mut().zip(z) {
                *o = (x - m) / tau;
                total += math::exp(*o);
            }
            let lse = math::ln(total);
            row.iter_mut().for_each(|o| *o -= lse);
        }
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(shape, out, Op::LogSoftmax(a, tau), rg))
    }

    /// Picks `a[i, index[i]]` from each row of an `n×c` node.
    pub fn pick(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.rows_of(a, "pick")?;
        if index.len() != r {
            return Err(Error::Dimension {
                op: "pick",
                lhs: vec![r, c],
                rhs: vec![index.len()],
            });
        }
        if let Some((i, &k)) = index.iter().enumerate().find(|(_, &k)| k >= c) {
            return Err(Error::Data(format!(
                "label {k} at row {i} out of range for {c} classes"
            )));
        }
        let n = self.node(a);
        let out = index.iter().enumerate().map(|(i, &k)| n.value[i * c + k]).collect();
        let rg = n.requires_grad;
        Ok(self.push(vec![r], out, Op::Pick(a, index.to_vec()), rg))
    }

    /// Reverse pass from the scalar `loss`. Gradients are added to whatever
    /// the leaves already hold; call [`Tape::zero_grad`] to reset them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.node(loss);
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                add_into(&mut self.nodes[i].grad, g);
                continue;
            }
            for (input, local) in self.local_grads(i, &g) {
                if self.nodes[input.0].requires_grad {
                    add_into(&mut adj[input.0], local);
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |v: Var| -> &[f64] { &self.nodes[v.0].value };
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Binary(kind, a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                let n = g.len();
                let at = |x: &[f64], j: usize| if x.len() == 1 { x[0] } else { x[j] };
                let mut out = Vec::with_capacity(2);
                // Gradient for a broadcast scalar operand is the sum of its
                // element-wise contributions.
                let fold = |x: &[f64], per: Vec<f64>| -> Vec<f64> {
                    if x.len() == 1 && n != 1 {
                        vec![per.iter().fold(0.0, |acc, &v| acc + v)]
                    } else {
                        per
                    }
                };
                if rg(*a) {
                    let per: Vec<f64> = (0..n)
                        .map(|j| match kind {
                            BinOp::Add | BinOp::Sub => g[j],
                            BinOp::Mul => g[j] * at(xb, j),
                            BinOp::Div => g[j] / at(xb, j),
                        })
                        .collect();
                    out.push((*a, fold(xa, per)));
                }
                if rg(*b) {
                    let per: Vec<f64> = (0..n)
                        .map(|j| match kind {
                            BinOp::Add => g[j],
                            BinOp::Sub => -g[j],
                            BinOp::Mul => g[j] * at(xa, j),
                            BinOp::Div => {
                                let y = at(xb, j);
                                -g[j] * at(xa, j) / (y * y)
                            }
                        })
                        .collect();
                    out.push((*b, fold(xb, per)));
                }
                out
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (xa, xb) = (val(*a), val(*b));
                let mut out = Vec::with_capacity(2);
                if rg(*a) {
                    // dA = dC · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &xb[p * n..(p + 1) * n];
                            ga[r * k + p] = grow.iter().zip(brow).fold(0.0, |acc, (x, y)| acc + x * y);
                        }
                    }
                    out.push((*a, ga));
                }
                if rg(*b) {
                    // dB = Aᵀ · dC
                    let mut gb = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let x = xa[r * k + p];
                            for (o, &y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * y;
                            }
                        }
                    }
                    out.push((*b, gb));
                }
                out
            }
            Op::AddRow(a, bias) => {
                let c = node.shape[1];
                let mut out = Vec::with_capacity(2);
                if rg(*a) {
                    out.push((*a, g.to_vec()));
                }
                if rg(*bias) {
                    let mut gb = vec![0.0; c];
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
                    }
                    out.push((*bias, gb));
                }
                out
            }
            Op::Neg(a) => vec![(*a, g.iter().map(|x| -x).collect())],
            Op::Scale(a, c) => vec![(*a, g.iter().map(|x| c * x).collect())],
            Op::Exp(a) => vec![(*a, g.iter().zip(&node.value).map(|(d, y)| d * y).collect())],
            Op::Ln(a) => vec![(*a, g.iter().zip(val(*a)).map(|(d, x)| d / x).collect())],
            Op::Relu(a) => vec![(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(&d, &x)| if x > 0.0 { d } else { 0.0 })
                    .collect(),
            )],
            Op::ClampMin(a, floor) => vec![(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(&d, &x)| if x > *floor { d } else { 0.0 })
                    .collect(),
            )],
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Mean(a) => {
                let n = val(*a).len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::SumAxis(a, axis) => {
                let s = &self.nodes[a.0].shape;
                let (r, c) = (s[0], s[1]);
                let out = (0..r * c)
                    .map(|j| if *axis == 1 { g[j / c] } else { g[j % c] })
                    .collect();
                vec![(*a, out)]
            }
            Op::Softmax(a, tau) => {
                let c = node.shape[1];
                let y = &node.value;
                let mut out = vec![0.0; y.len()];
                for ((o, yr), gr) in out.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot = yr.iter().zip(gr).fold(0.0, |acc, (p, d)| acc + p * d);
                    for j in 0..c {
                        o[j] = yr[j] * (gr[j] - dot) / tau;
                    }
                }
                vec![(*a, out)]
            }
            Op::LogSoftmax(a, tau) => {
                let c = node.shape[1];
                let y = &node.value;
                let mut out = vec![0.0; y.len()];
                for ((o, yr), gr) in out.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let total = gr.iter().fold(0.0, |acc, &d| acc + d);
                    for j in 0..c {
                        o[j] = (gr[j] - math::exp(yr[j]) * total) / tau;
                    }
                }
                vec![(*a, out)]
            }
            Op::Pick(a, index) => {
                let c = self.nodes[a.0].shape[1];
                let mut out = vec![0.0; val(*a).len()];
                for (i, &k) in index.iter().enumerate() {
                    out[i * c + k] = g[i];
                }
                vec![(*a, out)]
            }
        }
    }
}

impl core::fmt::Display for Tensor {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        let preview: Vec<_> = self.data.iter().take(8).map(|x| x.to_string()).collect();
        write!(
            f,
            "[{}{}]",
            preview.join(", "),
            if self.data.len() > 8 { ", .." } else { "" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn param(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec())
            .unwrap()
            .with_requires_grad(true)
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
        let m = t.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        let p = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(p), &[1.0, 2.0, 3.0, 4.0]);

        let a = t.constant(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
        let b = t.constant(Tensor::from_rows(&[[3.0], [4.0]]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[11.0]);

        let z = t.constant(Tensor::zeros(&[2, 3]));
        let any = t.constant(Tensor::new(vec![3, 4], (0..12).map(|x| x as f64).collect()).unwrap());
        let zc = t.matmul(z, any).unwrap();
        assert_eq!(t.shape(zc), &[2, 4]);
        assert!(t.value(zc).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            Error::Dimension {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2, 3]"));
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(&[0.5, -1.2, 3.0]));
        let e = t.exp(x);
        let l = t.ln(e).unwrap();
        assert!(close(t.value(l), &[0.5, -1.2, 3.0], 1e-15));

        let r = t.constant(Tensor::vector(&[-1.0, 0.0, 2.0]));
        let r = t.relu(r);
        assert_eq!(t.value(r), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn domain_errors() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(&[1.0, 0.0]));
        assert!(matches!(t.ln(x), Err(Error::Domain { op: "ln", .. })));
        let one = t.constant(Tensor::vector(&[1.0, 1.0]));
        assert!(matches!(t.div(one, x), Err(Error::Domain { op: "div", .. })));
    }

    #[test]
    fn square_gradient_matches_finite_difference() {
        let f = |x: f64| x * x;
        let h = 1e-5;
        let fd = (f(3.0 + h) - f(3.0 - h)) / (2.0 * h);
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::scalar(3.0).with_requires_grad(true));
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        let g = t.grad(x).unwrap()[0];
        assert!((g - fd).abs() < 1e-8);
        assert_eq!(g, 6.0);
    }

    #[test]
    fn reductions() {
        let mut t = Tape::new();
        let v = t.constant(Tensor::vector(&[1.0, 2.0, 3.0]));
        let s = t.sum(v);
        assert_eq!(t.item(s).unwrap(), 6.0);
        let z = t.constant(Tensor::zeros(&[4]));
        let m = t.mean(z);
        assert_eq!(t.item(m).unwrap(), 0.0);
        let m2 = t.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        let r = t.sum_axis(m2, 1).unwrap();
        assert_eq!(t.value(r), &[3.0, 7.0]);
        let c = t.sum_axis(m2, 0).unwrap();
        assert_eq!(t.value(c), &[4.0, 6.0]);
        assert!(matches!(t.sum_axis(m2, 2), Err(Error::Dimension { .. })));
        assert!(matches!(t.sum_axis(v, 0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let w = t.leaf(&param(&[3], &[1.0, 2.0, 3.0]));
        let s = t.sum(w);
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let w = t.leaf(&param(&[2], &[1.0, 2.0]));
        let sq = t.mul(w, w).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut t = Tape::new();
        let w = t.leaf(&param(&[2], &[1.0, 2.0]));
        let s = t.sum(w);
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[2.0, 2.0]);
        t.zero_grad();
        assert!(t.grad(w).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let w = t.leaf(&param(&[2], &[1.0, 2.0]));
        assert!(matches!(t.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn non_grad_tensor_gets_no_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(&Tensor::vector(&[1.0, 2.0]));
        let p = t.leaf(&param(&[2], &[1.0, 1.0]));
        let prod = t.mul(w, p).unwrap();
        let s = t.sum(prod);
        t.backward(s).unwrap();
        assert!(t.grad(w).is_none());
        assert_eq!(t.grad(p).unwrap(), &[1.0, 2.0]);

        let mut plain = Tensor::vector(&[1.0]);
        plain.accumulate_grad(&[5.0]).unwrap();
        assert!(plain.grad().is_none());
    }

    #[test]
    fn detach_freezes_one_factor() {
        let mut t = Tape::new();
        let x = t.leaf(&param(&[1], &[3.0]));
        let d = t.detach(x);
        assert_eq!(t.value(d), t.value(x));
        assert!(!t.requires_grad(d));
        let prod = t.mul(x, d).unwrap();
        let s = t.sum(prod);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[3.0]);

        let mut t = Tape::new();
        let x = t.leaf(&param(&[2], &[1.0, -2.0]));
        let d = t.detach(x);
        let e = t.exp(d);
        let s = t.sum(e);
        t.backward(s).unwrap();
        assert!(t.grad(x).is_none());

        let tensor = param(&[2], &[0.1, 0.2]);
        let det = tensor.detach();
        assert_eq!(det.data(), tensor.data());
        assert!(!det.requires_grad());
    }

    #[test]
    fn scalar_broadcast_gradient_sums() {
        let mut t = Tape::new();
        let x = t.leaf(&param(&[3], &[1.0, 2.0, 3.0]));
        let c = t.leaf(&param(&[1], &[2.0]));
        let p = t.mul(x, c).unwrap();
        let s = t.sum(p);
        t.backward(s).unwrap();
        assert_eq!(t.grad(c).unwrap(), &[6.0]);
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_log_softmax_agrees() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::from_rows(&[[1.0, 0.0, -2.0], [500.0, 499.0, 0.0]]).unwrap());
        let p = t.softmax(z, 2.0).unwrap();
        let lp = t.log_softmax(z, 2.0).unwrap();
        for row in t.value(p).chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        for (a, b) in t.value(p).iter().zip(t.value(lp)) {
            assert!((a - math::exp(*b)).abs() < 1e-15);
        }
        assert!(matches!(t.softmax(z, 0.0), Err(Error::Parameter { name: "tau", .. })));
    }

    #[test]
    fn pick_rejects_out_of_range_labels() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(t.pick(z, &[0, 3]), Err(Error::Data(_))));
        assert!(matches!(t.pick(z, &[0]), Err(Error::Dimension { .. })));
    }
}
