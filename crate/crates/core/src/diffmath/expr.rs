use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::Array;

/// Identity of a trainable parameter leaf.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub u32);

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Param(ParamId),
    Constant(Arc<Array>),
    Add,
    Sub,
    Mul,
    MatMul,
    Relu,
    Tanh,
    Sigmoid,
    Softmax,
    Ln,
    Exp,
    Abs,
    Sum(Option<usize>),
    Mean(Option<usize>),
    /// `max(c, x)`; the scalar is the first operand, so ties route no gradient to `x`.
    ClampMin(f64),
    /// `min(c, x)`; same tie rule as `ClampMin`.
    ClampMax(f64),
    MaxReduce,
    Select(Arc<Vec<bool>>),
    Concat(usize),
    Reshape(Vec<usize>),
    /// Cut the graph: value passes through, gradient does not.
    Detach,
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Constant(_) => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::MatMul => "matmul",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Softmax => "softmax",
            Op::Ln => "ln",
            Op::Exp => "exp",
            Op::Abs => "abs",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::ClampMin(_) => "clamp_min",
            Op::ClampMax(_) => "clamp_max",
            Op::MaxReduce => "max",
            Op::Select(_) => "select",
            Op::Concat(_) => "concat",
            Op::Reshape(_) => "reshape",
            Op::Detach => "detach",
        }
    }
}

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Expr>,
}

static NEXT_NODE: AtomicU64 = AtomicU64::new(0);

/// A node in an immutable expression DAG.
///
/// Building an expression never fails; shape and domain errors surface when
/// the expression is evaluated. Cloning is cheap and shares the subgraph.
#[derive(Clone)]
pub struct Expr(pub(crate) Arc<Node>);

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr#{}({})", self.0.id, self.0.op.name())
    }
}

impl Expr {
    fn node(op: Op, inputs: Vec<Expr>) -> Self {
        let id = NEXT_NODE.fetch_add(1, Ordering::Relaxed);
        Expr(Arc::new(Node { id, op, inputs }))
    }

    pub fn param(id: ParamId) -> Self {
        Self::node(Op::Param(id), Vec::new())
    }

    pub fn constant(value: Array) -> Self {
        Self::node(Op::Constant(Arc::new(value)), Vec::new())
    }

    pub fn scalar(value: f64) -> Self {
        Self::constant(Array::scalar(value))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// The bound parameter, if this is a parameter leaf.
    pub fn as_param(&self) -> Option<ParamId> {
        match self.0.op {
            Op::Param(id) => Some(id),
            _ => None,
        }
    }

    /// The held value, if this is a constant leaf.
    pub fn as_constant(&self) -> Option<&Array> {
        match &self.0.op {
            Op::Constant(a) => Some(a),
            _ => None,
        }
    }

    fn unary(&self, op: Op) -> Self {
        Self::node(op, vec![self.clone()])
    }

    fn binary(&self, op: Op, other: &Expr) -> Self {
        Self::node(op, vec![self.clone(), other.clone()])
    }

    pub fn add(&self, other: &Expr) -> Self {
        self.binary(Op::Add, other)
    }

    pub fn sub(&self, other: &Expr) -> Self {
        self.binary(Op::Sub, other)
    }

    pub fn mul(&self, other: &Expr) -> Self {
        self.binary(Op::Mul, other)
    }

    pub fn matmul(&self, other: &Expr) -> Self {
        self.binary(Op::MatMul, other)
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.mul(&Expr::scalar(factor))
    }

    pub fn neg(&self) -> Self {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Self {
        self.unary(Op::Relu)
    }

    pub fn tanh(&self) -> Self {
        self.unary(Op::Tanh)
    }

    pub fn sigmoid(&self) -> Self {
        self.unary(Op::Sigmoid)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Self {
        self.unary(Op::Softmax)
    }

    pub fn ln(&self) -> Self {
        self.unary(Op::Ln)
    }

    pub fn exp(&self) -> Self {
        self.unary(Op::Exp)
    }

    pub fn abs(&self) -> Self {
        self.unary(Op::Abs)
    }

    pub fn sum(&self) -> Self {
        self.unary(Op::Sum(None))
    }

    pub fn sum_axis(&self, axis: usize) -> Self {
        self.unary(Op::Sum(Some(axis)))
    }

    pub fn mean(&self) -> Self {
        self.unary(Op::Mean(None))
    }

    pub fn mean_axis(&self, axis: usize) -> Self {
        self.unary(Op::Mean(Some(axis)))
    }

    /// Elementwise `max(floor, x)`.
    pub fn clamp_min(&self, floor: f64) -> Self {
        self.unary(Op::ClampMin(floor))
    }

    /// Elementwise `min(ceiling, x)`.
    pub fn clamp_max(&self, ceiling: f64) -> Self {
        self.unary(Op::ClampMax(ceiling))
    }

    /// Maximum over all elements; ties resolve to the lowest flat index.
    pub fn max(&self) -> Self {
        self.unary(Op::MaxReduce)
    }

    /// Flat elements where `mask` is true, as a rank-1 array.
    pub fn select(&self, mask: Vec<bool>) -> Self {
        self.unary(Op::Select(Arc::new(mask)))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Self {
        self.unary(Op::Reshape(shape))
    }

    pub fn detach(&self) -> Self {
        self.unary(Op::Detach)
    }

    pub fn concat(parts: &[Expr], axis: usize) -> Self {
        Self::node(Op::Concat(axis), parts.to_vec())
    }
}

impl std::ops::Add for &Expr {
    type Output = Expr;
    fn add(self, rhs: &Expr) -> Expr {
        Expr::add(self, rhs)
    }
}

impl std::ops::Sub for &Expr {
    type Output = Expr;
    fn sub(self, rhs: &Expr) -> Expr {
        Expr::sub(self, rhs)
    }
}

impl std::ops::Mul for &Expr {
    type Output = Expr;
    fn mul(self, rhs: &Expr) -> Expr {
        Expr::mul(self, rhs)
    }
}
