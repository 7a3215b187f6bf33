//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! Expressions are immutable DAGs built from [`Expr`] leaves (parameters and
//! constants) and a small op set. A [`forward`] pass evaluates a set of roots
//! against a [`ParamSource`]; [`Forward::backward`] then sweeps each node once
//! in reverse topological order to produce a [`GradientMap`].
//!
//! Only scalar-with-array broadcasting is supported. Reductions and
//! elementwise maxima route subgradients to the lowest index on ties, and a
//! clamp against a constant (`max(c, x)`) routes no gradient to `x` at `x == c`.

mod array;
mod check;
mod eval;
mod expr;

pub use array::Array;
pub use check::{finite_difference_check, FiniteDifferenceReport};
pub use eval::{evaluate, forward, gradient, Forward, GradientMap, ParamSource};
pub use expr::{Expr, ParamId};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MathError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: input {value} outside the domain")]
    Domain { op: &'static str, value: f64 },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: reduction over an empty array")]
    EmptyReduction { op: &'static str },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("differentiated expression has shape {shape:?}, expected a scalar")]
    NotScalar { shape: Vec<usize> },
    #[error("parameter {0} is not bound")]
    UnboundParam(ParamId),
    #[error("array of shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("expression was not evaluated in this forward pass")]
    NotInPass,
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}
