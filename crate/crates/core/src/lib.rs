// Negated float comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchmark;
pub mod data;
pub mod diffmath;
pub mod eval;
pub mod fairness;
pub mod harness;
pub mod model;
pub mod objectives;
pub mod training;
