// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod design;
pub mod error;
pub mod expansion;
pub mod glm;
pub mod msm;
pub mod pipeline;
pub mod predicate;
pub mod predict;
pub mod sampling;
pub mod simgen;
pub mod weights;
