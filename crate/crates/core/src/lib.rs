//! Provably safe motion for a manipulator sharing its workspace with a human.
// `!(x > 0.0)` style checks are meant to reject NaN too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod geometry;
pub mod human;
pub mod robot;
pub mod shield;
pub mod trajectory;
