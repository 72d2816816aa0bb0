//! Differentiable operations, implemented as inherent methods on [`Tensor`](crate::Tensor).

pub mod conv;
mod elementwise;
mod linalg;
pub mod loss;
mod norm;
pub mod pool;
mod shape;
