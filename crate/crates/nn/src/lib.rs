//! A compact reverse-mode autodiff engine for NCHW image models.
//!
//! Tensors are reference counted and record their backward rule only when a
//! gradient can flow through them, which keeps frozen-backbone inference
//! cheap. Matrix products go through `matrixmultiply`; convolutions use
//! im2col. Everything runs on one thread and is bit-deterministic.

pub mod element;
pub mod init;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod store;
pub mod tensor;

pub use element::Element;
pub use init::{FanMode, Init};
pub use layers::{BatchNorm2d, Conv2d, ConvSpec, LayerNorm, Linear};
pub use ops::conv::Conv2dGeometry;
pub use ops::loss::softmax_rows;
pub use ops::pool::Pool2d;
pub use optim::{Adam, Optimizer, Sgd};
pub use store::{NamedTensor, ParamStore, Role, VarBuilder};
pub use tensor::{is_grad_enabled, no_grad, numel, Tensor};
