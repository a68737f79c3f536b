//! Dense tensors, a define-by-run autograd tape and the handful of layers
//! and optimizers the classifier families are built from.
//!
//! Everything is row-major and images are NHWC. The tape is generic over
//! [`Scalar`] so the same model code runs in `f32` for training and in
//! `f64` for finite-difference gradient checks.

pub mod graph;
pub mod init;
pub mod linalg;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use graph::{Grads, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::{ShapeError, Tensor};
