//! Minimal reverse-mode automatic differentiation over dense 5-d arrays,
//! covering the operators the cGAN needs.

mod adam;
mod conv;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use conv::ConvGeom;
pub use gradcheck::{grad_check, grad_check_report, grad_check_with, numeric_gradient, relative_error, GradCheckReport};
pub use graph::{sigmoid, Graph, NodeId, BCE_EPS};
pub use params::ParamStore;
pub use tensor::{Scalar, Tensor};
