//! Progressive class-wise attention for imbalanced multi-class image
//! classification.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient verification). Concrete aliases for both widths live at the
//! crate root.

pub mod autodiff;
pub mod backbone;
pub mod cwa;
pub mod data;
pub mod error;
pub mod explain;
pub mod gradcheck;
mod kernels;
pub mod layers;
pub mod metrics;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod train;

pub use autodiff::{Padding, Tape, Var};
pub use backbone::{BackboneSpec, ForwardPass, Model, ParamCount};
pub use cwa::{CwaBlock, CwaConfig, CwaOutput};
pub use error::{Error, Result};
pub use gradcheck::{finite_difference_check, finite_difference_check_many};
pub use layers::{Mode, ParamStore};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
