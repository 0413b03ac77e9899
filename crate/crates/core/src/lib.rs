//! Moving-average gated attention encoder.
//!
//! The numerical core is generic over [`Scalar`] (`f64` or `f32`); the type
//! aliases at the crate root fix it to `f64`, which is what the model, the
//! trainer and every tolerance in the tests assume.

pub mod attention;
pub mod autodiff;
pub mod block;
pub mod ema;
pub mod error;
pub mod model;
pub mod norm;
pub mod parallel;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type ComplexTensor = tensor::ComplexTensor<f64>;
pub type Graph = autodiff::Graph<f64>;
pub type EmaParams = ema::EmaParams<f64>;
pub type CemaParams = ema::CemaParams<f64>;
pub type EmaState = ema::EmaState<f64>;
pub type NormState = norm::NormState<f64>;
pub type GroupSpec = norm::GroupSpec<f64>;
pub type BlockParams = block::BlockParams<f64>;
pub type LmModel = model::LmModel<f64>;
