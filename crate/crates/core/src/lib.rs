pub mod error;
pub mod grid;
pub mod linalg;
pub mod scalar;
pub mod operators;
pub mod gram;
pub mod rng;
pub mod quadrature;
pub mod sampler;
pub mod localtime;
pub mod experiments;

pub use error::{Error, Result};
pub use grid::{Grid, GridFunction};
pub use operators::OperatorSpec;
pub use quadrature::MomentEstimate;

/// Double-precision operator.
pub type Operator = OperatorSpec<f64>;
/// Double-precision grid function.
pub type Function = GridFunction<f64>;
pub type Operator32 = OperatorSpec<f32>;
pub type Function32 = GridFunction<f32>;
