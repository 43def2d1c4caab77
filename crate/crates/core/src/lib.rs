pub mod dictionary;
pub mod edmd;
pub mod error;
pub mod fhn;
pub mod fusion;
pub mod interp;
pub mod io;
pub mod measurements;
pub mod pipeline;
pub mod points;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double precision instantiations used by the pipeline and the CLI.
pub type Params = fhn::FhnParams<f64>;
pub type Field = fhn::FieldState<f64>;
pub type Points = points::PointSet<f64>;
pub type Series = measurements::MeasurementSeries<f64>;
pub type Decomposition = edmd::KoopmanDecomposition<f64>;
pub type Model = fusion::FusionModel<f64>;
