pub mod align;
mod binio;
pub mod cinn;
pub mod decoders;
pub mod encoders;
pub mod error;
pub mod evalmetrics;
pub mod fusion;
pub mod infer;
pub mod model;
pub mod params;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, FormatError, Result};
pub use tensor::{Axis, Graph, Tensor, Var};
