pub mod datagen;
pub mod embed;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod gradsuite;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod train;
pub mod util;

pub use error::{Error, Result};
pub use tensor::{OpKind, Tensor};
