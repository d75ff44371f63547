pub mod autodiff;
pub mod error;
pub mod eval;
pub mod losses;
pub mod mesher;
pub mod model;
pub mod nets;
pub mod shapegen;
pub mod trainer;
pub mod sdf;

pub use error::{Error, Result};
