pub mod adapt;
pub mod autodiff;
pub mod diffusion;
pub mod error;
pub mod evalharness;
pub mod experiment;
pub mod hypergrad;
pub mod objectives;
pub mod resalign;
pub mod seeds;

pub use error::{Error, Result};
