pub mod corr;
pub mod error;
pub mod eval;
pub mod loss;
pub mod net;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod videodata;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
