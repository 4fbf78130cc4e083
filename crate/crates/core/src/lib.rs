#![no_std]
extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod autograd;
pub mod backend;
pub mod cimconv;
pub mod model;
pub mod nn;
pub mod error;
pub mod ops;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use autograd::{grad_check, grad_check_many, GradCheck, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Scalar, Tensor};
