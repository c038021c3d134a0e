//! Quadratic convolution networks: tensors, tape autodiff with state
//! accounting, building blocks, an analytic cost model, evolutionary
//! architecture search and a small training loop.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod autograd;
pub mod blocks;
pub mod costmodel;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod nas;
pub mod network;
pub mod quadconv;
pub mod quadneuron;
pub mod rng;
pub mod states;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
