//! Deformable frame prediction network.
//!
//! A next-frame predictor built from plain and deformable convolutions,
//! residual dense blocks and convolutional block attention, with hand-written
//! forward and backward passes for every layer.
//!
//! The crate is `no_std` (it needs `alloc`). The default `std` feature only
//! enables runtime CPU feature detection in the GEMM backend.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attention;
pub mod data;
mod error;
pub mod eval;
mod gemm;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
mod real;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::{Shape, Tensor4};
