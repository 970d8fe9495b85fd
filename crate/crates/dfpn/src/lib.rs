//! File formats, checkpoints, training and evaluation drivers for the
//! deformable frame prediction network in [`dfpn_core`].

pub mod checkpoint;
pub mod config;
mod error;
pub mod evaluate;
pub mod frames;
pub mod train;

pub use error::{Error, Result};
