//! SPD-manifold tangent space mapping networks with domain-specific momentum
//! batch normalization.

pub mod artifact;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod manifold;
pub mod matfun;
pub mod net;
pub mod optim;
pub mod sampling;
pub mod spdbn;
pub mod synthdata;

pub use error::{Error, Result};
