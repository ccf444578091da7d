//! Data-enabled predictive perimeter control for macroscopic multi-region
//! traffic networks.

pub mod analysis;
pub mod deepc;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod lti;
pub mod mfd_fit;
pub mod mpc;
pub mod partitioner;
pub mod plant;
pub mod qp;
pub mod scenario;

pub use error::{Error, Result};
