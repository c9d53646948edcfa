//! Edge-offloaded segmentation pipeline: transports, link emulation,
//! perception service, occupancy mapping and evaluation.

pub mod codec;
pub mod energy;
pub mod harness;
pub mod metrics;
pub mod mqtt;
pub mod netem;
pub mod occmap;
pub mod perception;
pub mod scalar;
pub mod stats;
pub mod tcpros;
pub mod types;

pub use scalar::{Rational, Real, Scalar};
pub use types::*;
