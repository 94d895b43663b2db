//! Exact population-loss training of a two-layer ReLU student against a
//! planted ReLU teacher under Gaussian input, with structure diagnostics and
//! a sparse-spike dual certificate.

pub mod certificate;
pub mod gauss;
pub mod geometry;
pub mod harness;
pub mod hermite;
pub mod network;
pub mod numeric;
pub mod objective;
pub mod train;
