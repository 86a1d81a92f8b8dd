//! Semiclassical simulation of single atoms carried by an optical
//! conveyor belt through a high-finesse cavity.
//!
//! The crate covers the trap and cavity-mode fields, atom–cavity scattering
//! rates, conveyor waveforms, atom dynamics, photon detection and analysis,
//! and the named scenarios that tie them together.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod conveyor;
pub mod coupling;
pub mod detection;
pub mod dynamics;
pub mod error;
pub mod optics;
pub mod rng;
pub mod scenario;

pub use config::{ExperimentConfig, ValidatedConfig};
pub use error::{Error, Result};
pub use optics::{ModeId, Position};
