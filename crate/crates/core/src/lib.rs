//! EMT simulation, perturbation frequency scans and impedance-based
//! resonance screening for AC-HVDC networks with MMC stations.

pub mod error;
pub mod linalg;
pub mod network;
pub mod grid;
pub mod mmc;
pub mod emt;
pub mod benchmark;
pub mod analysis;
pub mod scan;
pub mod stability;
pub mod scenario;

pub use error::{Error, Result};
