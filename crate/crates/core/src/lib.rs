//! Entanglement-based BBM92 quantum key distribution: source and detector
//! simulation, coincidence counting, the two-party sifting protocol, and
//! post-processing (Cascade reconciliation and Toeplitz privacy
//! amplification).

pub mod error;
pub mod coinc;
pub mod polmath;
pub mod sourcesim;
pub mod postproc;
pub mod protocol;
pub mod harness;

pub use error::{Error, Result};
