//! Safe reinforcement learning with actively queried binary safety labels.

pub mod blackbox;
pub mod env;
pub mod error;
pub mod harness;
pub mod mdp;
pub mod oracle;
pub mod rng;
pub mod sabre;
pub mod safety;

pub use error::{Error, Result};
