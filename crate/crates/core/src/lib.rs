//! Continual model-based reinforcement learning on procedurally generated
//! gridworlds.
//!
//! The crate is organised along the training loop: [`envsuite`] produces task
//! sequences, [`replay`] stores experience under several insertion and
//! sampling strategies, [`worldmodel`] learns an ensemble dynamics model used
//! for imagination and disagreement-driven exploration, [`agent`] trains an
//! actor-critic inside that model, [`metrics`] scores whole runs and
//! [`harness`] ties everything together into reproducible experiments.

pub mod agent;
pub mod embed;
pub mod envsuite;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod replay;
pub mod worldmodel;

pub use error::{Error, Result};
