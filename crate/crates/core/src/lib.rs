//! Uncertainty-based filtering and feature alignment for unsupervised domain
//! adaptation.
//!
//! The crate covers MC-dropout uncertainty ([`model`]), binned instance
//! sampling ([`bis`]), batch layouts over simulated replicas ([`layout`],
//! [`ghost_bn`]), the uncertain feature loss and filtering ([`loss`]), the
//! training loop ([`trainer`]) and reporting ([`report`]).

pub mod bis;
pub mod data;
pub mod error;
pub mod experiment;
pub mod ghost_bn;
pub mod layout;
pub mod loss;
pub mod model;
pub mod numeric;
pub mod pseudo_store;
pub mod report;
pub mod trainer;

pub use error::{Result, UfalError};
