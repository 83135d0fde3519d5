//! Dynamic spectrum management for networks-in-network.
//!
//! A centralized spectrum manager admits, sizes and places sub-network
//! allocations inside a shared overlayer band, reached by sub-network
//! controllers over a zero-touch ID-routed control plane with DHT service
//! discovery. Everything runs inside a deterministic discrete-event engine.

pub mod allocator;
pub mod engine;
pub mod error;
pub mod kira;
pub mod protocol;
pub mod scenario;
pub mod sm;
pub mod snc;
pub mod spectrum;

pub use error::{InvariantBreach, LedgerError, ScenarioError, ValidationError};
