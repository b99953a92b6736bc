//! Configuration, persistence, HTTP service and command-line front end for
//! the consistency-gated planner.
//!
//! The CLI and the service share one [`store::SessionStore`], so a plan
//! produced through `conplan plan` and one produced through the API from
//! the same configuration and seed are the same plan.

pub mod api;
pub mod commands;
pub mod config;
pub mod scores;
pub mod store;

pub use api::{router, AppState, SessionView};
pub use commands::{exit, Cli};
pub use config::{ConfigError, EngineConfig, ThresholdSource};
pub use store::{Advance, CreateSession, PlanArtifact, SessionStore, Snapshot, StoreError};
