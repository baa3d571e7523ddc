//! Structural health monitoring service: structure registry, sample
//! ingestion, frame solving and live pose streaming.

pub mod client;
pub mod clock;
pub mod engine;
pub mod gateway;
pub mod hub;
pub mod registry;
pub mod sim;
pub mod store;
pub mod wire;
