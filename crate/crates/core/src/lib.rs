//! Metrics pipeline for distributed clouds.
pub mod agent;
pub mod collector;
pub mod kv;
pub mod openmetrics;
pub mod processor;
pub mod protocol;
pub mod reader;
pub mod reduction;
pub mod scenario;
pub mod store;
pub mod topic;
pub mod transport;
