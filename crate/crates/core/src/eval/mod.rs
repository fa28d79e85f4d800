pub mod benchmark;
pub mod checkpoint;
pub mod config;
pub mod export;
pub mod metrics;
pub mod scene;
pub mod sweep;
