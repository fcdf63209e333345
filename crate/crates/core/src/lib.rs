pub mod agents;
pub mod clock;
pub mod config;
pub mod comments;
pub mod document;
pub mod gateway;
pub mod hub;
pub mod ids;
pub mod persistence;
pub mod session;
pub mod sync;
pub mod tasks;
pub mod triggers;
