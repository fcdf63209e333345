//! Simulation harness for cowrite documents: scenario files, randomized
//! suites and the acceptance checks.

pub mod acceptance;
pub mod admin;
pub mod edits;
pub mod exec;
pub mod runner;
pub mod scenario;
pub mod suites;
