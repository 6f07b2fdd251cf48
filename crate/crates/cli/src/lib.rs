//! Command line and HTTP front ends for d2ae-core.

pub mod cli;
pub mod service;

pub use cli::run;
