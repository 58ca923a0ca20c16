//! Command-line driver and HTTP service for `bayes-emu` stores.

pub mod commands;
pub mod http;
