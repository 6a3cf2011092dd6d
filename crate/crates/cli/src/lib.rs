//! HTTP API, background monitor, and command-line front end for
//! [`abacus_core`].

pub mod api;
pub mod commands;
pub mod server;
