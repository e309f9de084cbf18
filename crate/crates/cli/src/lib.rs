//! Command-line front end for `regrank` and the HTTP API of the human
//! evaluation service.

pub mod api;
pub mod commands;
