//! HTTP service and command-line front end for the annotation platform.

pub mod api;
pub mod cli;
