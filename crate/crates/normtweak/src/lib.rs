//! Files, configuration and the command-line front end around
//! `normtweak-core`.

pub mod calibfile;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod provenance;
pub mod report;
pub mod tokens;
