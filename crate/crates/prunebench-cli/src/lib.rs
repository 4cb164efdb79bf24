//! Command-line front end: config files, run manifests, and the
//! run/report/calibrate/attack-one subcommands.

pub mod commands;
pub mod config;
pub mod manifest;
