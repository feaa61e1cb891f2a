//! Command-line pipeline around the `dmamba` detector: CSV ingestion, run
//! configuration and the `train`, `detect`, `evaluate`, `decompose` and
//! `gradcheck` subcommands.

pub mod commands;
pub mod config;
pub mod data;
