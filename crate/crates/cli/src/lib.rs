//! Library surface of the `sg` harness: configuration, checkpoint
//! persistence, file formats, and the command implementations. The binary in
//! `main.rs` is a thin argument-parsing layer over these modules.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod files;
