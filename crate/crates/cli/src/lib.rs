//! Pipeline commands and the annotation service behind the `tldr` binary.

pub mod commands;
pub mod service;
