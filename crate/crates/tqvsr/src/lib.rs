//! File formats, parallel execution and command implementations for
//! question-driven video segment retrieval. The algorithms live in
//! [`tqvsr_core`]; this crate adds everything that needs `std`.
//!
//! | file            | format                                     |
//! |-----------------|--------------------------------------------|
//! | `manifest.json` | corpus layout, see [`manifest`]            |
//! | `*.tqvf`        | feature rows, see [`features`]             |
//! | `*.tqvc`        | model checkpoint, see [`checkpoint`]       |
//! | `*.tqvi`        | segment embedding index, see [`index_file`] |
//! | `trace.ndjson`  | one training step per line                 |

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod features;
pub mod index_file;
pub mod manifest;
pub mod parallel;

pub use tqvsr_core as core;
