//! Command-line front end: dataset generation, circuit discovery,
//! evaluation, analysis and steering sweeps.
//!
//! Every command is deterministic given its config and seeds; primary
//! outputs are written atomically and re-runs overwrite them
//! byte-identically. A run manifest sidecar records the command, config
//! digest, seeds, paths and tool version; artifacts embed the digest of
//! the manifest's deterministic fields.

pub mod commands;
pub mod config;
pub mod manifest;

pub use commands::*;

use vicd_core::Error;

/// Exit codes: 0 success, 2 usage/config, 3 numeric failure, 4 artifact
/// mismatch.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Numeric(_) => 3,
        Error::Fingerprint(_) => 4,
        _ => 2,
    }
}
