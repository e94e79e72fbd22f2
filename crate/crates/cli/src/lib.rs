//! Library side of the musemask command-line pipeline: configuration,
//! subcommand implementations, run logs, and the held-out evaluation
//! suite. The binary in main.rs is a thin argument-parsing shell.

pub mod commands;
pub mod config;
pub mod evalsuite;
pub mod runlog;

use musemask_core::error::Error;

/// Process exit code for an error: 2 config, 3 data, 4 training,
/// 5 missing artifact.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Policy(_) => 2,
        Error::InvalidScene(_)
        | Error::DegenerateScene(_)
        | Error::Format(_)
        | Error::Shape(_)
        | Error::Decode(_)
        | Error::Vocabulary(_)
        | Error::Io { .. } => 3,
        Error::Training { .. } => 4,
        Error::MissingArtifact(_) => 5,
    }
}
