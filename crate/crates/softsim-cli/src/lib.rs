//! Library surface of the `softsim` binary: subcommand implementations,
//! file formats, and result writers.

pub mod commands;
pub mod meshio;
pub mod output;
pub mod pointio;

/// Failure classes mapped to exit codes: validation errors exit 1,
/// runtime failures exit 2.
pub enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn validation(e: impl Into<anyhow::Error>) -> Self {
        Self::Validation(e.into())
    }
    pub fn runtime(e: impl Into<anyhow::Error>) -> Self {
        Self::Runtime(e.into())
    }
}
