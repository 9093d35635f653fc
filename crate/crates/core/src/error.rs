//! Crate-wide error type and the process exit-code policy.
//!
//! The CLI maps every failure to one of three exit codes:
//! `2` for configuration problems (bad flags, malformed config or model
//! files), `3` for missing or corrupt data files (including every EPB
//! decoding failure), and `1` for anything else (numerical failures,
//! internal shape violations, acceptance-style check failures).

use thiserror::Error;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failures the pipeline can surface.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: CLI flag combinations, config-file contents,
    /// or a malformed model parameter file.
    #[error("configuration error: {0}")]
    Config(String),

    /// Missing or semantically corrupt input data (manifest rows, label
    /// values, subject tables, ...).
    #[error("data error: {0}")]
    Data(String),

    /// An EPB file that does not start with the `EPB1` magic.
    #[error("not an EPB file: bad magic {found:?}")]
    BadMagic { found: [u8; 4] },

    /// An EPB file with a version this reader does not understand.
    #[error("unsupported EPB version {found}")]
    UnsupportedVersion { found: u16 },

    /// An EPB file that ends before its own header says it should.
    #[error("truncated EPB file: needed {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },

    /// A NaN or infinite sample encountered while decoding an EPB file.
    #[error("non-finite sample in EPB file at {location}")]
    NonFiniteSample { location: String },

    /// Tensor shape mismatch inside the network; indicates a programming
    /// error in the caller rather than bad user input.
    #[error("shape error: {0}")]
    Shape(String),

    /// A numerical failure at run time (non-finite state in a scan,
    /// exploding loss, ...).
    #[error("numerical error: {0}")]
    Numeric(String),

    /// Underlying I/O failure while reading or writing files.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_)
            | Error::BadMagic { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Truncated { .. }
            | Error::NonFiniteSample { .. }
            | Error::Io(_) => 3,
            Error::Shape(_) | Error::Numeric(_) => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_cli_contract() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::Data("x".into()).exit_code(), 3);
        assert_eq!(Error::BadMagic { found: *b"EDF+" }.exit_code(), 3);
        assert_eq!(Error::UnsupportedVersion { found: 9 }.exit_code(), 3);
        assert_eq!(Error::Truncated { expected: 10, got: 3 }.exit_code(), 3);
        assert_eq!(
            Error::NonFiniteSample { location: "epoch 0, sample 12".into() }.exit_code(),
            3
        );
        assert_eq!(Error::Shape("x".into()).exit_code(), 1);
        assert_eq!(Error::Numeric("x".into()).exit_code(), 1);
    }
}
