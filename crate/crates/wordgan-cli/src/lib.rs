//! Library side of the `wordgan` command-line tool; the binary in `main.rs`
//! is a thin wrapper so integration tests can drive the same code paths.

pub mod commands;
pub mod config;

use wordgan_core::error::Error;

/// Process exit code for an error: 2 config/validation, 3 I/O or file
/// format, 4 numeric failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) | Error::Parse(_) | Error::ShapeMismatch(_) => 2,
        Error::Io(_) | Error::Image(_) | Error::Checkpoint(_) | Error::Dataset(_) => 3,
        Error::NonFinite(_) => 4,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_map_error_classes() {
        assert_eq!(exit_code(&Error::InvalidArgument("x".into())), 2);
        assert_eq!(exit_code(&Error::Parse("x".into())), 2);
        assert_eq!(exit_code(&Error::Checkpoint("x".into())), 3);
        assert_eq!(
            exit_code(&Error::Io(std::io::Error::other("x"))),
            3
        );
        assert_eq!(exit_code(&Error::NonFinite("x".into())), 4);
    }
}
