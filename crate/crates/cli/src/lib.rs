//! Pipeline front-end: configuration, subcommand logic, exit-code policy.
//!
//! The binary in main.rs is a thin clap shell over these functions, so
//! integration tests drive the same code paths in-process.

pub mod analysis;
pub mod commands;
pub mod config;

use compass_core::error::Error;

/// Exit-code contract: 0 success, 1 usage, 2 data, 3 transport. I/O failures
/// count as data problems: something on disk was not as required.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Data(_) | Error::Io(_) => 2,
        Error::Transport(_) => 3,
    }
}

pub const USAGE_EXIT: u8 = 1;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_split_by_error_kind() {
        assert_eq!(exit_code(&Error::data("x")), 2);
        assert_eq!(exit_code(&Error::transport("x")), 3);
        let io = Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, "x"));
        assert_eq!(exit_code(&io), 2);
    }
}
