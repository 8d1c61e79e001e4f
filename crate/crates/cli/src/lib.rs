//! Subcommands of the `omnicond` binary.

pub mod commands;
pub mod config;

pub use config::RunConfig;

/// Process exit code for an error: 2 for configuration problems, 3 for
/// everything that went wrong at run time.
pub fn exit_code(e: &omnicond::Error) -> i32 {
    if e.is_config() {
        2
    } else {
        3
    }
}
