//! The `kgrag` command-line tool and HTTP service.

use std::ffi::OsString;

use clap::Parser;

pub mod app;
pub mod config;
pub mod error;
pub mod serve;

pub use app::{execute, Cli, Command};

fn init_tracing() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn is_broken_pipe(err: &anyhow::Error) -> bool {
    err.chain().any(|c| {
        c.downcast_ref::<std::io::Error>()
            .is_some_and(|e| e.kind() == std::io::ErrorKind::BrokenPipe)
    })
}

/// Parse `args`, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_tracing();
    let stdout = std::io::stdout();
    match execute(&cli, &mut stdout.lock()) {
        Ok(()) => error::EXIT_OK,
        // a closed stdout, as in `kgrag query .. | head`
        Err(e) if is_broken_pipe(&e) => error::EXIT_OK,
        Err(e) => {
            eprintln!("{}", error::render(&e));
            error::classify(&e).exit_code()
        }
    }
}
