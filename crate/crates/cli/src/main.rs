//! `fpt` binary entry point: argument parsing, thread-pool setup, and
//! mapping of pipeline errors onto process exit codes.

use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;

use fpt_cli::{cmd, Cli};

fn init_threads(flag: Option<usize>) {
    let n = flag.or_else(|| {
        std::env::var("FPT_THREADS")
            .ok()
            .and_then(|s| s.parse().ok())
    });
    if let Some(n) = n.filter(|&n| n > 0) {
        // Can only fail if a pool already exists, which cannot happen
        // this early in main.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// True when the error chain bottoms out in EPIPE: the reader downstream
/// went away, which is ordinary shell usage (`fpt dump ... | head`).
fn is_broken_pipe(e: &(dyn std::error::Error + 'static)) -> bool {
    let mut cur = Some(e);
    while let Some(err) = cur {
        if let Some(io) = err.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::BrokenPipe {
                return true;
            }
        }
        cur = err.source();
    }
    false
}

fn main() -> ExitCode {
    let started = Instant::now();
    let cli = Cli::parse();
    init_threads(cli.threads);
    match cmd::run(cli.command, started) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if is_broken_pipe(&e) {
                return ExitCode::SUCCESS;
            }
            eprintln!("error: {e}");
            let code = match e.class() {
                "io" => 3u8,
                "numerical" => 5,
                _ => 4,
            };
            ExitCode::from(code)
        }
    }
}
