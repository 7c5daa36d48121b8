//! Command-line and HTTP front ends for the `n3f` engine.

pub mod cli;
pub mod pipeline;
pub mod server;

use clap::Parser;

/// Parses `argv` and runs it. Exit codes: 0 success, 1 runtime failure,
/// 2 usage error.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match cli::Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return 1;
    }
    match cli::execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

/// Caps the worker pool at `N3F_THREADS` when set.
fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("N3F_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| anyhow::anyhow!("N3F_THREADS must be a positive integer, got {v:?}"))?;
    if n == 0 {
        anyhow::bail!("N3F_THREADS must be positive");
    }
    // a pool built earlier in the same process keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
