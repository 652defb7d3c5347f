use std::path::PathBuf;
use std::process::ExitCode;

use chanstream_server::{run, ServerError};
use clap::Parser;

/// Serve a packed NFPS stream over HTTP.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// Packed stream file.
    #[arg(long)]
    stream: PathBuf,
    /// Listen address.
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: String,
    /// Rendered frames kept in memory (0 disables the cache).
    #[arg(long, default_value_t = 64)]
    cache_size: usize,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args.stream, &args.bind, args.cache_size) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                ServerError::Stream(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
