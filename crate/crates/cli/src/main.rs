use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(chanstream_cli::main_with(std::env::args()))
}
