use std::process::ExitCode;

fn main() -> ExitCode {
    dee::cli::run(std::env::args_os())
}
