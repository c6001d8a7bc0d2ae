use std::process::ExitCode;

fn main() -> ExitCode {
    ucds::cli::run(std::env::args_os())
}
