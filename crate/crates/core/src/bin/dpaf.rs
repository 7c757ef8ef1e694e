use std::process::ExitCode;

fn main() -> ExitCode {
    dpafnet::cli::main_with(std::env::args_os())
}
