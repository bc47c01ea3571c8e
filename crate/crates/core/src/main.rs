use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(fura::cli::main_with(std::env::args_os()))
}
