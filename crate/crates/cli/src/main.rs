use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(rgr_cli::cli::main_with(std::env::args_os()))
}
