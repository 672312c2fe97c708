use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(haf::cli::main_with_args(std::env::args_os()))
}
