use std::process::ExitCode;

fn main() -> ExitCode {
    simplex_core::cli::main()
}
