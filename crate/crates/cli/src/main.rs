use std::process::ExitCode;

fn main() -> ExitCode {
    superpipe_cli::main_with_args()
}
