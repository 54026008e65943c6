use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(subspace_gossip::cli::main(std::env::args_os()))
}
