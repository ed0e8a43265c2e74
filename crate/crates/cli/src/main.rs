use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MLSELECT_LOG", "warn")).init();
    mlselect::run_from(std::env::args_os())
}
