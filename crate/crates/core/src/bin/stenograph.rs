use std::process::ExitCode;

use clap::Parser;
use mimalloc::MiMalloc;
use stenograph::cli::{error_json, run, Cli, LOG_ENV};

// glibc hands freed activation buffers back to the OS after every step,
// which costs more than the arithmetic on small machines.
#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(m) => {
            println!(
                "{}: {} outputs, digest {}",
                m.stage,
                m.outputs.len(),
                m.outputs_digest()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
