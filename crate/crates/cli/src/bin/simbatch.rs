//! Runs job scripts spooled by the mock batch backend, oldest first.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;

use clap::Parser;

#[derive(Parser)]
#[command(name = "simbatch", version, about = "Desk-scale batch runner for flowforge's mock batch backend")]
struct Args {
    /// Spool directory shared with the submitting engine.
    #[arg(long)]
    spool: PathBuf,
    /// Jobs run at the same time.
    #[arg(long, default_value_t = 1)]
    concurrency: usize,
    /// Exit once the spool holds no pending jobs.
    #[arg(long)]
    once: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let stop = AtomicBool::new(false);
    match flowforge::exec::run_spool(&args.spool, args.concurrency.max(1), args.once, &stop) {
        Ok(n) => {
            eprintln!("simbatch: ran {n} job(s)");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("simbatch: {e}");
            ExitCode::FAILURE
        }
    }
}
