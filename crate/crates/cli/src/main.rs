use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use cvf_cli::{run, Cli};

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    let name = args.first().cloned().unwrap_or_default();
    let start = Instant::now();
    let result = run(cli, &args);
    eprintln!("cvf {name}: {:.2}s", start.elapsed().as_secs_f64());
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
