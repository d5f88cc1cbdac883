use std::io::{self, BufRead, Write};
use std::process::ExitCode;

use clap::Parser;
use metarec_cli::commands::Io;
use metarec_cli::{run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let stdin = io::stdin();
    let mut input: Box<dyn BufRead> = Box::new(stdin.lock());
    let mut out = io::stdout();
    let mut err = io::stderr();
    let result = run(
        cli,
        &mut Io {
            input: &mut *input,
            out: &mut out,
            err: &mut err,
        },
    );
    let _ = out.flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
