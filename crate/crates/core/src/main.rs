use std::process::ExitCode;

use clap::Parser;
use germeval_harness::cli::{self, Cli};
use germeval_harness::ErrorKind;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let parsed = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let code = ErrorKind::Usage.exit_code();
            eprintln!("{}", cli::error_line(ErrorKind::Usage.as_str(), code, &e.render().to_string()));
            return ExitCode::from(code as u8);
        }
    };
    match cli::run(parsed) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            eprintln!("{}", cli::error_line(kind.as_str(), kind.exit_code(), &e.to_string()));
            ExitCode::from(kind.exit_code() as u8)
        }
    }
}
