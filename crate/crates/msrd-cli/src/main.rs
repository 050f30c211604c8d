mod commands;
mod config;

use std::process::ExitCode;

fn main() -> ExitCode {
    match commands::entry() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("msrd: {e}");
            ExitCode::from(e.code())
        }
    }
}
