use std::process::ExitCode;

use specdec::error::Error;

mod cli;

fn main() -> ExitCode {
    let args = cli::expand_args(std::env::args().collect());
    let args = match args {
        Ok(args) => args,
        Err(err) => {
            eprintln!("error: {err}");
            return ExitCode::from(2);
        }
    };
    match cli::run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_) | Error::Parse(_) => 2,
        Error::DimensionMismatch { .. } => 3,
        Error::MissingArtifact(_) => 4,
        Error::CalibrationUnderflow { .. } => 5,
        _ => 1,
    }
}
