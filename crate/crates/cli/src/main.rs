//! `voxdiff`: seeded, manifest-writing front end for the volumetric
//! diffusion inpainting pipeline.
//!
//! Exit codes: 0 success, 2 I/O failure, 3 malformed input or
//! configuration, 4 solver failure, 5 numerical failure.

#![forbid(unsafe_code)]

mod args;
mod commands;
mod config;
mod manifest;
mod util;

use clap::Parser;

use voxdiff_core::error::Error;

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) => 2,
        Error::Format(_) | Error::ShapeMismatch(_) | Error::InvalidInput(_) => 3,
        Error::Solver(_) => 4,
        Error::Numeric(_) => 5,
    }
}

fn main() {
    let cli = match args::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version print and exit 0; real usage errors are
            // configuration problems
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match &cli.command {
        args::Command::Inpaint(a) => commands::inpaint::run(a),
        args::Command::Synth(a) => commands::inpaint::run_synth(a),
        args::Command::TrainDenoiser(a) => commands::train::run(a),
        args::Command::Postprocess(a) => commands::postproc::run(a),
        args::Command::Evaluate(a) => commands::evaluate::run(a),
        args::Command::Maskgen(a) => commands::maskgen::run(a),
        args::Command::ScheduleDump(a) => commands::schedule::run(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
