//! `lookhere` command-line tool.
//!
//! Exit codes: 0 on success, 2 for invalid arguments or inputs, 3 for
//! runtime failures.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Defaults, Flags, Variant};
use lookhere::Error;

#[derive(Parser, Debug)]
#[command(name = "lookhere", version, about = "Directional attention-bias fields for vision transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a bias field and write it as LHBF (plus optional CSV and PGM renders).
    GenBias(Flags),
    /// Train a tiny ViT on the bright-quadrant task and evaluate on a larger grid.
    Demo(Flags),
    /// Move a position encoding to a new grid and write the result.
    Adapt(Flags),
    /// Per-layer attention metrics of an untrained tiny ViT.
    Analyze(Flags),
    /// Per-head mask sparsity of a LookHere layout.
    Sparsity(Flags),
}

const BASE: Defaults = Defaults {
    variant: Variant::Lh90,
    grid: (14, 14),
    target: None,
    layers: 12,
    heads: 12,
    dim: 768,
    patch: 16,
    out: "bias.lhbf",
};

const SMALL: Defaults = Defaults {
    grid: (8, 8),
    target: Some((16, 16)),
    layers: 4,
    heads: 4,
    dim: 64,
    patch: 4,
    out: "demo_out",
    ..BASE
};

fn run(cli: Cli) -> lookhere::Result<String> {
    match cli.command {
        Command::GenBias(f) => commands::gen_bias(&f.resolve(BASE)?),
        Command::Sparsity(f) => commands::sparsity(&f.resolve(BASE)?),
        Command::Adapt(f) => commands::adapt_cmd(&f.resolve(Defaults { out: "adapted.lhbf", ..BASE })?),
        Command::Demo(f) => commands::demo(&f.resolve(SMALL)?),
        Command::Analyze(f) => commands::analyze(&f.resolve(Defaults { out: "-", ..SMALL })?),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Format(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
