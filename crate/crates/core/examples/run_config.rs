//! Run any shipped configuration through the library instead of the binary:
//! `cargo run --release --example run_config -- train configs/fig1_prox.toml out/`.

use std::path::Path;

use scb::experiment::{configure_threads, run_command, Command, ExperimentConfig, RunOptions};

fn main() -> scb::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let [command, config, out] = args.as_slice() else {
        eprintln!("usage: run_config <command> <config.toml> <out-dir>");
        std::process::exit(2);
    };
    configure_threads();
    let cfg = ExperimentConfig::load(Path::new(config))?;
    let report = run_command(command.parse::<Command>()?, &cfg, Some(Path::new(out)), RunOptions { deterministic: true })?;
    println!("{report:#?}");
    Ok(())
}
