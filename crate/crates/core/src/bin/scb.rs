use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use scb::experiment::{configure_threads, run_command, Command, CommandReport, ExperimentConfig, RunOptions};
use scb::ScbError;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    Generate,
    Train,
    Simulate,
    Transfer,
    OracleCheck,
    SoftmaxCompare,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Generate => Command::Generate,
            Cmd::Train => Command::Train,
            Cmd::Simulate => Command::Simulate,
            Cmd::Transfer => Command::Transfer,
            Cmd::OracleCheck => Command::OracleCheck,
            Cmd::SoftmaxCompare => Command::SoftmaxCompare,
        }
    }
}

/// Sparse contextual bigram experiments.
#[derive(Parser, Debug)]
#[command(version)]
struct Cli {
    command: Cmd,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Zero wall-clock columns so outputs are byte-identical across runs.
    #[arg(long)]
    deterministic: bool,
}

fn fail(e: &ScbError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads();
    let cfg = match ExperimentConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let opts = RunOptions { deterministic: cli.deterministic };
    let report = match run_command(cli.command.into(), &cfg, cli.out.as_deref(), opts) {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };
    match report {
        CommandReport::Train(s) => {
            for r in &s.runs {
                let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
                println!(
                    "seed {}: dist_A {} dist_V {} post-norm dist_A {}",
                    r.seed,
                    fmt(r.final_dist_a_mu),
                    fmt(r.final_dist_v_mu),
                    fmt(r.post_norm_dist_a_mu)
                );
                if let Some(e) = &r.error {
                    eprintln!("seed {}: {e}", r.seed);
                }
            }
            if let Some(e) = s.first_error() {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
            if s.any_diverged() {
                return ExitCode::from(3);
            }
        }
        CommandReport::Generate(s) => {
            for t in &s.tasks {
                println!("{}: K_P {:.6} K_Q {:.6} ||mu||^2 {:.6}", t.file, t.k_p, t.k_q, t.mu_norm_sq);
            }
        }
        CommandReport::Simulate(s) => {
            for r in &s.runs {
                if let Some(st) = r.final_state {
                    println!("seed {} {:?}: ||Delta_A||^2 {:.4e}", r.seed, r.mode, st.delta_a_sq);
                }
            }
        }
        CommandReport::Oracle(rep) => {
            for (k, v) in &rep.max_abs_diff {
                println!("{k}: {v:.3e}");
            }
        }
        CommandReport::Softmax(s) => {
            for r in &s.runs {
                println!(
                    "seed {}: loss linear {:.5} softmax {:.5} (optimum {:.5}); cosine linear {:.4} softmax {:.4}",
                    r.seed, r.final_loss_linear, r.final_loss_softmax, r.optimal_loss, r.cos_linear, r.cos_softmax
                );
            }
        }
    }
    ExitCode::SUCCESS
}
