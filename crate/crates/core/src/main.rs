use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedcsap::harness::{eval_command, gradcheck_command, harmonic_mean, load_config, run_experiment, HarnessError, GRADCHECK_TOL};
use fedcsap::losses::CrpVariant;

#[derive(Parser)]
#[command(name = "fedcsap", version, about = "Federated style-aware prompt generation on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write config.resolved.json, metrics.csv and final.fckp.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        disable_injection: bool,
        #[arg(long)]
        static_prompts: bool,
        #[arg(long, value_parser = parse_variant)]
        crp_variant: Option<CrpVariant>,
        /// Overrides master_seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of every trainable block.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint under a config's data and clients.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
}

fn parse_variant(s: &str) -> Result<CrpVariant, String> {
    s.parse()
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run { config, disable_injection, static_prompts, crp_variant, seed, out } => {
            let mut cfg = load_config(&config)?;
            cfg.ablations.disable_injection |= disable_injection;
            cfg.ablations.static_prompts |= static_prompts;
            if let Some(v) = crp_variant {
                cfg.ablations.crp_variant = v;
            }
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            if let Some(dir) = out {
                cfg.output_dir = dir;
            }
            let outcome = run_experiment(&cfg)?;
            if let Some(last) = outcome.reports.last() {
                println!(
                    "round {}: train_loss {:.4} acc_local {:.4} acc_base {:.4} acc_new {:.4} hm {:.4}",
                    last.round, last.train_loss, last.acc_local, last.acc_base, last.acc_new, last.hm
                );
            }
            println!("wrote {}", outcome.output_dir.display());
            Ok(())
        }
        Command::Gradcheck { config } => {
            let cfg = load_config(&config)?;
            let outcome = gradcheck_command(&cfg)?;
            for line in outcome.lines() {
                println!("{line}");
            }
            let worst = outcome.report.max_rel_error();
            println!("trainable scalars {}, max rel err {worst:.3e} (tolerance {GRADCHECK_TOL:e})", outcome.trainable_scalars);
            if outcome.passed() {
                Ok(())
            } else {
                Err(HarnessError::GradCheck(worst))
            }
        }
        Command::Eval { checkpoint, config } => {
            let cfg = load_config(&config)?;
            let s = eval_command(&cfg, &checkpoint)?;
            println!(
                "acc_local {:.4} acc_base {:.4} acc_new {:.4} hm {:.4}",
                s.local,
                s.base,
                s.new,
                harmonic_mean(&[s.local, s.base, s.new])
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
