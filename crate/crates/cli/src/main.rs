//! `fedkseed` command line: run experiments, query the cost model and the
//! byte accounting, and self-verify the frozen fixtures.
//!
//! Exit codes: 0 success, 1 configuration error, 2 verification failure,
//! 3 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedkseed::experiment::{replay_cost_model, run_experiment, CostModelQuery, ExperimentConfig, Mode};
use fedkseed::verify::{verify_fixtures, VerifyOptions};
use fedkseed::wire::round_bytes;
use fedkseed::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_VERIFY: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "fedkseed", version, about = "Federated zeroth-order training with a finite seed pool")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write per-round CSVs plus summary.json.
    Run(RunArgs),
    /// Steps a client replays to catch up after `rounds` rounds.
    Cost {
        #[arg(long)]
        m: usize,
        #[arg(long)]
        tau: usize,
        #[arg(long)]
        rounds: usize,
        /// Seed pool size; omit for the unbounded-seed baseline.
        #[arg(long = "K")]
        k: Option<usize>,
    },
    /// Per-client bytes for one round.
    Bytes {
        #[arg(long = "K")]
        k: usize,
        #[arg(long)]
        tau: usize,
        #[arg(long)]
        pro: bool,
    },
    /// Check golden fixtures and numeric identities.
    Verify {
        /// Directory holding perturb_golden.txt and wire_golden.txt.
        #[arg(long)]
        fixtures: Option<PathBuf>,
        /// Multiplier applied to every numeric tolerance.
        #[arg(long, default_value_t = 1.0)]
        tolerance_scale: f64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<usize>,
    /// Any other config key, as key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::ImpossiblePool { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn build_config(args: &RunArgs) -> fedkseed::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("cannot read {}: {io}", path.display())),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    let overrides = [
        ("mode", args.mode.clone()),
        ("K", args.k.map(|v| v.to_string())),
        ("alpha", args.alpha.map(|v| v.to_string())),
        ("rounds", args.rounds.map(|v| v.to_string())),
        ("tau", args.tau.map(|v| v.to_string())),
        ("seed", args.seed.map(|v| v.to_string())),
        ("reps", args.reps.map(|v| v.to_string())),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    for pair in &args.set {
        let (key, value) =
            pair.split_once('=').ok_or_else(|| Error::Config(format!("--set expects key=value, got `{pair}`")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: &RunArgs) -> Result<(), u8> {
    let cfg = build_config(args).map_err(|e| {
        eprintln!("error: {e}");
        exit_code(&e)
    })?;
    let summary = run_experiment(&cfg).map_err(|e| {
        eprintln!("error: {e}");
        exit_code(&e)
    })?;
    if cfg.mode == Mode::CostModel {
        println!("wrote {}", cfg.output_dir.join("cost_model.csv").display());
        return Ok(());
    }
    for g in &summary.groups {
        let k = g.k.map_or(String::from("-"), |k| k.to_string());
        println!(
            "{} K={k} runs={} initial_loss={:.6} final_loss={:.6} ± {:.6}",
            cfg.mode.as_str(),
            g.runs,
            g.mean_initial_loss,
            g.mean_final_loss,
            g.std_final_loss
        );
    }
    println!("wrote {}", cfg.output_dir.join("summary.json").display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::Run(args) => run(&args),
        Command::Cost { m, tau, rounds, k } => {
            if k == Some(0) {
                eprintln!("error: --K must be positive");
                Err(EXIT_CONFIG)
            } else {
                println!("{}", replay_cost_model(&CostModelQuery { m, tau, rounds, k }));
                Ok(())
            }
        }
        Command::Bytes { k, tau, pro } => {
            if k == 0 || tau == 0 {
                eprintln!("error: --K and --tau must be positive");
                Err(EXIT_CONFIG)
            } else {
                let b = round_bytes(k, tau, pro);
                println!("down={} up={} total={}", b.down, b.up, b.total);
                Ok(())
            }
        }
        Command::Verify { fixtures, tolerance_scale } => {
            if !(tolerance_scale.is_finite() && tolerance_scale > 0.0) {
                eprintln!("error: --tolerance-scale must be positive");
                Err(EXIT_CONFIG)
            } else {
                let report = verify_fixtures(&VerifyOptions {
                    fixtures_dir: fixtures,
                    tolerance_scale,
                    ..VerifyOptions::default()
                });
                println!("{report}");
                if report.passed() { Ok(()) } else { Err(EXIT_VERIFY) }
            }
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => ExitCode::from(code),
    }
}
