use std::path::PathBuf;
use std::process::ExitCode;

use bnn_core::harness::{load_config, run_experiment};
use bnn_core::optimizers::{BiasMode, OptimizerConfig};
use bnn_core::oracle::{brute_force_optimum, random_signs, run_flip_optimizer, FlipRule, SyntheticObjective};
use bnn_core::telemetry::emit_plot;
use bnn_core::xnor::{bench_csv, bench_xnor};
use bnn_core::Error;
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Overrides `output_dir` from the config file.
const OUTPUT_DIR_ENV: &str = "BNN_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "bnn", version, about = "Binarized network training with flip-based optimizers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file, optionally resuming from a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compare a flip optimizer against the brute-force optimum of a planted quadratic.
    Oracle {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long, value_enum, default_value_t = FlipOptimizer::Bop2ndUnbiased)]
        optimizer: FlipOptimizer,
        /// Objective file to use instead of a generated instance.
        #[arg(long)]
        instance: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 0.1)]
        gamma: f64,
        #[arg(long, default_value_t = 0.5)]
        sigma: f64,
        #[arg(long, default_value_t = 1e-6)]
        tau: f64,
    },
    /// Time xnor+popcount GEMM against the float GEMM for K in {256, 1024, 4096}.
    BenchXnor {
        #[arg(long, default_value_t = 64)]
        m: usize,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render a metrics CSV as an SVG plot.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FlipOptimizer {
    Bop,
    Bop2ndBiased,
    Bop2ndUnbiased,
}

fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::Config(_) | Error::Capacity { .. } => 2,
        Error::Data(_) | Error::Parse { .. } => 3,
        Error::NumericOverflow { .. } | Error::DegenerateBatch(_) => 4,
        _ => 1,
    }
}

fn train(config: PathBuf, resume: Option<PathBuf>) -> Result<(), Error> {
    let mut cfg = load_config(&config)?;
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
        cfg.output_dir = dir.into();
    }
    let out = run_experiment(&cfg, resume.as_deref())?;
    let r = &out.final_record;
    println!(
        "epoch {} step {} {}: loss {:.6} top1 {:.4} global_pi {:.4}",
        r.epoch,
        r.step,
        r.split.as_str(),
        r.loss,
        r.top1,
        r.global_pi
    );
    println!("outputs in {}", out.output_dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn oracle(
    seed: u64,
    n: usize,
    optimizer: FlipOptimizer,
    instance: Option<PathBuf>,
    steps: usize,
    gamma: f64,
    sigma: f64,
    tau: f64,
) -> Result<(), Error> {
    let obj = match instance {
        Some(path) => {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            SyntheticObjective::parse(&text, &path)?
        }
        None => SyntheticObjective::planted(seed, n, n)?.0,
    };
    let best = brute_force_optimum(&obj)?;
    let rule = match optimizer {
        FlipOptimizer::Bop => FlipRule::Bop { gamma, tau },
        FlipOptimizer::Bop2ndBiased | FlipOptimizer::Bop2ndUnbiased => {
            let bias_mode = if matches!(optimizer, FlipOptimizer::Bop2ndBiased) {
                BiasMode::Biased
            } else {
                BiasMode::Unbiased
            };
            let cfg = OptimizerConfig {
                gamma,
                sigma,
                tau,
                bias_mode,
                ..OptimizerConfig::default()
            };
            cfg.validate()?;
            FlipRule::Bop2nd(cfg)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = random_signs(obj.dim(), &mut rng);
    let run = run_flip_optimizer(&obj, rule, &start, steps, best.loss, 1e-9)?;
    println!("optimum loss {:e}", best.loss);
    println!("final loss   {:e}", run.final_loss);
    match run.reached_at {
        Some(step) => println!("reached optimum at step {step} ({} flips in total)", run.flips),
        None => println!("did not reach optimum in {steps} steps ({} flips)", run.flips),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, resume } => train(config, resume),
        Command::Oracle {
            seed,
            n,
            optimizer,
            instance,
            steps,
            gamma,
            sigma,
            tau,
        } => oracle(seed, n, optimizer, instance, steps, gamma, sigma, tau),
        Command::BenchXnor { m, n, reps, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            bench_xnor(m, &[256, 1024, 4096], n, reps, &mut rng).map(|rows| print!("{}", bench_csv(&rows)))
        }
        Command::Plot { csv, out } => emit_plot(&csv, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
