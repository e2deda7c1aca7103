//! Experiment driver: trains regularizer grids, solves the resulting
//! network embeddings as mixed-integer programs, audits gradients, and
//! aggregates results into summary tables.

mod bench;
mod config;
mod optimize;
mod report;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use relumilp::gradcheck::{
    check_envelope_duals, check_regularizer_gradients, EnvelopeOptions, RegCheckOptions,
};
use relumilp::lp::Sense;

#[derive(Parser)]
#[command(
    name = "relumilp",
    version,
    about = "Train ReLU surrogates and solve their MILP embeddings",
    long_about = None,
    after_help = "The RELUMILP_OUT environment variable overrides every output directory."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SenseArg {
    Min,
    Max,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train every grid cell of an experiment config; writes one model
    /// file and one results row per cell.
    Train {
        /// Experiment description (TOML; unknown keys are rejected).
        #[arg(long)]
        config: PathBuf,
    },
    /// Embed trained models in the big-M program and optimize them.
    Optimize {
        /// Model file or glob, e.g. "out/models/*.model".
        #[arg(long)]
        models: String,
        #[arg(long, value_enum, default_value_t = SenseArg::Min)]
        sense: SenseArg,
        /// Per-model wall clock budget in seconds.
        #[arg(long = "time-limit")]
        time_limit: Option<f64>,
        /// "output" for the first output, or "weights:w1,w2,..." for a
        /// linear combination of outputs.
        #[arg(long, default_value = "output")]
        objective: String,
        /// Results CSV path (default: optimize_results.csv in the output
        /// directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference audit of the regularizer gradients and the LP
    /// dual channel; exits nonzero on any disagreement.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Aggregate results CSVs into grouped means, deviations, and ratios
    /// against the unregularized baseline.
    Report {
        /// Input CSV file or glob; all inputs must share one schema.
        #[arg(long = "in")]
        input: String,
        /// Summary CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in baseline-vs-regularizer experiment end to end.
    Bench {
        /// Shrink sizes for a fast smoke run.
        #[arg(long)]
        quick: bool,
    },
}

fn cmd_gradcheck(seed: u64) -> anyhow::Result<bool> {
    let reg = check_regularizer_gradients(seed, &RegCheckOptions::default());
    println!(
        "regularizer gradients: {} nets, {} comparisons, {} skipped near kinks",
        reg.nets, reg.checked, reg.skipped
    );
    for f in &reg.failures {
        println!("  FAIL {f}");
    }

    let envelope = check_envelope_duals(seed.wrapping_add(1), &EnvelopeOptions::default());
    println!(
        "lp dual channel: {} programs, {} duals compared, {} skipped (active set moved), {} widenings",
        envelope.lps, envelope.checked, envelope.skipped, envelope.widenings
    );
    for f in &envelope.failures {
        println!("  FAIL {f}");
    }
    if envelope.stable_fraction() < envelope.required_stable_fraction {
        println!(
            "  FAIL stable fraction {:.3} below required {:.3}",
            envelope.stable_fraction(),
            envelope.required_stable_fraction
        );
    }

    let ok = reg.passed() && envelope.passed();
    println!("gradcheck: {}", if ok { "PASS" } else { "FAIL" });
    Ok(ok)
}

fn dispatch(cli: Cli) -> anyhow::Result<bool> {
    match cli.cmd {
        Cmd::Train { config } => {
            run::cmd_train(&config)?;
            Ok(true)
        }
        Cmd::Optimize { models, sense, time_limit, objective, out } => {
            let args = optimize::OptimizeArgs {
                models,
                sense: match sense {
                    SenseArg::Min => Sense::Min,
                    SenseArg::Max => Sense::Max,
                },
                time_limit_s: time_limit,
                objective,
                out,
            };
            optimize::cmd_optimize(&args)?;
            Ok(true)
        }
        Cmd::Gradcheck { seed } => cmd_gradcheck(seed),
        Cmd::Report { input, out } => {
            report::cmd_report(&input, &out)?;
            Ok(true)
        }
        Cmd::Bench { quick } => bench::cmd_bench(quick),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
