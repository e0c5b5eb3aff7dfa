//! Command-line front end: problem-file ingestion, the built-in example
//! suite, reformulation emission, comparison tables, and check dispatch.
//!
//! Exit codes: 0 when a check completes with a holds/true verdict, 1 when it
//! completes with violated/false, 2 on input or capability errors.

mod commands;
mod json;
mod problem_file;

use clap::{Args, Parser, Subcommand};

use commands::{CheckArgs, Tolerances};

#[derive(Parser)]
#[command(
    name = "bilevel",
    version,
    about = "Convex-lower-level bilevel programs: single-level reformulations, duality \
             relations, and constraint-qualification checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonFlags {
    /// Emit the report as canonical single-line JSON
    #[arg(long, global = true)]
    json: bool,
    /// Numerical tolerance (default 1e-8, or the BILEVEL_TOL env var)
    #[arg(long)]
    tol: Option<f64>,
    /// Active-set classification tolerance (default 1e-7)
    #[arg(long)]
    tol_act: Option<f64>,
    /// Grid step for scans (default 1e-3)
    #[arg(long)]
    step: Option<f64>,
    /// Scan radius around the reference point (default 0.1)
    #[arg(long)]
    radius: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Emit a single-level reformulation of the problem in a file
    Reformulate {
        #[arg(long)]
        file: String,
        /// One of vf|kkt|ge|ld|wd|mwd
        #[arg(long)]
        kind: String,
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Run a built-in worked example and assert its documented outcomes
    Examples {
        /// One of lagrange-running|bcq-holds|bcq-fails|wolfe-running|
        /// wolfe-counterexample|mondweir-running
        #[arg(long)]
        name: String,
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Print variable/constraint counts and qualitative properties of all
    /// six reformulations for the problem's dimensions
    Compare {
        #[arg(long)]
        file: String,
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Run a single verification (duality, qualification, optimality, ...)
    Check {
        #[arg(long)]
        file: String,
        /// weak-duality|strong-duality|saddle|mfcq|nsmfcq|bcq|slater|local|
        /// global|enumerate-K|ge-feasible|probe-isc
        #[arg(long)]
        what: String,
        /// Reformulation kind where applicable (vf|kkt|ge|ld|wd|mwd|obop)
        #[arg(long)]
        kind: Option<String>,
        /// Comma-separated flat coordinates
        #[arg(long)]
        point: Option<String>,
        /// Worker threads for global grid scans
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Sample count for the inner-semicompactness probe
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[command(flatten)]
        common: CommonFlags,
    },
}

/// Flag > BILEVEL_TOL env (tol only) > problem-file metadata > default.
fn tolerances(common: &CommonFlags, pf: Option<&problem_file::ProblemFile>) -> Tolerances {
    let env_tol = std::env::var("BILEVEL_TOL")
        .ok()
        .and_then(|v| v.parse::<f64>().ok());
    let file = |f: fn(&problem_file::ProblemFile) -> Option<f64>| pf.and_then(f);
    Tolerances {
        tol: common.tol.or(env_tol).or(file(|p| p.tol)).unwrap_or(1e-8),
        tol_act: common.tol_act.or(file(|p| p.tol_act)).unwrap_or(1e-7),
        step: common.step.or(file(|p| p.step)).unwrap_or(1e-3),
        radius: common.radius.or(file(|p| p.radius)).unwrap_or(0.1),
    }
}

fn parse_point(s: &str) -> Result<Vec<f64>, bilevel_core::Error> {
    s.split(|c| c == ',' || c == ' ')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>().map_err(|_| {
                bilevel_core::Error::InvalidInput(format!("bad coordinate `{t}` in --point"))
            })
        })
        .collect()
}

fn run() -> Result<(commands::Outcome, bool), bilevel_core::Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Reformulate { file, kind, common } => {
            let pf = problem_file::load_problem(&file)?;
            let out = commands::cmd_reformulate(&pf, &kind, tolerances(&common, Some(&pf)))?;
            Ok((out, common.json))
        }
        Command::Examples { name, common } => {
            let out = commands::cmd_examples(&name, tolerances(&common, None))?;
            Ok((out, common.json))
        }
        Command::Compare { file, common } => {
            let pf = problem_file::load_problem(&file)?;
            let out = commands::cmd_compare(&pf, tolerances(&common, Some(&pf)))?;
            Ok((out, common.json))
        }
        Command::Check { file, what, kind, point, workers, samples, common } => {
            let pf = problem_file::load_problem(&file)?;
            let point = point.as_deref().map(parse_point).transpose()?;
            let args = CheckArgs {
                what: &what,
                kind: kind.as_deref(),
                point,
                workers,
                samples,
            };
            let out = commands::cmd_check(&pf, &args, tolerances(&common, Some(&pf)))?;
            Ok((out, common.json))
        }
    }
}

fn main() {
    match run() {
        Ok((outcome, as_json)) => {
            if as_json {
                println!("{}", outcome.report.render_compact());
            } else if let Some(text) = &outcome.text {
                print!("{text}");
            } else {
                println!("{}", outcome.report.render_pretty());
            }
            std::process::exit(outcome.exit);
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}
