//! `otalign`: command-line access to the OT alignment library.
//!
//! Every subcommand writes JSON to stdout (JSON lines for `train`) and uses
//! the exit code as its only status channel:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | bad input, bad configuration, or I/O failure |
//! | 2 | finished, but flagged: Sinkhorn did not converge or a gradient check failed |
//! | 3 | training diverged |

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "otalign", version, about = "Optimal transport alignment for distillation across tokenizers")]
pub struct Cli {
    /// JSON run configuration; flags override it, and it overrides defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Entropic OT plan for a cost matrix with uniform marginals.
    Sinkhorn {
        cost: PathBuf,
        #[command(flatten)]
        solver: SolverFlags,
    },
    /// Exact OT cost by min-cost flow, or by permutation enumeration.
    Oracle {
        cost: PathBuf,
        #[arg(long, value_enum, default_value_t = OracleMethod::Flow)]
        method: OracleMethod,
    },
    /// Layer-wise OT loss between a student and a teacher sequence.
    ///
    /// With only the two positional files the loss is computed for that
    /// single layer. Pass both hidden-layer files for the two-layer loss.
    Align {
        /// Student embedding sequence.
        student: PathBuf,
        /// Teacher embedding sequence.
        teacher: PathBuf,
        #[arg(long, value_name = "FILE", requires = "teacher_hid")]
        student_hid: Option<PathBuf>,
        #[arg(long, value_name = "FILE", requires = "student_hid")]
        teacher_hid: Option<PathBuf>,
        /// Embedding-layer projection: an integer seed or a matrix file.
        #[arg(long, value_name = "SEED|FILE")]
        proj: Option<String>,
        /// Hidden-layer projection: an integer seed or a matrix file.
        #[arg(long, value_name = "SEED|FILE")]
        proj_hid: Option<String>,
        /// Include the transport plans in the output.
        #[arg(long)]
        plans: bool,
        #[command(flatten)]
        solver: SolverFlags,
    },
    /// Cross chain-of-thought losses for a quad of representation bundles.
    Ccot {
        quad: PathBuf,
        #[arg(long, value_name = "SEED|FILE")]
        proj: Option<String>,
        #[arg(long, value_name = "SEED|FILE")]
        proj_hid: Option<String>,
        /// Cross-entropy value; with it the combined objective is reported.
        #[arg(long)]
        ce: Option<f64>,
        /// Distillation (KD) value added to the alignment term.
        #[arg(long, requires = "ce")]
        kd: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[command(flatten)]
        solver: SolverFlags,
    },
    /// Finite-difference check of the frozen-plan alignment gradient.
    ///
    /// Without files a seeded random 3x4 student against a 5x4 teacher is
    /// checked. `--toy` checks the full training objective of a small toy
    /// model instead.
    Checkgrad {
        #[arg(requires = "teacher", conflicts_with = "toy")]
        student: Option<PathBuf>,
        teacher: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, value_name = "SEED|FILE")]
        proj: Option<String>,
        #[arg(long)]
        toy: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        solver: SolverFlags,
    },
    /// Toy distillation run; streams one JSON record per step, then a summary.
    Train(TrainFlags),
    /// Token ids of a string under the char or pair tokenizer.
    Tokenize {
        text: String,
        #[arg(long, value_enum, default_value_t = TokenizerChoice::Char)]
        kind: TokenizerChoice,
        /// Merge budget for the pair tokenizer learned on the toy corpus
        /// (default: `train.teacher_merges`).
        #[arg(long)]
        merges: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OracleMethod {
    Flow,
    Permutation,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TokenizerChoice {
    Char,
    Pair,
}

#[derive(Debug, Default, Args)]
pub struct SolverFlags {
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long, value_name = "BOOL")]
    pub log_domain: Option<bool>,
}

#[derive(Debug, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// One of only-cot, cst, crc, only-hidden, full, same-tokenizer.
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Print only the summary line.
    #[arg(long)]
    pub quiet: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(status) => ExitCode::from(status as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
