use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use noisecp::calibrate::{Breakpoints, SearchOptions, SolutionRule};
use noisecp::{ScoreKind, ScoreParams};

#[derive(Debug, Parser)]
#[command(name = "noisecp", version, about = "Conformal prediction with noisy calibration labels")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "NOISECP_THREADS")]
    pub threads: Option<usize>,

    /// Output format on stdout.
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Text,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic probabilities with clean and noisy labels.
    Simulate(SimulateArgs),
    /// Compute a calibration threshold from noisy labels.
    Calibrate(CalibrateArgs),
    /// Write prediction sets for a probability file.
    Predict(PredictArgs),
    /// Run the repeated-split evaluation.
    Evaluate(EvaluateArgs),
    /// Tabulate finite-sample correction terms.
    Guarantee(GuaranteeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct NoiseArgs {
    /// Uniform noise level.
    #[arg(long, conflicts_with = "noise_matrix")]
    pub epsilon: Option<f64>,
    /// k x k transition matrix, P(i, j) = p(noisy = j | clean = i).
    #[arg(long, value_name = "PATH")]
    pub noise_matrix: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScoreArg {
    Hps,
    Aps,
    Raps,
}

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    #[arg(long, value_enum, default_value = "aps")]
    pub score: ScoreArg,
    /// RAPS penalty weight.
    #[arg(long, default_value_t = 0.1)]
    pub raps_a: f64,
    /// RAPS free set size.
    #[arg(long, default_value_t = 1)]
    pub raps_b: usize,
    /// Randomized APS tie-breaking.
    #[arg(long)]
    pub randomized: bool,
    /// Seed of the randomized scores.
    #[arg(long, default_value_t = 0)]
    pub score_seed: u64,
}

impl ScoreArgs {
    pub fn params(&self) -> ScoreParams {
        ScoreParams {
            kind: match self.score {
                ScoreArg::Hps => ScoreKind::Hps,
                ScoreArg::Aps => ScoreKind::Aps,
                ScoreArg::Raps => ScoreKind::Raps,
            },
            raps_a: self.raps_a,
            raps_b: self.raps_b,
            randomized: self.randomized,
            seed: self.score_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BreakpointArg {
    Auto,
    Exact,
    Grid,
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    /// Candidate thresholds: every class score, a grid, or exact up to the budget.
    #[arg(long, value_enum, default_value = "auto")]
    pub breakpoints: BreakpointArg,
    /// Largest n*k evaluated exactly in auto mode.
    #[arg(long, default_value_t = 10_000_000)]
    pub grid_budget: usize,
    /// Grid points when a grid is used.
    #[arg(long, default_value_t = 10_000)]
    pub grid_resolution: usize,
    /// Take the start of the last run of qualifying thresholds.
    #[arg(long)]
    pub largest_solution: bool,
}

impl SearchArgs {
    pub fn options(&self) -> SearchOptions {
        SearchOptions {
            breakpoints: match self.breakpoints {
                BreakpointArg::Exact => Breakpoints::Exact,
                BreakpointArg::Grid => Breakpoints::Grid {
                    resolution: self.grid_resolution,
                },
                BreakpointArg::Auto => Breakpoints::Auto {
                    budget: self.grid_budget,
                    resolution: self.grid_resolution,
                },
            },
            rule: if self.largest_solution {
                SolutionRule::Largest
            } else {
                SolutionRule::Minimal
            },
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Number of classes.
    #[arg(long)]
    pub k: usize,
    /// Number of samples.
    #[arg(long)]
    pub n: usize,
    /// Mean logit boost of the true class.
    #[arg(long, default_value_t = 3.0)]
    pub signal_mu: f64,
    #[arg(long, default_value_t = 1.0)]
    pub logit_sigma: f64,
    /// Comma-separated clean-label prior (default uniform).
    #[arg(long, value_delimiter = ',')]
    pub class_prior: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub synth: SynthArgs,
    #[command(flatten)]
    pub noise: NoiseArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for probs.csv, clean_labels.csv and noisy_labels.csv.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CalibrateMethod {
    /// Standard CP on the given labels.
    Standard,
    /// Noise-aware threshold; `--with-delta` adds the DKW correction.
    Nacp,
    /// Noise-aware threshold; `--with-delta` adds the ACNL correction.
    Acnl,
    /// Noise-aware threshold; `--with-delta` adds the CRCP correction.
    Crcp,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Probability matrix, n x k.
    #[arg(long)]
    pub probs: PathBuf,
    /// Noisy calibration labels.
    #[arg(long)]
    pub labels: PathBuf,
    #[command(flatten)]
    pub noise: NoiseArgs,
    #[arg(long, value_enum, default_value = "nacp")]
    pub method: CalibrateMethod,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// Confidence parameter of the correction term.
    #[arg(long, default_value_t = 0.001)]
    pub delta: f64,
    /// Calibrate at 1 - alpha + correction.
    #[arg(long)]
    pub with_delta: bool,
    #[command(flatten)]
    pub score: ScoreArgs,
    #[command(flatten)]
    pub search: SearchArgs,
    /// Comma-separated clean-label prior for the ACNL/CRCP corrections.
    #[arg(long, value_delimiter = ',')]
    pub class_prior: Option<Vec<f64>>,
    /// Monte Carlo replications for the ACNL constant.
    #[arg(long, default_value_t = 100_000)]
    pub mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the JSON report here as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub probs: PathBuf,
    /// Threshold given inline.
    #[arg(long, conflicts_with = "report", required_unless_present = "report")]
    pub q: Option<f64>,
    /// Calibration report; its threshold and score settings are used.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub score: ScoreArgs,
    /// Output file (default stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Probability matrix of the pool (otherwise a synthetic pool is generated).
    #[arg(long, requires_all = ["clean_labels", "noisy_labels"], conflicts_with_all = ["k", "n"])]
    pub probs: Option<PathBuf>,
    #[arg(long)]
    pub clean_labels: Option<PathBuf>,
    #[arg(long)]
    pub noisy_labels: Option<PathBuf>,
    /// Synthetic pool: number of classes.
    #[arg(long)]
    pub k: Option<usize>,
    /// Synthetic pool: number of samples.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 3.0)]
    pub signal_mu: f64,
    #[arg(long, default_value_t = 1.0)]
    pub logit_sigma: f64,
    #[command(flatten)]
    pub noise: NoiseArgs,
    /// Comma-separated methods (default: all that apply).
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.001)]
    pub delta: f64,
    #[command(flatten)]
    pub score: ScoreArgs,
    #[command(flatten)]
    pub search: SearchArgs,
    #[arg(long, default_value_t = 1000)]
    pub splits: usize,
    #[arg(long, default_value_t = 0.5)]
    pub split_fraction: f64,
    #[arg(long, default_value_t = 10_000)]
    pub mc_samples: usize,
    /// Comma-separated clean-label prior for the ACNL/CRCP corrections.
    #[arg(long, value_delimiter = ',')]
    pub class_prior: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write one CSV row per split and method here.
    #[arg(long)]
    pub splits_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GuaranteeArgs {
    /// Calibration set sizes (comma-separated for a sweep).
    #[arg(long, value_delimiter = ',', required = true)]
    pub n: Vec<usize>,
    #[arg(long)]
    pub k: usize,
    #[command(flatten)]
    pub noise: NoiseArgs,
    #[arg(long, default_value_t = 0.001)]
    pub delta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// Comma-separated subset of nacp, acnl, crcp (default: all that apply).
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Comma-separated clean-label prior (default uniform).
    #[arg(long, value_delimiter = ',')]
    pub class_prior: Option<Vec<f64>>,
    #[arg(long, default_value_t = 100_000)]
    pub mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
