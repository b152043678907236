//! Command-line surface: merge, search, bench, inspect.
//!
//! Summaries are JSON on standard output; human diagnostics go to standard
//! error. Failures print `{"error":{"kind":...,"message":...}}` on standard
//! error and exit 2 (validation), 3 (I/O or file format), or 4 (fitness
//! evaluation). Configuration precedence is flags, then an optional JSON
//! config file, then built-in defaults; every summary echoes the effective
//! configuration it ran with.

mod bench;
mod inspect;
mod merge;
mod search;

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::baselines::DareConfig;
use crate::error::{Error, Result};
use crate::pcb::Granularity;

#[derive(Debug, Parser)]
#[command(
    name = "pcbmerge",
    version,
    about = "Merge fine-tuned checkpoints by balancing parameter competition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Merge checkpoints into one model file.
    Merge(MergeArgs),
    /// Search merging coefficients against a fitness source.
    Search(search::SearchArgs),
    /// Score merging methods on seeded synthetic suites.
    Bench(bench::BenchArgs),
    /// Describe checkpoints and their task vectors.
    Inspect(inspect::InspectArgs),
}

/// Merging method selector shared by merge, search, and bench.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Average,
    TaskArithmetic,
    Ties,
    Pcb,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Average => "average",
            Method::TaskArithmetic => "task-arithmetic",
            Method::Ties => "ties",
            Method::Pcb => "pcb",
        }
    }
}

fn parse_granularity(s: &str) -> std::result::Result<Granularity, String> {
    Granularity::from_str(s).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// Merging method (default pcb).
    #[arg(long, value_enum)]
    method: Option<Method>,
    /// Shared pretrained checkpoint (required except for --method average).
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Fine-tuned checkpoints to merge.
    #[arg(long, num_args = 1.., value_name = "PATH")]
    models: Vec<PathBuf>,
    /// Output path for the merged checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scale on the fused delta (default 1).
    #[arg(long)]
    lambda: Option<f32>,
    /// Per-task coefficients, comma-separated, one per model.
    #[arg(long, value_delimiter = ',', value_name = "L1,L2,..")]
    per_task_lambdas: Option<Vec<f32>>,
    /// Kept fraction r per unit for the competition mask (default 0.2).
    #[arg(long)]
    ratio: Option<f32>,
    /// Trim keep fraction k for --method ties (defaults to --ratio).
    #[arg(long)]
    trim: Option<f32>,
    /// Score/mask unit: per-tensor or global.
    #[arg(long, value_parser = parse_granularity)]
    granularity: Option<Granularity>,
    /// Override the intra-balance softmax regulator N.
    #[arg(long)]
    regulator_n: Option<u32>,
    /// Disable intra-balancing scores.
    #[arg(long)]
    no_intra: bool,
    /// Disable inter-balancing scores.
    #[arg(long)]
    no_inter: bool,
    /// Disable the low-score drop mask.
    #[arg(long)]
    no_drop: bool,
    /// Disable score-weighted rescaling (falls back to a sign-elected mean).
    #[arg(long)]
    no_rescale: bool,
    /// Skip normalization inside the inter-balance softmax.
    #[arg(long)]
    no_inter_norm: bool,
    /// Drop rate for random drop-and-rescale preprocessing of task vectors.
    #[arg(long, value_name = "P")]
    dare: Option<f32>,
    /// Seed for --dare (default: --seed).
    #[arg(long)]
    dare_seed: Option<u64>,
    /// Base seed for seeded steps.
    #[arg(long)]
    seed: Option<u64>,
    /// Write per-unit score statistics to standard error as JSON lines.
    #[arg(long)]
    dump_scores: bool,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Effective merge configuration after applying precedence.
#[derive(Debug, Clone, Serialize)]
pub struct MergeRecipe {
    pub method: Method,
    pub pretrained: Option<PathBuf>,
    pub models: Vec<PathBuf>,
    pub out: PathBuf,
    pub lambda: f32,
    pub per_task_lambdas: Option<Vec<f32>>,
    pub ratio: f32,
    pub trim: f32,
    pub granularity: Granularity,
    pub regulator_n: Option<u32>,
    pub enable_intra: bool,
    pub enable_inter: bool,
    pub enable_drop: bool,
    pub enable_rescale: bool,
    pub inter_norm: bool,
    pub dare: Option<DareConfig>,
    pub seed: u64,
    pub dump_scores: bool,
}

/// Config-file counterpart of [`MergeArgs`]: every field optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    method: Option<Method>,
    pretrained: Option<PathBuf>,
    models: Option<Vec<PathBuf>>,
    out: Option<PathBuf>,
    lambda: Option<f32>,
    per_task_lambdas: Option<Vec<f32>>,
    ratio: Option<f32>,
    trim: Option<f32>,
    granularity: Option<Granularity>,
    regulator_n: Option<u32>,
    enable_intra: Option<bool>,
    enable_inter: Option<bool>,
    enable_drop: Option<bool>,
    enable_rescale: Option<bool>,
    inter_norm: Option<bool>,
    dare: Option<f32>,
    dare_seed: Option<u64>,
    seed: Option<u64>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("config {}: {e}", path.display())))
}

impl MergeArgs {
    /// Resolves flags > config file > defaults into a validated recipe.
    pub fn into_recipe(self) -> Result<MergeRecipe> {
        let file = load_file_config(self.config.as_deref())?;
        let method = self.method.or(file.method).unwrap_or(Method::Pcb);
        let models = if self.models.is_empty() {
            file.models.unwrap_or_default()
        } else {
            self.models
        };
        let ratio = self.ratio.or(file.ratio).unwrap_or(0.2);
        let trim = self.trim.or(file.trim).unwrap_or(ratio);
        let seed = self.seed.or(file.seed).unwrap_or(0);
        let dare = self
            .dare
            .or(file.dare)
            .map(|drop_rate| DareConfig {
                drop_rate,
                seed: self.dare_seed.or(file.dare_seed).unwrap_or(seed),
            });
        let recipe = MergeRecipe {
            method,
            pretrained: self.pretrained.or(file.pretrained),
            out: self.out.or(file.out).unwrap_or_else(|| "merged.safetensors".into()),
            lambda: self.lambda.or(file.lambda).unwrap_or(1.0),
            per_task_lambdas: self.per_task_lambdas.or(file.per_task_lambdas),
            ratio,
            trim,
            granularity: self
                .granularity
                .or(file.granularity)
                .unwrap_or(Granularity::PerTensor),
            regulator_n: self.regulator_n.or(file.regulator_n),
            enable_intra: !self.no_intra && file.enable_intra.unwrap_or(true),
            enable_inter: !self.no_inter && file.enable_inter.unwrap_or(true),
            enable_drop: !self.no_drop && file.enable_drop.unwrap_or(true),
            enable_rescale: !self.no_rescale && file.enable_rescale.unwrap_or(true),
            inter_norm: !self.no_inter_norm && file.inter_norm.unwrap_or(true),
            dare,
            seed,
            dump_scores: self.dump_scores,
            models,
        };
        Ok(recipe)
    }
}

impl MergeRecipe {
    /// Method-specific parameter checks, run before any file I/O.
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::InvalidConfig("no --models given".into()));
        }
        if self.method != Method::Average && self.pretrained.is_none() {
            return Err(Error::InvalidConfig(format!(
                "--method {} requires --pretrained",
                self.method.name()
            )));
        }
        if let Some(lams) = &self.per_task_lambdas {
            if lams.len() != self.models.len() {
                return Err(Error::LengthMismatch(format!(
                    "{} per-task lambdas for {} models",
                    lams.len(),
                    self.models.len()
                )));
            }
        }
        self.validate_params()
    }

    /// Parameter checks alone, for modes that supply models in memory.
    pub fn validate_params(&self) -> Result<()> {
        if self.method == Method::Average {
            if self.dare.is_some() {
                return Err(Error::InvalidConfig(
                    "--dare needs task vectors; --method average has none".into(),
                ));
            }
            if self.per_task_lambdas.is_some() {
                return Err(Error::InvalidConfig(
                    "--per-task-lambdas does not apply to --method average".into(),
                ));
            }
        }
        if !self.lambda.is_finite() {
            return Err(Error::InvalidConfig("lambda must be finite".into()));
        }
        if self.method == Method::Pcb && !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "mask ratio must lie in (0, 1], got {}",
                self.ratio
            )));
        }
        if self.method == Method::Ties && !(self.trim > 0.0 && self.trim <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "trim keep fraction must lie in (0, 1], got {}",
                self.trim
            )));
        }
        if let Some(cfg) = &self.dare {
            cfg.validate()?;
        }
        Ok(())
    }
}

/// Scratch directory for temporary merged checkpoints.
pub fn scratch_dir() -> PathBuf {
    std::env::var_os("PCBMERGE_SCRATCH")
        .map(PathBuf::from)
        .unwrap_or_else(std::env::temp_dir)
}

fn print_error(err: &Error) {
    let payload = serde_json::json!({
        "error": {"kind": err.kind(), "message": err.to_string()}
    });
    eprintln!("{payload}");
}

/// Parses arguments, dispatches, and returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Clap prints its own usage message; --help and --version land
            // here too and exit 0.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Merge(args) => merge::run(args),
        Command::Search(args) => search::run(args),
        Command::Bench(args) => bench::run(args),
        Command::Inspect(args) => inspect::run(args),
    };
    match result {
        Ok(()) => 0,
        Err(err) => {
            print_error(&err);
            err.exit_code()
        }
    }
}
