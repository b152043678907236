//! The search subcommand: optimize merging coefficients against an external
//! command or a synthetic suite, then emit the best merged checkpoint.

use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use serde_json::json;

use super::merge::{load_models, merge_loaded};
use super::{Method, MergeArgs, MergeRecipe};
use crate::checkpoint::Checkpoint;
use crate::cma::SearchSpace;
use crate::error::{Error, Result};
use crate::eval::{evaluate_external, gen_synthetic_suite, score_synthetic, ExternalEvaluator, SyntheticSuite};
use crate::search::{grid_candidates, grid_search, search, FitnessReport};

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    merge: MergeArgs,
    /// Shell command scoring a checkpoint; {checkpoint} is replaced by the
    /// model path and the score parsed from its last output line.
    #[arg(long, value_name = "CMD", conflicts_with = "synthetic")]
    eval_cmd: Option<String>,
    /// Self-contained fitness: "n=3,D=512,s=0.1,overlap=0.5[,seed=0]".
    #[arg(long, value_name = "SPEC")]
    synthetic: Option<String>,
    /// Total sample budget for the coefficient search.
    #[arg(long, default_value_t = 500)]
    budget: usize,
    /// Coefficient box "lo:hi" searched per task.
    #[arg(long, default_value = "0.8:2.5", value_name = "LO:HI")]
    range: String,
    /// Grid step for a uniform-lambda sweep instead of the per-task search.
    #[arg(long, value_name = "STEP")]
    grid: Option<f32>,
    /// Where to write the search report (default: <out>.search.json).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Seconds allowed per external evaluation.
    #[arg(long, default_value_t = 600)]
    timeout: u64,
    /// Keep temporary merged checkpoints written for external evaluation.
    #[arg(long)]
    keep_scratch: bool,
}

/// Parsed "n=..,D=..,s=..,overlap=..[,seed=..]" suite description.
fn parse_synthetic(spec: &str, default_seed: u64) -> Result<SyntheticSuite> {
    let mut n = None;
    let mut d = None;
    let mut s = None;
    let mut overlap = 0.0f32;
    let mut seed = default_seed;
    for part in spec.split(',') {
        let Some((key, value)) = part.split_once('=') else {
            return Err(Error::InvalidConfig(format!(
                "synthetic spec entry \"{part}\" is not key=value"
            )));
        };
        let bad = |e: &dyn std::fmt::Display| {
            Error::InvalidConfig(format!("synthetic spec {key}={value}: {e}"))
        };
        match key.trim() {
            "n" => n = Some(value.parse::<usize>().map_err(|e| bad(&e))?),
            "D" | "d" | "dim" => d = Some(value.parse::<usize>().map_err(|e| bad(&e))?),
            "s" | "sparsity" => s = Some(value.parse::<f32>().map_err(|e| bad(&e))?),
            "overlap" | "o" => overlap = value.parse::<f32>().map_err(|e| bad(&e))?,
            "seed" => seed = value.parse::<u64>().map_err(|e| bad(&e))?,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown synthetic spec key \"{other}\""
                )))
            }
        }
    }
    let (Some(n), Some(d), Some(s)) = (n, d, s) else {
        return Err(Error::InvalidConfig(
            "synthetic spec needs n=, D=, and s=".into(),
        ));
    };
    gen_synthetic_suite(n, d, s, overlap, seed)
}

fn parse_range(range: &str) -> Result<(f32, f32)> {
    let Some((lo, hi)) = range.split_once(':') else {
        return Err(Error::InvalidConfig(format!(
            "range \"{range}\" is not lo:hi"
        )));
    };
    let parse = |v: &str| {
        v.trim()
            .parse::<f32>()
            .map_err(|e| Error::InvalidConfig(format!("range bound \"{v}\": {e}")))
    };
    Ok((parse(lo)?, parse(hi)?))
}

/// A recipe with one search point's coefficients substituted in.
fn recipe_with(recipe: &MergeRecipe, params: &[f32]) -> MergeRecipe {
    MergeRecipe {
        per_task_lambdas: Some(params.to_vec()),
        ..recipe.clone()
    }
}

enum FitnessSource {
    Synthetic(SyntheticSuite),
    External(ExternalEvaluator, bool),
}

impl FitnessSource {
    /// Higher is better: negated mean loss for synthetic suites, the parsed
    /// score for external commands.
    fn evaluate(
        &self,
        recipe: &MergeRecipe,
        pretrained: Option<&Checkpoint>,
        models: &[Checkpoint],
        counter: &mut u64,
    ) -> Result<f32> {
        let (merged, _) = merge_loaded(recipe, pretrained, models, false)?;
        match self {
            FitnessSource::Synthetic(suite) => {
                let (_, mean) = score_synthetic(suite, &merged)?;
                Ok(-mean)
            }
            FitnessSource::External(ev, keep) => {
                let path = super::scratch_dir().join(format!(
                    "pcbmerge-{}-{counter:06}.safetensors",
                    std::process::id()
                ));
                *counter += 1;
                merged.save(&path)?;
                let score = evaluate_external(ev, &path);
                if !keep {
                    let _ = std::fs::remove_file(&path);
                }
                score
            }
        }
    }
}

pub fn run(args: SearchArgs) -> Result<()> {
    let started = Instant::now();
    let grid_step = args.grid;
    let budget = args.budget;
    let (lo, hi) = parse_range(&args.range)?;
    let recipe = args.merge.into_recipe()?;
    if recipe.method == Method::Average {
        return Err(Error::InvalidConfig(
            "search needs per-model coefficients; --method average has none".into(),
        ));
    }

    let source = match (&args.eval_cmd, &args.synthetic) {
        (Some(cmd), None) => {
            let ev = ExternalEvaluator {
                command_template: cmd.clone(),
                timeout_seconds: args.timeout,
                working_dir: None,
            };
            ev.validate()?;
            FitnessSource::External(ev, args.keep_scratch)
        }
        (None, Some(spec)) => FitnessSource::Synthetic(parse_synthetic(spec, recipe.seed)?),
        _ => {
            return Err(Error::InvalidConfig(
                "exactly one of --eval-cmd or --synthetic is required".into(),
            ))
        }
    };

    // Synthetic mode scores against the suite's own models so the search
    // needs no checkpoint files on disk.
    let (pretrained, models): (Option<Checkpoint>, Vec<Checkpoint>) = match &source {
        FitnessSource::Synthetic(suite) => {
            recipe.validate_params()?;
            (Some(suite.pretrained.clone()), suite.task_checkpoints.clone())
        }
        FitnessSource::External(..) => {
            recipe.validate()?;
            load_models(&recipe)?
        }
    };
    if let Some(lams) = &recipe.per_task_lambdas {
        if lams.len() != models.len() {
            return Err(Error::LengthMismatch(format!(
                "{} per-task lambdas for {} models",
                lams.len(),
                models.len()
            )));
        }
    }

    let dim = models.len();
    let mut counter = 0u64;
    let mut fitness = |params: &[f32]| -> Result<f32> {
        source.evaluate(
            &recipe_with(&recipe, params),
            pretrained.as_ref(),
            &models,
            &mut counter,
        )
    };

    let (mode, report): (&str, FitnessReport) = match grid_step {
        Some(step) => {
            let candidates = grid_candidates(lo, hi, step)?;
            ("grid", grid_search(&candidates, dim, &mut fitness)?)
        }
        None => {
            let space = SearchSpace::with_bounds(dim, lo, hi)?;
            ("cma-es", search(&space, &mut fitness, budget, recipe.seed)?)
        }
    };

    // Rebuild and save the winner.
    let best_recipe = recipe_with(&recipe, &report.best_params);
    let (merged, _) = merge_loaded(&best_recipe, pretrained.as_ref(), &models, false)?;
    merged.save(&best_recipe.out)?;

    let report_path = args
        .report
        .unwrap_or_else(|| best_recipe.out.with_extension("search.json"));
    let full = json!({
        "command": "search",
        "mode": mode,
        "best_params": report.best_params,
        "best_fitness": report.best_fitness,
        "evaluations_used": report.evaluations_used,
        "history": report.history,
        "config": best_recipe,
    });
    std::fs::write(&report_path, format!("{full:#}\n")).map_err(|source| Error::Io {
        path: report_path.clone(),
        source,
    })?;

    let summary = json!({
        "command": "search",
        "mode": mode,
        "best_params": report.best_params,
        "best_fitness": report.best_fitness,
        "evaluations_used": report.evaluations_used,
        "out": best_recipe.out,
        "report": report_path,
        "wall_ms": started.elapsed().as_millis() as u64,
        "config": best_recipe,
    });
    println!("{summary}");
    Ok(())
}
