//! The merge subcommand: load checkpoints, run one merging method, save the
//! result, and print a JSON summary.

use std::collections::BTreeMap;
use std::time::Instant;

use serde_json::json;

use super::{Method, MergeArgs, MergeRecipe};
use crate::baselines::{
    average_merge, dare_preprocess, task_arithmetic_merge, ties_merge, trim_keep_count, TiesConfig,
};
use crate::checkpoint::Checkpoint;
use crate::error::Result;
use crate::pcb::{mask_keep_count, pcb_merge_with_report, Granularity, MergeReport, PcbConfig};
use crate::task_vector::{compute_task_vector, TaskVector};

pub fn run(args: MergeArgs) -> Result<()> {
    let recipe = args.into_recipe()?;
    recipe.validate()?;
    let started = Instant::now();
    let (merged, kept, report) = execute(&recipe)?;
    merged.save(&recipe.out)?;

    if recipe.dump_scores {
        if let Some(report) = &report {
            for unit in &report.units {
                eprintln!("{}", serde_json::to_string(unit).expect("serializable"));
            }
        }
    }

    let summary = json!({
        "command": "merge",
        "method": recipe.method.name(),
        "out": recipe.out,
        "tensors": merged.len(),
        "kept_fraction": kept,
        "wall_ms": started.elapsed().as_millis() as u64,
        "config": recipe,
    });
    println!("{summary}");
    Ok(())
}

/// Task vectors for the recipe's models, with optional drop-and-rescale
/// preprocessing and per-task coefficient scaling applied.
pub fn prepared_task_vectors(
    recipe: &MergeRecipe,
    pretrained: &Checkpoint,
    models: &[Checkpoint],
    scale_per_task: bool,
) -> Result<Vec<TaskVector>> {
    let mut tvs = Vec::with_capacity(models.len());
    for (i, model) in models.iter().enumerate() {
        let mut tv = compute_task_vector(model, pretrained, &format!("task{i}"))?;
        if let Some(cfg) = &recipe.dare {
            tv = dare_preprocess(&tv, cfg)?;
        }
        if scale_per_task {
            if let Some(lams) = &recipe.per_task_lambdas {
                tv = tv.scale(lams[i]);
            }
        }
        tvs.push(tv);
    }
    Ok(tvs)
}

pub fn load_models(recipe: &MergeRecipe) -> Result<(Option<Checkpoint>, Vec<Checkpoint>)> {
    let pretrained = recipe
        .pretrained
        .as_ref()
        .map(Checkpoint::load)
        .transpose()?;
    let models = recipe
        .models
        .iter()
        .map(Checkpoint::load)
        .collect::<Result<Vec<_>>>()?;
    Ok((pretrained, models))
}

pub fn pcb_config(recipe: &MergeRecipe) -> PcbConfig {
    PcbConfig {
        lambda: recipe.lambda,
        per_task_lambdas: recipe.per_task_lambdas.clone(),
        mask_ratio: recipe.ratio,
        granularity: recipe.granularity,
        regulator_n: recipe.regulator_n,
        enable_intra: recipe.enable_intra,
        enable_inter: recipe.enable_inter,
        enable_drop: recipe.enable_drop,
        enable_rescale: recipe.enable_rescale,
        inter_norm: recipe.inter_norm,
        seed: recipe.seed,
    }
}

/// Runs the recipe against loaded checkpoints; used by merge and reused by
/// search fitness evaluation.
pub fn merge_loaded(
    recipe: &MergeRecipe,
    pretrained: Option<&Checkpoint>,
    models: &[Checkpoint],
    collect_report: bool,
) -> Result<(Checkpoint, Option<MergeReport>)> {
    match recipe.method {
        Method::Average => {
            let refs: Vec<&Checkpoint> = models.iter().collect();
            Ok((average_merge(&refs)?, None))
        }
        Method::TaskArithmetic => {
            let pre = pretrained.expect("validated");
            let tvs = prepared_task_vectors(recipe, pre, models, true)?;
            Ok((task_arithmetic_merge(pre, &tvs, recipe.lambda)?, None))
        }
        Method::Ties => {
            let pre = pretrained.expect("validated");
            let tvs = prepared_task_vectors(recipe, pre, models, true)?;
            let cfg = TiesConfig {
                trim_keep_fraction: recipe.trim,
                lambda: recipe.lambda,
                granularity: recipe.granularity,
            };
            Ok((ties_merge(pre, &tvs, &cfg)?, None))
        }
        Method::Pcb => {
            let pre = pretrained.expect("validated");
            if recipe.dare.is_some() {
                // Preprocessed deltas replace the raw fine-tuned weights.
                let tvs = prepared_task_vectors(recipe, pre, models, false)?;
                let rebuilt = tvs
                    .iter()
                    .map(|tv| crate::task_vector::apply_delta(pre, tv, 1.0))
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&Checkpoint> = rebuilt.iter().collect();
                let (merged, report) =
                    pcb_merge_with_report(pre, &refs, &pcb_config(recipe), collect_report)?;
                Ok((merged, Some(report)))
            } else {
                let refs: Vec<&Checkpoint> = models.iter().collect();
                let (merged, report) =
                    pcb_merge_with_report(pre, &refs, &pcb_config(recipe), collect_report)?;
                Ok((merged, Some(report)))
            }
        }
    }
}

fn execute(
    recipe: &MergeRecipe,
) -> Result<(Checkpoint, BTreeMap<String, f32>, Option<MergeReport>)> {
    let (pretrained, models) = load_models(recipe)?;
    let (merged, report) = merge_loaded(recipe, pretrained.as_ref(), &models, recipe.dump_scores)?;
    let kept = kept_fractions(recipe, &merged);
    Ok((merged, kept, report))
}

/// Per-tensor kept fraction for the masking methods; empty otherwise.
fn kept_fractions(recipe: &MergeRecipe, merged: &Checkpoint) -> BTreeMap<String, f32> {
    let fraction = |d: usize| -> Option<f32> {
        if d == 0 {
            return None;
        }
        match recipe.method {
            Method::Pcb if recipe.enable_drop => {
                Some(mask_keep_count(d, recipe.ratio) as f32 / d as f32)
            }
            Method::Ties => Some(trim_keep_count(d, recipe.trim) as f32 / d as f32),
            _ => None,
        }
    };
    match recipe.granularity {
        Granularity::PerTensor => merged
            .tensors()
            .iter()
            .filter(|(_, t)| t.dtype().is_float())
            .filter_map(|(name, t)| fraction(t.element_count()).map(|f| (name.clone(), f)))
            .collect(),
        Granularity::Global => {
            let total: usize = merged
                .tensors()
                .values()
                .filter(|t| t.dtype().is_float())
                .map(|t| t.element_count())
                .sum();
            fraction(total)
                .map(|f| BTreeMap::from([("*".to_string(), f)]))
                .unwrap_or_default()
        }
    }
}
