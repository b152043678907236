//! The inspect subcommand: schema and statistics for checkpoints, plus
//! task-vector geometry when a pretrained base is given.

use std::path::PathBuf;

use clap::Args;
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::error::Result;
use crate::task_vector::{compute_task_vector, cosine_similarity, stats_of, vector_stats};

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Checkpoints to describe.
    #[arg(required = true, value_name = "PATH")]
    paths: Vec<PathBuf>,
    /// Shared pretrained base: adds task-vector stats and the pairwise
    /// cosine-similarity matrix.
    #[arg(long)]
    pretrained: Option<PathBuf>,
}

fn describe(ckpt: &Checkpoint, path: &PathBuf) -> serde_json::Value {
    let tensors: serde_json::Map<String, serde_json::Value> = ckpt
        .tensors()
        .iter()
        .map(|(name, tensor)| {
            let mut entry = json!({
                "dtype": tensor.dtype().name(),
                "shape": tensor.shape(),
                "elements": tensor.element_count(),
            });
            if tensor.dtype().is_float() {
                let stats = stats_of(&tensor.to_f32_vec());
                entry["l2_norm"] = json!(stats.l2_norm);
                entry["max_abs"] = json!(stats.max_abs);
                entry["fraction_zero"] = json!(stats.fraction_zero);
            }
            (name.clone(), entry)
        })
        .collect();
    json!({"path": path, "tensors": tensors})
}

pub fn run(args: InspectArgs) -> Result<()> {
    let ckpts = args
        .paths
        .iter()
        .map(Checkpoint::load)
        .collect::<Result<Vec<_>>>()?;
    let mut out = json!({
        "command": "inspect",
        "checkpoints": args
            .paths
            .iter()
            .zip(&ckpts)
            .map(|(path, ckpt)| describe(ckpt, path))
            .collect::<Vec<_>>(),
    });

    if let Some(pre_path) = &args.pretrained {
        let pre = Checkpoint::load(pre_path)?;
        let tvs = args
            .paths
            .iter()
            .zip(&ckpts)
            .map(|(path, ckpt)| {
                compute_task_vector(ckpt, &pre, path.to_string_lossy().as_ref())
            })
            .collect::<Result<Vec<_>>>()?;
        out["task_vectors"] = tvs
            .iter()
            .zip(&args.paths)
            .map(|(tv, path)| {
                let stats = vector_stats(tv);
                json!({
                    "path": path,
                    "l2_norm": stats.global.l2_norm,
                    "max_abs": stats.global.max_abs,
                    "fraction_zero": stats.global.fraction_zero,
                    "elements": stats.global.element_count,
                })
            })
            .collect::<Vec<_>>()
            .into();
        // cos(τ, τ) is 1 by definition; a zero vector leaves null off the
        // diagonal rather than failing the whole report.
        let matrix: Vec<Vec<Option<f32>>> = (0..tvs.len())
            .map(|i| {
                (0..tvs.len())
                    .map(|j| {
                        if i == j {
                            Some(1.0)
                        } else {
                            cosine_similarity(&tvs[i], &tvs[j]).ok()
                        }
                    })
                    .collect()
            })
            .collect();
        out["cosine_matrix"] = json!(matrix);
    }

    println!("{out}");
    Ok(())
}
