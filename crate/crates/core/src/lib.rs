//! Merge fine-tuned model checkpoints into one multi-task checkpoint.
//!
//! The core method scores every parameter delta by how much it matters to its
//! own task (intra-balancing) and how much it agrees with the other tasks at
//! the same coordinate (inter-balancing), drops the lowest-scoring entries,
//! and fuses the survivors with score-weighted means. Classic baselines
//! (weight averaging, task arithmetic, TIES, DARE preprocessing) and a
//! derivative-free coefficient search (grid and CMA-ES) round out the
//! toolkit.
//!
//! Module map:
//! - [`checkpoint`]: tensor container and the on-disk format
//! - [`task_vector`]: deltas against a shared pretrained checkpoint
//! - [`pcb`]: competition-balancing scores, masking, and the fused merge
//! - [`baselines`]: averaging, task arithmetic, TIES, DARE
//! - [`cma`]: CMA-ES optimizer core
//! - [`search`]: grid search and budgeted CMA-ES search loop
//! - [`eval`]: external-command scoring and the synthetic benchmark suite
//! - [`cli`]: the `pcbmerge` command-line interface

pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod cma;
pub mod error;
pub mod eval;
pub mod pcb;
pub mod search;
pub mod task_vector;

pub use checkpoint::{Checkpoint, Dtype, Tensor};
pub use error::{Error, Result};
pub use pcb::{pcb_merge, Granularity, PcbConfig};
pub use task_vector::{compute_task_vector, validate_compatibility, TaskVector, TensorSchema};
