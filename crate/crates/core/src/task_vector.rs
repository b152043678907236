//! Task vectors: per-tensor deltas τ = θ_ft − θ_pre over a shared schema.
//!
//! All delta arithmetic runs in f32 regardless of storage dtype; half and
//! double precision tensors are converted on the way in and rounded back to
//! the pretrained checkpoint's dtype on the way out. Only floating-point
//! tensors are mergeable — integer and bool buffers carry no meaningful
//! arithmetic mean and are copied from the pretrained checkpoint verbatim.

use std::collections::BTreeMap;

use crate::checkpoint::{Checkpoint, Dtype, Tensor};
use crate::error::{Error, Result};

/// Threshold below which an element counts as zero in statistics.
pub const ZERO_EPS: f32 = 1e-12;

/// Per-tensor schema entry shared by a set of compatible checkpoints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaEntry {
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub mergeable: bool,
}

/// The schema common to a list of checkpoints, in lexicographic name order.
#[derive(Debug, Clone, Default)]
pub struct TensorSchema {
    entries: BTreeMap<String, SchemaEntry>,
    /// Tensors dropped under the skip-missing policy, with the reason.
    pub warnings: Vec<String>,
}

impl TensorSchema {
    pub fn entries(&self) -> &BTreeMap<String, SchemaEntry> {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&SchemaEntry> {
        self.entries.get(name)
    }

    pub fn mergeable_names(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|(_, e)| e.mergeable)
            .map(|(n, _)| n.as_str())
    }

    pub fn mergeable_element_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.mergeable)
            .map(|e| e.shape.iter().product::<usize>())
            .sum()
    }
}

/// Computes the schema shared by all checkpoints.
///
/// The name set is the union over all inputs. A tensor missing from any
/// checkpoint is an error, unless `skip_missing` is set, in which case it is
/// dropped from the schema and a warning is recorded. Shape or dtype
/// disagreement on a shared name is always an error.
pub fn validate_compatibility(ckpts: &[&Checkpoint], skip_missing: bool) -> Result<TensorSchema> {
    if ckpts.is_empty() {
        return Err(Error::InvalidConfig(
            "need at least one checkpoint to validate".into(),
        ));
    }
    let mut names: Vec<&str> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for ckpt in ckpts {
        for name in ckpt.tensors().keys() {
            if seen.insert(name.as_str()) {
                names.push(name);
            }
        }
    }

    let mut schema = TensorSchema::default();
    'names: for name in names {
        let mut reference: Option<(&Tensor, usize)> = None;
        for (index, ckpt) in ckpts.iter().enumerate() {
            let Some(tensor) = ckpt.get(name) else {
                if skip_missing {
                    schema.warnings.push(format!(
                        "tensor \"{name}\" missing from checkpoint {index}; dropped"
                    ));
                    continue 'names;
                }
                return Err(Error::MissingTensor {
                    name: name.to_string(),
                    index,
                });
            };
            match reference {
                None => reference = Some((tensor, index)),
                Some((first, _)) => {
                    if first.shape() != tensor.shape() {
                        return Err(Error::ShapeMismatch {
                            name: name.to_string(),
                            expected: first.shape().to_vec(),
                            actual: tensor.shape().to_vec(),
                        });
                    }
                    if first.dtype() != tensor.dtype() {
                        return Err(Error::DtypeMismatch {
                            name: name.to_string(),
                            expected: first.dtype().to_string(),
                            actual: tensor.dtype().to_string(),
                        });
                    }
                }
            }
        }
        let (tensor, _) = reference.expect("non-empty checkpoint list");
        schema.entries.insert(
            name.to_string(),
            SchemaEntry {
                shape: tensor.shape().to_vec(),
                dtype: tensor.dtype(),
                mergeable: tensor.dtype().is_float(),
            },
        );
    }
    Ok(schema)
}

/// One task's delta against the pretrained checkpoint: exactly the mergeable
/// schema entries, as f32 vectors.
#[derive(Debug, Clone)]
pub struct TaskVector {
    pub label: String,
    schema: TensorSchema,
    deltas: BTreeMap<String, Vec<f32>>,
}

impl TaskVector {
    /// Builds a task vector from raw per-tensor deltas. The map must cover
    /// exactly the mergeable schema entries with matching element counts.
    pub fn from_deltas(
        label: impl Into<String>,
        schema: TensorSchema,
        deltas: BTreeMap<String, Vec<f32>>,
    ) -> Result<Self> {
        for (name, entry) in schema.entries() {
            if !entry.mergeable {
                continue;
            }
            let count: usize = entry.shape.iter().product();
            match deltas.get(name) {
                Some(d) if d.len() == count => {}
                Some(d) => {
                    return Err(Error::LengthMismatch(format!(
                        "delta \"{name}\" has {} elements, schema shape {:?} needs {count}",
                        d.len(),
                        entry.shape
                    )))
                }
                None => {
                    return Err(Error::SchemaMismatch(format!(
                        "delta for mergeable tensor \"{name}\" missing"
                    )))
                }
            }
        }
        for name in deltas.keys() {
            match schema.get(name) {
                Some(e) if e.mergeable => {}
                _ => {
                    return Err(Error::SchemaMismatch(format!(
                        "delta \"{name}\" has no mergeable schema entry"
                    )))
                }
            }
        }
        Ok(TaskVector {
            label: label.into(),
            schema,
            deltas,
        })
    }

    pub fn schema(&self) -> &TensorSchema {
        &self.schema
    }

    /// Deltas in lexicographic name order.
    pub fn deltas(&self) -> &BTreeMap<String, Vec<f32>> {
        &self.deltas
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.deltas.get(name).map(Vec::as_slice)
    }

    pub fn element_count(&self) -> usize {
        self.deltas.values().map(Vec::len).sum()
    }

    /// Element-wise scaling, τ ↦ s·τ.
    pub fn scale(&self, s: f32) -> TaskVector {
        let deltas = self
            .deltas
            .iter()
            .map(|(n, d)| (n.clone(), d.iter().map(|x| x * s).collect()))
            .collect();
        TaskVector {
            label: self.label.clone(),
            schema: self.schema.clone(),
            deltas,
        }
    }

    /// Element-wise sum; both vectors must share a schema.
    pub fn add(&self, other: &TaskVector) -> Result<TaskVector> {
        check_same_layout(self, other)?;
        let deltas = self
            .deltas
            .iter()
            .map(|(n, d)| {
                let o = &other.deltas[n];
                (
                    n.clone(),
                    d.iter().zip(o).map(|(a, b)| a + b).collect::<Vec<f32>>(),
                )
            })
            .collect();
        Ok(TaskVector {
            label: self.label.clone(),
            schema: self.schema.clone(),
            deltas,
        })
    }
}

fn check_same_layout(a: &TaskVector, b: &TaskVector) -> Result<()> {
    if a.deltas.len() != b.deltas.len()
        || a.deltas
            .iter()
            .zip(b.deltas.iter())
            .any(|((an, ad), (bn, bd))| an != bn || ad.len() != bd.len())
    {
        return Err(Error::SchemaMismatch(format!(
            "task vectors \"{}\" and \"{}\" cover different tensors",
            a.label, b.label
        )));
    }
    Ok(())
}

/// τ = θ_ft − θ_pre over the shared schema's mergeable tensors.
pub fn compute_task_vector(
    finetuned: &Checkpoint,
    pretrained: &Checkpoint,
    label: impl Into<String>,
) -> Result<TaskVector> {
    let schema = validate_compatibility(&[pretrained, finetuned], false)?;
    let mut deltas = BTreeMap::new();
    for (name, entry) in schema.entries() {
        if !entry.mergeable {
            continue;
        }
        let ft = finetuned.get(name).expect("validated").to_f32_vec();
        let pre = pretrained.get(name).expect("validated").to_f32_vec();
        let delta: Vec<f32> = ft.iter().zip(&pre).map(|(f, p)| f - p).collect();
        deltas.insert(name.clone(), delta);
    }
    TaskVector::from_deltas(label, schema, deltas)
}

/// θ_pre + λ·δ on mergeable tensors (f32 arithmetic, output in the
/// pretrained dtype); non-mergeable tensors are copied from the pretrained.
pub fn apply_delta(pretrained: &Checkpoint, delta: &TaskVector, lambda: f32) -> Result<Checkpoint> {
    let mut out = Checkpoint::new();
    for (name, tensor) in pretrained.tensors() {
        let merged = match delta.get(name) {
            Some(d) if tensor.dtype().is_float() => {
                if d.len() != tensor.element_count() {
                    return Err(Error::ShapeMismatch {
                        name: name.clone(),
                        expected: tensor.shape().to_vec(),
                        actual: vec![d.len()],
                    });
                }
                let base = tensor.to_f32_vec();
                let values: Vec<f32> = base
                    .iter()
                    .zip(d)
                    .map(|(p, dv)| p + lambda * dv)
                    .collect();
                Tensor::from_f32_vec(tensor.dtype(), tensor.shape().to_vec(), &values)?
            }
            _ => tensor.clone(),
        };
        out.insert(name.clone(), merged)?;
    }
    for name in delta.deltas().keys() {
        if pretrained.get(name).is_none() {
            return Err(Error::SchemaMismatch(format!(
                "delta tensor \"{name}\" not present in the pretrained checkpoint"
            )));
        }
    }
    Ok(out)
}

/// L2 norm, max |x|, zero fraction, and element count.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct StatsEntry {
    pub l2_norm: f32,
    pub max_abs: f32,
    pub fraction_zero: f32,
    pub element_count: usize,
}

/// Global and per-tensor statistics of a task vector. Global values treat
/// the whole vector as one flat concatenation.
#[derive(Debug, Clone, serde::Serialize)]
pub struct VectorStats {
    pub global: StatsEntry,
    pub per_tensor: BTreeMap<String, StatsEntry>,
}

pub(crate) fn stats_of(values: &[f32]) -> StatsEntry {
    let mut sum_sq = 0.0f64;
    let mut max_abs = 0.0f32;
    let mut zeros = 0usize;
    for &v in values {
        sum_sq += (v as f64) * (v as f64);
        max_abs = max_abs.max(v.abs());
        if v.abs() < ZERO_EPS {
            zeros += 1;
        }
    }
    StatsEntry {
        l2_norm: sum_sq.sqrt() as f32,
        max_abs,
        fraction_zero: if values.is_empty() {
            0.0
        } else {
            zeros as f32 / values.len() as f32
        },
        element_count: values.len(),
    }
}

pub fn vector_stats(tv: &TaskVector) -> VectorStats {
    let mut per_tensor = BTreeMap::new();
    let mut sum_sq = 0.0f64;
    let mut max_abs = 0.0f32;
    let mut zeros = 0usize;
    let mut count = 0usize;
    for (name, values) in tv.deltas() {
        let entry = stats_of(values);
        sum_sq += (entry.l2_norm as f64) * (entry.l2_norm as f64);
        max_abs = max_abs.max(entry.max_abs);
        zeros += (entry.fraction_zero * entry.element_count as f32).round() as usize;
        count += entry.element_count;
        per_tensor.insert(name.clone(), entry);
    }
    VectorStats {
        global: StatsEntry {
            l2_norm: sum_sq.sqrt() as f32,
            max_abs,
            fraction_zero: if count == 0 { 0.0 } else { zeros as f32 / count as f32 },
            element_count: count,
        },
        per_tensor,
    }
}

/// ⟨a,b⟩ / (‖a‖·‖b‖) over the concatenation of all mergeable elements.
pub fn cosine_similarity(a: &TaskVector, b: &TaskVector) -> Result<f32> {
    check_same_layout(a, b)?;
    let mut dot = 0.0f64;
    let mut norm_a = 0.0f64;
    let mut norm_b = 0.0f64;
    for (name, av) in a.deltas() {
        let bv = &b.deltas()[name];
        for (&x, &y) in av.iter().zip(bv) {
            dot += x as f64 * y as f64;
            norm_a += x as f64 * x as f64;
            norm_b += y as f64 * y as f64;
        }
    }
    if norm_a == 0.0 || norm_b == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot / (norm_a.sqrt() * norm_b.sqrt())).clamp(-1.0, 1.0) as f32)
}
