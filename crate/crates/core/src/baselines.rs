//! Reference merging methods: weight averaging, task arithmetic,
//! trim/elect/disjoint-mean merging, and random drop-and-rescale
//! preprocessing of task vectors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Tensor};
use crate::error::{Error, Result};
use crate::pcb::{map_units, Granularity};
use crate::task_vector::{apply_delta, validate_compatibility, TaskVector};

/// Trim/elect/disjoint-mean merge hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TiesConfig {
    /// Fraction k of each unit kept by the magnitude trim.
    pub trim_keep_fraction: f32,
    /// Scale applied to the fused delta in θ_m = θ_pre + λ·τ_m.
    pub lambda: f32,
    pub granularity: Granularity,
}

impl Default for TiesConfig {
    fn default() -> Self {
        TiesConfig {
            trim_keep_fraction: 0.2,
            lambda: 1.0,
            granularity: Granularity::PerTensor,
        }
    }
}

impl TiesConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.trim_keep_fraction > 0.0 && self.trim_keep_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "trim keep fraction must lie in (0, 1], got {}",
                self.trim_keep_fraction
            )));
        }
        if !self.lambda.is_finite() {
            return Err(Error::InvalidConfig("lambda must be finite".into()));
        }
        Ok(())
    }
}

/// Random drop-and-rescale preprocessing parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DareConfig {
    /// Probability p of zeroing each element; survivors scale by 1/(1−p).
    pub drop_rate: f32,
    pub seed: u64,
}

impl DareConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.drop_rate >= 0.0 && self.drop_rate < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "drop rate must lie in [0, 1), got {}",
                self.drop_rate
            )));
        }
        Ok(())
    }
}

/// Element-wise mean of the checkpoints. Non-float tensors carry the first
/// checkpoint's values.
pub fn average_merge(ckpts: &[&Checkpoint]) -> Result<Checkpoint> {
    if ckpts.is_empty() {
        return Err(Error::InvalidConfig(
            "need at least one checkpoint to average".into(),
        ));
    }
    let schema = validate_compatibility(ckpts, false)?;
    let mut out = Checkpoint::new();
    for (name, entry) in schema.entries() {
        let first = ckpts[0].get(name).expect("validated");
        if !entry.mergeable {
            out.insert(name.clone(), first.clone())?;
            continue;
        }
        let mut acc: Vec<f64> = first.to_f32_vec().iter().map(|v| *v as f64).collect();
        for ckpt in &ckpts[1..] {
            for (a, v) in acc.iter_mut().zip(ckpt.get(name).expect("validated").to_f32_vec()) {
                *a += v as f64;
            }
        }
        let n = ckpts.len() as f64;
        let mean: Vec<f32> = acc.iter().map(|a| (a / n) as f32).collect();
        out.insert(
            name.clone(),
            Tensor::from_f32_vec(first.dtype(), first.shape().to_vec(), &mean)?,
        )?;
    }
    Ok(out)
}

/// θ_pre + λ·Στ_i element-wise. An empty task list returns the pretrained
/// checkpoint unchanged.
pub fn task_arithmetic_merge(
    pretrained: &Checkpoint,
    tvs: &[TaskVector],
    lambda: f32,
) -> Result<Checkpoint> {
    let Some((first, rest)) = tvs.split_first() else {
        return Ok(pretrained.clone());
    };
    let mut total = first.clone();
    for tv in rest {
        total = total.add(tv)?;
    }
    apply_delta(pretrained, &total, lambda)
}

/// Number of kept coordinates for a trim over `d` elements: ⌈k·D⌉.
pub fn trim_keep_count(d: usize, keep_fraction: f32) -> usize {
    // Same decimal snapping as the drop mask, but guarding the ceiling:
    // 0.2f32·10 evaluates to 2.0000000298 and must still ceil to 2.
    let k = (keep_fraction as f64 * 1e6).round() / 1e6;
    let eps = 1e-9 + d as f64 * 1e-12;
    ((k * d as f64 - eps).ceil().max(0.0) as usize).min(d)
}

/// Keeps the ⌈k·D⌉ largest-magnitude entries of one unit, zeroing the rest;
/// ties at the threshold keep the lower flat index first.
fn trim_unit(values: &[f32], keep_fraction: f32) -> Vec<f32> {
    let d = values.len();
    let keep = trim_keep_count(d, keep_fraction);
    if keep >= d {
        return values.to_vec();
    }
    let mut out = vec![0.0f32; d];
    if keep == 0 {
        return out;
    }
    let mut idx: Vec<u32> = (0..d as u32).collect();
    idx.select_nth_unstable_by(keep - 1, |&a, &b| {
        values[b as usize]
            .abs()
            .total_cmp(&values[a as usize].abs())
            .then(a.cmp(&b))
    });
    for &i in &idx[..keep] {
        out[i as usize] = values[i as usize];
    }
    out
}

/// Trim, elect sign, disjoint mean for one unit across all tasks.
fn ties_unit(taus: &[&[f32]], keep_fraction: f32) -> Vec<f32> {
    let d = taus.first().map_or(0, |t| t.len());
    let trimmed: Vec<Vec<f32>> = taus.iter().map(|t| trim_unit(t, keep_fraction)).collect();
    let mut out = vec![0.0f32; d];
    for k in 0..d {
        let mut sum = 0.0f64;
        for t in &trimmed {
            sum += t[k] as f64;
        }
        // Elected sign; an exact zero sum counts as positive.
        let positive = sum >= 0.0;
        let mut acc = 0.0f64;
        let mut count = 0u32;
        for t in &trimmed {
            let v = t[k];
            if v != 0.0 && (v > 0.0) == positive {
                acc += v as f64;
                count += 1;
            }
        }
        if count > 0 {
            out[k] = (acc / count as f64) as f32;
        }
    }
    out
}

/// Trim each task vector to its largest-magnitude entries, elect a sign per
/// coordinate, average the agreeing values, and apply θ_pre + λ·τ_m.
pub fn ties_merge(
    pretrained: &Checkpoint,
    tvs: &[TaskVector],
    cfg: &TiesConfig,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if tvs.is_empty() {
        return Err(Error::InvalidConfig(
            "need at least one task vector to merge".into(),
        ));
    }
    let maps: Vec<&BTreeMap<String, Vec<f32>>> = tvs.iter().map(|tv| tv.deltas()).collect();
    let deltas = map_units(&maps, cfg.granularity, |slices| {
        ties_unit(slices, cfg.trim_keep_fraction)
    });
    let merged = TaskVector::from_deltas("merged", tvs[0].schema().clone(), deltas)?;
    apply_delta(pretrained, &merged, cfg.lambda)
}

/// Uniform value in [0, 1) keyed by (seed, tensor name, flat index), so the
/// draw for an element never depends on iteration order or thread schedule.
fn keyed_uniform(seed: u64, name: &str, index: u64) -> f64 {
    // FNV-1a over the name, then two splitmix64 rounds to mix in the index.
    let mut h = 0xcbf29ce484222325u64;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut x = seed ^ h;
    for salt in [0x9e3779b97f4a7c15u64, index.wrapping_add(0x6a09e667f3bcc909)] {
        x = x.wrapping_add(salt);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
        x ^= x >> 31;
    }
    (x >> 11) as f64 / (1u64 << 53) as f64
}

/// Zeroes each element with probability p and scales survivors by 1/(1−p).
/// p = 0 returns the input unchanged.
pub fn dare_preprocess(tv: &TaskVector, cfg: &DareConfig) -> Result<TaskVector> {
    cfg.validate()?;
    let p = cfg.drop_rate as f64;
    let scale = (1.0 / (1.0 - p)) as f32;
    let mut deltas = BTreeMap::new();
    for (name, values) in tv.deltas() {
        let dropped: Vec<f32> = values
            .iter()
            .enumerate()
            .map(|(k, v)| {
                if p > 0.0 && keyed_uniform(cfg.seed, name, k as u64) < p {
                    0.0
                } else {
                    v * scale
                }
            })
            .collect();
        deltas.insert(name.clone(), dropped);
    }
    TaskVector::from_deltas(&tv.label, tv.schema().clone(), deltas)
}
