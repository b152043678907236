//! Parameter competition balancing: score, mask, and fuse task vectors.
//!
//! For each task i with delta τ_i, every coordinate receives a score
//!
//! ```text
//! β_i = softmax(N · norm(τ_i ⊙ τ_i)) ⊙ Σ_j softmax(norm(τ_i ⊙ τ_j))
//!       ^ intra: self-importance        ^ inter: cross-task agreement
//! ```
//!
//! where `norm(x) = x / max|x|` over one granularity unit and the sum runs
//! over all tasks including j = i. The lowest-scoring fraction 1 − r of each
//! unit is dropped, and the survivors are fused by a score-weighted mean:
//! τ_m = Σ β̂_i λ_i τ_i / Σ β̂_i. The merged model is θ_pre + λ·τ_m.
//!
//! A granularity unit is either one named tensor (default) or the whole
//! flattened model. Scores, masks, and normalization never cross unit
//! boundaries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Tensor};
use crate::error::{Error, Result};
use crate::task_vector::{validate_compatibility, TaskVector};

/// Element set over which norm, softmax, and mask thresholds are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    #[default]
    PerTensor,
    Global,
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-tensor" | "per_tensor" => Ok(Granularity::PerTensor),
            "global" => Ok(Granularity::Global),
            other => Err(Error::InvalidConfig(format!(
                "unknown granularity \"{other}\" (expected per-tensor or global)"
            ))),
        }
    }
}

/// Merge hyperparameters and ablation toggles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcbConfig {
    /// Scale applied to the fused delta in θ_m = θ_pre + λ·τ_m.
    pub lambda: f32,
    /// Per-task coefficients λ_i applied inside the fusion numerator.
    pub per_task_lambdas: Option<Vec<f32>>,
    /// Fraction r of each unit kept by the mask.
    pub mask_ratio: f32,
    pub granularity: Granularity,
    /// Overrides the softmax regulator N (defaults to the task count).
    pub regulator_n: Option<u32>,
    pub enable_intra: bool,
    pub enable_inter: bool,
    pub enable_drop: bool,
    pub enable_rescale: bool,
    /// Compatibility switch: normalize products inside the inter softmax.
    pub inter_norm: bool,
    pub seed: u64,
}

impl Default for PcbConfig {
    fn default() -> Self {
        PcbConfig {
            lambda: 1.0,
            per_task_lambdas: None,
            mask_ratio: 0.2,
            granularity: Granularity::PerTensor,
            regulator_n: None,
            enable_intra: true,
            enable_inter: true,
            enable_drop: true,
            enable_rescale: true,
            inter_norm: true,
            seed: 0,
        }
    }
}

impl PcbConfig {
    pub fn validate(&self, n_tasks: usize) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "mask ratio must lie in (0, 1], got {}",
                self.mask_ratio
            )));
        }
        if !self.lambda.is_finite() {
            return Err(Error::InvalidConfig("lambda must be finite".into()));
        }
        if let Some(lams) = &self.per_task_lambdas {
            if lams.len() != n_tasks {
                return Err(Error::LengthMismatch(format!(
                    "{} per-task lambdas for {n_tasks} tasks",
                    lams.len()
                )));
            }
            if lams.iter().any(|l| !l.is_finite()) {
                return Err(Error::InvalidConfig("per-task lambdas must be finite".into()));
            }
        }
        if self.regulator_n == Some(0) {
            return Err(Error::InvalidConfig("regulator N must be at least 1".into()));
        }
        Ok(())
    }

    /// The softmax regulator N for a given task count.
    pub fn regulator(&self, n_tasks: usize) -> f32 {
        self.regulator_n.map_or(n_tasks as f32, |n| n as f32)
    }
}

/// Which pipeline stage a score matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BalanceKind {
    Intra,
    Inter,
    Combined,
    Masked,
}

/// One task's per-coordinate scores, aligned with its task vector.
#[derive(Debug, Clone)]
pub struct BalanceMatrix {
    pub kind: BalanceKind,
    scores: BTreeMap<String, Vec<f32>>,
}

impl BalanceMatrix {
    pub fn scores(&self) -> &BTreeMap<String, Vec<f32>> {
        &self.scores
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.scores.get(name).map(Vec::as_slice)
    }
}

/// Per-task keep/drop decisions, aligned with the scored coordinates.
#[derive(Debug, Clone)]
pub struct Mask {
    pub ratio: f32,
    bits: BTreeMap<String, Vec<bool>>,
}

impl Mask {
    pub fn bits(&self) -> &BTreeMap<String, Vec<bool>> {
        &self.bits
    }

    pub fn get(&self, name: &str) -> Option<&[bool]> {
        self.bits.get(name).map(Vec::as_slice)
    }

    /// β̂ = m ⊙ β.
    pub fn apply(&self, beta: &BalanceMatrix) -> Result<BalanceMatrix> {
        let mut scores = BTreeMap::new();
        for (name, values) in beta.scores() {
            let bits = self.bits.get(name).ok_or_else(|| {
                Error::SchemaMismatch(format!("mask has no entry for tensor \"{name}\""))
            })?;
            if bits.len() != values.len() {
                return Err(Error::LengthMismatch(format!(
                    "mask \"{name}\" covers {} elements, scores have {}",
                    bits.len(),
                    values.len()
                )));
            }
            let masked = values
                .iter()
                .zip(bits)
                .map(|(v, keep)| if *keep { *v } else { 0.0 })
                .collect();
            scores.insert(name.clone(), masked);
        }
        Ok(BalanceMatrix {
            kind: BalanceKind::Masked,
            scores,
        })
    }
}

// ---------------------------------------------------------------------------
// Unit kernels. Each operates on one granularity unit as a flat slice.
// ---------------------------------------------------------------------------

/// x / max|x| in place; the all-zero unit stays zero.
pub fn normalize_unit(values: &mut [f32]) {
    let max_abs = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if max_abs > 0.0 {
        for v in values.iter_mut() {
            *v /= max_abs;
        }
    }
}

/// Max-subtraction softmax in place. The denominator accumulates in f64 so
/// unit sums stay within 1e-6 of one even for multi-million element units.
pub fn softmax_unit(values: &mut [f32]) {
    if values.is_empty() {
        return;
    }
    let max = values.iter().fold(f32::NEG_INFINITY, |m, v| m.max(*v));
    let mut sum = 0.0f64;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v as f64;
    }
    for v in values.iter_mut() {
        *v = (*v as f64 / sum) as f32;
    }
}

/// Intra-task scores for one unit: softmax(N · norm(τ ⊙ τ)).
fn intra_unit(tau: &[f32], regulator: f32) -> Vec<f32> {
    let mut v: Vec<f32> = tau.iter().map(|t| t * t).collect();
    normalize_unit(&mut v);
    for x in v.iter_mut() {
        *x *= regulator;
    }
    softmax_unit(&mut v);
    v
}

/// Cross-task scores for one unit: Σ_j softmax(norm(τ_i ⊙ τ_j)), j over all tasks
/// (`taus` must include `tau_i` itself).
fn inter_unit(tau_i: &[f32], taus: &[&[f32]], include_norm: bool) -> Vec<f32> {
    let d = tau_i.len();
    let mut acc = vec![0.0f32; d];
    let mut w = vec![0.0f32; d];
    for tau_j in taus {
        for k in 0..d {
            w[k] = tau_i[k] * tau_j[k];
        }
        if include_norm {
            normalize_unit(&mut w);
        }
        softmax_unit(&mut w);
        for k in 0..d {
            acc[k] += w[k];
        }
    }
    acc
}

/// Number of kept coordinates for a unit of `d` elements: D − ⌊(1−r)·D⌋.
pub fn mask_keep_count(d: usize, ratio: f32) -> usize {
    // Ratios arrive as f32 (0.1f32 sits ~1.5e-9 above one tenth), so snap
    // to six decimal places before scaling by D; the epsilon absorbs the
    // remaining f64 rounding so (1 - 0.1)*10 floors to 9, not 8.
    let r = (ratio as f64 * 1e6).round() / 1e6;
    let eps = 1e-9 + d as f64 * 1e-12;
    let dropped = ((1.0 - r) * d as f64 + eps).floor() as usize;
    d.saturating_sub(dropped.min(d))
}

/// Keeps the k = D − ⌊(1−r)·D⌋ largest scores of one unit; ties at the
/// threshold keep the lower flat index first.
pub fn build_mask_unit(beta: &[f32], ratio: f32) -> Vec<bool> {
    let d = beta.len();
    let k = mask_keep_count(d, ratio);
    let mut mask = vec![false; d];
    if k == 0 {
        return mask;
    }
    if k >= d {
        mask.fill(true);
        return mask;
    }
    let mut idx: Vec<u32> = (0..d as u32).collect();
    // Strict total order: score descending, then index ascending.
    idx.select_nth_unstable_by(k - 1, |&a, &b| {
        beta[b as usize]
            .total_cmp(&beta[a as usize])
            .then(a.cmp(&b))
    });
    for &i in &idx[..k] {
        mask[i as usize] = true;
    }
    mask
}

/// Shannon entropy (nats) of a unit's scores after normalizing to sum 1.
pub fn entropy_unit(scores: &[f32]) -> f64 {
    let total: f64 = scores.iter().map(|&s| s as f64).sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut h = 0.0f64;
    for &s in scores {
        let p = s as f64 / total;
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h
}

/// Score-weighted mean of one unit: τ_m = Σ β̂_i λ_i τ_i / Σ β̂_i, with zero
/// wherever every β̂ vanishes. Accumulation runs in f64 so a single task
/// with a positive score reproduces its τ bit-for-bit.
fn fuse_weighted_unit(taus: &[&[f32]], betas: &[&[f32]], lambdas: &[f32]) -> Vec<f32> {
    let d = taus.first().map_or(0, |t| t.len());
    let mut num = vec![0.0f64; d];
    let mut den = vec![0.0f64; d];
    for ((tau, beta), &lam) in taus.iter().zip(betas).zip(lambdas) {
        let lam = lam as f64;
        for k in 0..d {
            let b = beta[k] as f64;
            num[k] += b * (lam * tau[k] as f64);
            den[k] += b;
        }
    }
    (0..d)
        .map(|k| {
            if den[k] == 0.0 {
                0.0
            } else {
                (num[k] / den[k]) as f32
            }
        })
        .collect()
}

/// Disjoint-mean fusion used when rescaling is ablated: per coordinate,
/// elect the sign of the summed kept values (ties to +), then average the
/// kept nonzero values agreeing with it.
fn fuse_disjoint_unit(taus: &[&[f32]], masks: &[Vec<bool>], lambdas: &[f32]) -> Vec<f32> {
    let d = taus.first().map_or(0, |t| t.len());
    let mut out = vec![0.0f32; d];
    for k in 0..d {
        let mut sum = 0.0f64;
        for (t, tau) in taus.iter().enumerate() {
            if masks[t][k] {
                sum += lambdas[t] as f64 * tau[k] as f64;
            }
        }
        let positive = sum >= 0.0;
        let mut acc = 0.0f64;
        let mut count = 0u32;
        for (t, tau) in taus.iter().enumerate() {
            if !masks[t][k] {
                continue;
            }
            let v = lambdas[t] as f64 * tau[k] as f64;
            if v != 0.0 && (v > 0.0) == positive {
                acc += v;
                count += 1;
            }
        }
        if count > 0 {
            out[k] = (acc / count as f64) as f32;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Matrix-level operations over task vectors.
// ---------------------------------------------------------------------------

/// Applies a per-unit kernel over aligned delta maps and reassembles the
/// per-tensor layout. For the global granularity the maps are concatenated
/// in lexicographic order, processed as one unit, and split back.
pub(crate) fn map_units<F>(
    inputs: &[&BTreeMap<String, Vec<f32>>],
    granularity: Granularity,
    mut kernel: F,
) -> BTreeMap<String, Vec<f32>>
where
    F: FnMut(&[&[f32]]) -> Vec<f32>,
{
    match granularity {
        Granularity::PerTensor => {
            let mut out = BTreeMap::new();
            for (name, first) in inputs[0] {
                let slices: Vec<&[f32]> = inputs
                    .iter()
                    .map(|m| m.get(name).map_or(first.as_slice(), |v| v.as_slice()))
                    .collect();
                out.insert(name.clone(), kernel(&slices));
            }
            out
        }
        Granularity::Global => {
            let flats: Vec<Vec<f32>> = inputs
                .iter()
                .map(|m| m.values().flatten().copied().collect())
                .collect();
            let slices: Vec<&[f32]> = flats.iter().map(Vec::as_slice).collect();
            let merged = kernel(&slices);
            let mut out = BTreeMap::new();
            let mut offset = 0;
            for (name, v) in inputs[0] {
                out.insert(name.clone(), merged[offset..offset + v.len()].to_vec());
                offset += v.len();
            }
            out
        }
    }
}

fn check_aligned(tvs: &[&TaskVector]) -> Result<()> {
    let first = tvs[0];
    for tv in &tvs[1..] {
        if tv.deltas().len() != first.deltas().len()
            || tv
                .deltas()
                .iter()
                .zip(first.deltas())
                .any(|((an, av), (bn, bv))| an != bn || av.len() != bv.len())
        {
            return Err(Error::SchemaMismatch(format!(
                "task vectors \"{}\" and \"{}\" cover different tensors",
                first.label, tv.label
            )));
        }
    }
    Ok(())
}

/// Per-unit softmax of N·norm(τ ⊙ τ): self-importance of each delta entry.
pub fn intra_balance(tv: &TaskVector, n_tasks: u32, granularity: Granularity) -> BalanceMatrix {
    let scores = map_units(&[tv.deltas()], granularity, |slices| {
        intra_unit(slices[0], n_tasks as f32)
    });
    BalanceMatrix {
        kind: BalanceKind::Intra,
        scores,
    }
}

/// Per-unit Σ_j softmax(norm(τ_i ⊙ τ_j)); the sum includes j = i, so
/// `all_tvs` must contain `tv_i` itself. `include_norm` is the published
/// form; switching it off reproduces the variant without normalization.
pub fn inter_balance(
    tv_i: &TaskVector,
    all_tvs: &[TaskVector],
    granularity: Granularity,
    include_norm: bool,
) -> Result<BalanceMatrix> {
    let mut refs: Vec<&TaskVector> = vec![tv_i];
    refs.extend(all_tvs.iter());
    check_aligned(&refs)?;
    let maps: Vec<&BTreeMap<String, Vec<f32>>> = refs.iter().map(|tv| tv.deltas()).collect();
    let scores = map_units(&maps, granularity, |slices| {
        // slices[0] is τ_i, the rest are the full task list.
        inter_unit(slices[0], &slices[1..], include_norm)
    });
    Ok(BalanceMatrix {
        kind: BalanceKind::Inter,
        scores,
    })
}

/// β = β_intra ⊙ β_inter, honoring the ablation toggles: a disabled factor
/// passes the other through, and disabling both yields uniform ones.
pub fn combine_scores(
    intra: &BalanceMatrix,
    inter: &BalanceMatrix,
    enable_intra: bool,
    enable_inter: bool,
) -> Result<BalanceMatrix> {
    let mut scores = BTreeMap::new();
    for (name, a) in intra.scores() {
        let b = inter
            .get(name)
            .ok_or_else(|| Error::SchemaMismatch(format!("no inter scores for \"{name}\"")))?;
        if a.len() != b.len() {
            return Err(Error::LengthMismatch(format!(
                "intra \"{name}\" has {} elements, inter has {}",
                a.len(),
                b.len()
            )));
        }
        let combined: Vec<f32> = match (enable_intra, enable_inter) {
            (true, true) => a.iter().zip(b).map(|(x, y)| x * y).collect(),
            (true, false) => a.clone(),
            (false, true) => b.to_vec(),
            (false, false) => vec![1.0; a.len()],
        };
        scores.insert(name.clone(), combined);
    }
    Ok(BalanceMatrix {
        kind: BalanceKind::Combined,
        scores,
    })
}

/// Keeps the top r-fraction of each unit by score.
pub fn build_mask(beta: &BalanceMatrix, ratio: f32, granularity: Granularity) -> Result<Mask> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "mask ratio must lie in (0, 1], got {ratio}"
        )));
    }
    let as_f32 = map_units(&[beta.scores()], granularity, |slices| {
        build_mask_unit(slices[0], ratio)
            .into_iter()
            .map(f32::from)
            .collect()
    });
    let bits = as_f32
        .into_iter()
        .map(|(name, v)| (name, v.into_iter().map(|x| x != 0.0).collect()))
        .collect();
    Ok(Mask { ratio, bits })
}

/// Score-weighted fusion: τ_m = Σ β̂_i λ_i τ_i / Σ β̂_i element-wise.
pub fn fuse(
    tvs: &[TaskVector],
    masked_betas: &[BalanceMatrix],
    lambdas: &[f32],
) -> Result<TaskVector> {
    if tvs.is_empty() || tvs.len() != masked_betas.len() || tvs.len() != lambdas.len() {
        return Err(Error::LengthMismatch(format!(
            "{} task vectors, {} score matrices, {} lambdas",
            tvs.len(),
            masked_betas.len(),
            lambdas.len()
        )));
    }
    let refs: Vec<&TaskVector> = tvs.iter().collect();
    check_aligned(&refs)?;
    let mut deltas = BTreeMap::new();
    for (name, first) in tvs[0].deltas() {
        let taus: Vec<&[f32]> = tvs.iter().map(|tv| tv.get(name).expect("aligned")).collect();
        let mut betas: Vec<&[f32]> = Vec::with_capacity(tvs.len());
        for bm in masked_betas {
            let b = bm
                .get(name)
                .ok_or_else(|| Error::SchemaMismatch(format!("no scores for \"{name}\"")))?;
            if b.len() != first.len() {
                return Err(Error::LengthMismatch(format!(
                    "scores \"{name}\" have {} elements, deltas have {}",
                    b.len(),
                    first.len()
                )));
            }
            betas.push(b);
        }
        deltas.insert(name.clone(), fuse_weighted_unit(&taus, &betas, lambdas));
    }
    TaskVector::from_deltas("merged", tvs[0].schema().clone(), deltas)
}

// ---------------------------------------------------------------------------
// End-to-end merge.
// ---------------------------------------------------------------------------

/// Score statistics for one (unit, task) pair, for diagnostics dumps.
#[derive(Debug, Clone, Serialize)]
pub struct UnitScoreStats {
    pub unit: String,
    pub task: String,
    pub beta_min: f32,
    pub beta_max: f32,
    pub entropy: f64,
    pub kept_fraction: f32,
}

/// Diagnostics collected while merging.
#[derive(Debug, Clone, Default, Serialize)]
pub struct MergeReport {
    pub units: Vec<UnitScoreStats>,
}

/// Runs the full pipeline and returns the merged checkpoint.
pub fn pcb_merge(
    pretrained: &Checkpoint,
    finetuned: &[&Checkpoint],
    cfg: &PcbConfig,
) -> Result<Checkpoint> {
    pcb_merge_with_report(pretrained, finetuned, cfg, false).map(|(ckpt, _)| ckpt)
}

/// As [`pcb_merge`], optionally collecting per-unit score statistics.
///
/// Tensors are processed unit by unit: per-tensor granularity streams one
/// tensor at a time, so peak memory stays near the loaded checkpoints plus
/// one unit's working buffers.
pub fn pcb_merge_with_report(
    pretrained: &Checkpoint,
    finetuned: &[&Checkpoint],
    cfg: &PcbConfig,
    collect_stats: bool,
) -> Result<(Checkpoint, MergeReport)> {
    if finetuned.is_empty() {
        return Err(Error::InvalidConfig(
            "need at least one fine-tuned checkpoint".into(),
        ));
    }
    cfg.validate(finetuned.len())?;
    let mut all: Vec<&Checkpoint> = Vec::with_capacity(finetuned.len() + 1);
    all.push(pretrained);
    all.extend_from_slice(finetuned);
    let schema = validate_compatibility(&all, false)?;

    let n = finetuned.len();
    let regulator = cfg.regulator(n);
    let lambdas: Vec<f32> = cfg
        .per_task_lambdas
        .clone()
        .unwrap_or_else(|| vec![1.0; n]);
    let labels: Vec<String> = (0..n).map(|i| format!("task{i}")).collect();

    let mergeable: Vec<&str> = schema.mergeable_names().collect();
    let mut report = MergeReport::default();
    let mut out = Checkpoint::new();

    match cfg.granularity {
        Granularity::PerTensor => {
            for name in &mergeable {
                let pre = pretrained.get(name).expect("validated").to_f32_vec();
                let taus: Vec<Vec<f32>> = finetuned
                    .iter()
                    .map(|ft| {
                        let f = ft.get(name).expect("validated").to_f32_vec();
                        f.iter().zip(&pre).map(|(a, b)| a - b).collect()
                    })
                    .collect();
                let tau_refs: Vec<&[f32]> = taus.iter().map(Vec::as_slice).collect();
                let stats = collect_stats.then(|| (name.to_string(), &mut report));
                let tau_m = merge_unit(&tau_refs, cfg, regulator, &lambdas, &labels, stats);
                insert_merged(&mut out, pretrained, name, &pre, &tau_m, cfg.lambda)?;
            }
        }
        Granularity::Global => {
            let mut pre_flat = Vec::new();
            let mut layout = Vec::new();
            for name in &mergeable {
                let v = pretrained.get(name).expect("validated").to_f32_vec();
                layout.push((*name, v.len()));
                pre_flat.extend_from_slice(&v);
            }
            let taus: Vec<Vec<f32>> = finetuned
                .iter()
                .map(|ft| {
                    let mut flat = Vec::with_capacity(pre_flat.len());
                    for (name, _) in &layout {
                        flat.extend(ft.get(name).expect("validated").to_f32_vec());
                    }
                    flat.iter().zip(&pre_flat).map(|(a, b)| a - b).collect()
                })
                .collect();
            let tau_refs: Vec<&[f32]> = taus.iter().map(Vec::as_slice).collect();
            let stats = collect_stats.then(|| ("*".to_string(), &mut report));
            let tau_m = merge_unit(&tau_refs, cfg, regulator, &lambdas, &labels, stats);
            let mut offset = 0;
            for (name, len) in &layout {
                insert_merged(
                    &mut out,
                    pretrained,
                    name,
                    &pre_flat[offset..offset + len],
                    &tau_m[offset..offset + len],
                    cfg.lambda,
                )?;
                offset += len;
            }
        }
    }

    // Non-mergeable tensors carry the pretrained values unchanged.
    for (name, entry) in schema.entries() {
        if !entry.mergeable {
            out.insert(name.clone(), pretrained.get(name).expect("validated").clone())?;
        }
    }
    Ok((out, report))
}

/// Scores, masks, and fuses one granularity unit.
fn merge_unit(
    taus: &[&[f32]],
    cfg: &PcbConfig,
    regulator: f32,
    lambdas: &[f32],
    labels: &[String],
    mut stats: Option<(String, &mut MergeReport)>,
) -> Vec<f32> {
    let n = taus.len();
    let d = taus.first().map_or(0, |t| t.len());
    if d == 0 {
        return Vec::new();
    }

    let mut num = vec![0.0f64; d];
    let mut den = vec![0.0f64; d];
    // The disjoint-mean path needs every task's mask at once.
    let mut all_masks: Vec<Vec<bool>> = Vec::new();

    for i in 0..n {
        let intra = cfg.enable_intra.then(|| intra_unit(taus[i], regulator));
        let inter = cfg
            .enable_inter
            .then(|| inter_unit(taus[i], taus, cfg.inter_norm));
        let beta = match (intra, inter) {
            (Some(mut a), Some(b)) => {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x *= y;
                }
                a
            }
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => vec![1.0; d],
        };
        let mask = if cfg.enable_drop {
            build_mask_unit(&beta, cfg.mask_ratio)
        } else {
            vec![true; d]
        };

        if let Some((unit, report)) = &mut stats {
            let kept = mask.iter().filter(|b| **b).count();
            let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
            for &b in &beta {
                lo = lo.min(b);
                hi = hi.max(b);
            }
            report.units.push(UnitScoreStats {
                unit: unit.clone(),
                task: labels[i].clone(),
                beta_min: lo,
                beta_max: hi,
                entropy: entropy_unit(&beta),
                kept_fraction: kept as f32 / d as f32,
            });
        }

        if cfg.enable_rescale {
            let lam = lambdas[i] as f64;
            for k in 0..d {
                if mask[k] {
                    let b = beta[k] as f64;
                    num[k] += b * (lam * taus[i][k] as f64);
                    den[k] += b;
                }
            }
        } else {
            all_masks.push(mask);
        }
    }

    if cfg.enable_rescale {
        (0..d)
            .map(|k| {
                if den[k] == 0.0 {
                    0.0
                } else {
                    (num[k] / den[k]) as f32
                }
            })
            .collect()
    } else {
        fuse_disjoint_unit(taus, &all_masks, lambdas)
    }
}

fn insert_merged(
    out: &mut Checkpoint,
    pretrained: &Checkpoint,
    name: &str,
    pre: &[f32],
    tau_m: &[f32],
    lambda: f32,
) -> Result<()> {
    let reference = pretrained.get(name).expect("validated");
    let values: Vec<f32> = pre
        .iter()
        .zip(tau_m)
        .map(|(p, t)| p + lambda * t)
        .collect();
    let tensor = Tensor::from_f32_vec(reference.dtype(), reference.shape().to_vec(), &values)?;
    out.insert(name.to_string(), tensor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::Dtype;
    use crate::task_vector::compute_task_vector;

    fn ckpt_of(pairs: &[(&str, &[f32])]) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        for (name, values) in pairs {
            ckpt.insert(
                *name,
                Tensor::from_f32_vec(Dtype::F32, vec![values.len()], values).unwrap(),
            )
            .unwrap();
        }
        ckpt
    }

    fn tv_of(values: &[f32], label: &str) -> TaskVector {
        let zeros = vec![0.0f32; values.len()];
        let pre = ckpt_of(&[("w", &zeros)]);
        let ft = ckpt_of(&[("w", values)]);
        compute_task_vector(&ft, &pre, label).unwrap()
    }

    fn assert_close(got: &[f32], want: &[f64], tol: f64) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert!(
                (*g as f64 - w).abs() <= tol,
                "got {got:?}, want {want:?} (tol {tol})"
            );
        }
    }

    #[test]
    fn normalize_divides_by_max_abs() {
        let mut v = [1.0f32, 4.0, 0.0];
        normalize_unit(&mut v);
        assert_eq!(v, [0.25, 1.0, 0.0]);

        let mut v = [0.0f32, 0.0];
        normalize_unit(&mut v);
        assert_eq!(v, [0.0, 0.0]);

        let mut v = [1.0f32, -4.0];
        normalize_unit(&mut v);
        assert_eq!(v, [0.25, -1.0]);
    }

    #[test]
    fn intra_matches_scripted_oracle() {
        let tv = tv_of(&[1.0, -2.0, 0.0], "t");
        let m = intra_balance(&tv, 1, Granularity::PerTensor);
        assert_close(
            m.get("w").unwrap(),
            &[0.2566866355, 0.5434056117, 0.1999077528],
            1e-6,
        );
        let m = intra_balance(&tv, 2, Granularity::PerTensor);
        assert_close(
            m.get("w").unwrap(),
            &[0.1642516276, 0.7361247243, 0.0996236481],
            1e-6,
        );
    }

    #[test]
    fn intra_of_constant_input_is_uniform() {
        let tv = tv_of(&[3.0, 3.0, 3.0], "t");
        for n in [1, 2, 7] {
            let m = intra_balance(&tv, n, Granularity::PerTensor);
            assert_close(m.get("w").unwrap(), &[1.0 / 3.0; 3], 1e-6);
        }
    }

    #[test]
    fn inter_matches_scripted_oracle() {
        let t1 = tv_of(&[1.0, -2.0, 0.0], "a");
        let t2 = tv_of(&[1.0, 2.0, 0.0], "b");
        let all = vec![t1.clone(), t2];
        let m = inter_balance(&t1, &all, Granularity::PerTensor, true).unwrap();
        assert_close(
            m.get("w").unwrap(),
            &[0.7408764860, 0.6821283265, 0.5769951875],
            1e-6,
        );
    }

    #[test]
    fn inter_of_single_task_equals_intra_summand() {
        let tv = tv_of(&[0.5, -1.5, 2.0, 0.0], "t");
        let inter = inter_balance(&tv, std::slice::from_ref(&tv), Granularity::PerTensor, true)
            .unwrap();
        let intra = intra_balance(&tv, 1, Granularity::PerTensor);
        for (a, b) in inter.get("w").unwrap().iter().zip(intra.get("w").unwrap()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn inter_zero_task_contributes_uniform_summand() {
        let t1 = tv_of(&[1.0, -2.0, 0.0], "a");
        let t2 = tv_of(&[0.0, 0.0, 0.0], "b");
        let all = vec![t1.clone(), t2];
        let m = inter_balance(&t1, &all, Granularity::PerTensor, true).unwrap();
        let intra = intra_balance(&t1, 1, Granularity::PerTensor);
        for (total, own) in m.get("w").unwrap().iter().zip(intra.get("w").unwrap()) {
            assert!((total - own - 1.0 / 3.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn combine_honors_toggles() {
        let t1 = tv_of(&[1.0, 2.0], "a");
        let intra = BalanceMatrix {
            kind: BalanceKind::Intra,
            scores: [("w".to_string(), vec![0.2, 0.8])].into(),
        };
        let inter = BalanceMatrix {
            kind: BalanceKind::Inter,
            scores: [("w".to_string(), vec![1.0, 0.5])].into(),
        };
        let both = combine_scores(&intra, &inter, true, true).unwrap();
        assert_eq!(both.get("w").unwrap(), &[0.2f32, 0.4]);
        let only_intra = combine_scores(&intra, &inter, true, false).unwrap();
        assert_eq!(only_intra.get("w").unwrap(), &[0.2f32, 0.8]);
        let only_inter = combine_scores(&intra, &inter, false, true).unwrap();
        assert_eq!(only_inter.get("w").unwrap(), &[1.0f32, 0.5]);
        let neither = combine_scores(&intra, &inter, false, false).unwrap();
        assert_eq!(neither.get("w").unwrap(), &[1.0f32, 1.0]);
        let _ = t1;
    }

    #[test]
    fn mask_selects_top_scores() {
        assert_eq!(
            build_mask_unit(&[0.1, 0.5, 0.3, 0.2], 0.5),
            vec![false, true, true, false]
        );
        assert_eq!(build_mask_unit(&[0.1, 0.5], 1.0), vec![true, true]);
    }

    #[test]
    fn mask_ties_keep_lower_index() {
        assert_eq!(
            build_mask_unit(&[0.3, 0.3, 0.3, 0.1], 0.5),
            vec![true, true, false, false]
        );
    }

    #[test]
    fn mask_count_matches_formula() {
        for (d, r, want) in [
            (4, 0.5, 2),
            (10, 0.1, 1),
            (10, 0.05, 1),
            (10, 1.0, 10),
            (1024, 0.05, 52),
            (7, 0.2, 2),
        ] {
            assert_eq!(mask_keep_count(d, r), want, "d={d} r={r}");
        }
    }

    #[test]
    fn fuse_matches_hand_values() {
        let t1 = tv_of(&[3.0, 0.0], "a");
        let t2 = tv_of(&[0.0, -4.0], "b");
        let b1 = BalanceMatrix {
            kind: BalanceKind::Masked,
            scores: [("w".to_string(), vec![0.5, 0.0])].into(),
        };
        let b2 = BalanceMatrix {
            kind: BalanceKind::Masked,
            scores: [("w".to_string(), vec![0.0, 0.2])].into(),
        };
        let fused = fuse(&[t1, t2], &[b1, b2], &[1.0, 1.0]).unwrap();
        assert_eq!(fused.get("w").unwrap(), &[3.0f32, -4.0]);
    }

    #[test]
    fn fuse_zero_denominator_keeps_pretrained() {
        let t1 = tv_of(&[3.0, 7.0], "a");
        let t2 = tv_of(&[5.0, 9.0], "b");
        let b1 = BalanceMatrix {
            kind: BalanceKind::Masked,
            scores: [("w".to_string(), vec![1.0, 0.0])].into(),
        };
        let b2 = BalanceMatrix {
            kind: BalanceKind::Masked,
            scores: [("w".to_string(), vec![1.0, 0.0])].into(),
        };
        let fused = fuse(&[t1, t2], &[b1, b2], &[1.0, 1.0]).unwrap();
        assert_eq!(fused.get("w").unwrap(), &[4.0f32, 0.0]);
    }

    #[test]
    fn fuse_single_task_is_exact() {
        let t1 = tv_of(&[0.3, -1.7, 0.001], "a");
        let b1 = BalanceMatrix {
            kind: BalanceKind::Masked,
            scores: [("w".to_string(), vec![0.37, 0.11, 0.52])].into(),
        };
        let tau = t1.get("w").unwrap().to_vec();
        let fused = fuse(&[t1], &[b1], &[1.0]).unwrap();
        assert_eq!(fused.get("w").unwrap(), tau.as_slice());
    }

    #[test]
    fn single_task_merge_reproduces_finetuned_bitwise() {
        // Base in [0.5, 2), delta within ±40% of base: the subtraction is
        // exact in f32, so the identity holds bit for bit.
        let pre_vals: Vec<f32> = (0..33).map(|i| 0.5 + 0.04 * i as f32).collect();
        let ft_vals: Vec<f32> = pre_vals
            .iter()
            .enumerate()
            .map(|(i, p)| p * (1.0 + 0.4 * ((i as f32 * 0.37).sin())))
            .collect();
        let pre = ckpt_of(&[("w", &pre_vals)]);
        let ft = ckpt_of(&[("w", &ft_vals)]);
        let cfg = PcbConfig {
            mask_ratio: 1.0,
            ..PcbConfig::default()
        };
        let merged = pcb_merge(&pre, &[&ft], &cfg).unwrap();
        assert_eq!(
            merged.get("w").unwrap().raw_data(),
            ft.get("w").unwrap().raw_data()
        );
    }

    #[test]
    fn zero_lambda_returns_pretrained() {
        let pre = ckpt_of(&[("w", &[0.5, -1.25, 2.0])]);
        let ft = ckpt_of(&[("w", &[1.0, 3.0, -2.0])]);
        let cfg = PcbConfig {
            lambda: 0.0,
            ..PcbConfig::default()
        };
        let merged = pcb_merge(&pre, &[&ft], &cfg).unwrap();
        assert_eq!(
            merged.get("w").unwrap().to_f32_vec(),
            pre.get("w").unwrap().to_f32_vec()
        );
    }

    #[test]
    fn disjoint_supports_recover_each_task() {
        // Two tasks, each owning half the coordinates; r equal to the
        // support fraction keeps exactly the own-task coordinates.
        let d = 16;
        let pre_vals = vec![0.0f32; d];
        let mut a = vec![0.0f32; d];
        let mut b = vec![0.0f32; d];
        for i in 0..d / 2 {
            a[i] = 1.0 + i as f32 * 0.1;
            b[d / 2 + i] = -2.0 + i as f32 * 0.2;
        }
        // Index 12 of b would be -0.4 + noise; keep all entries nonzero.
        for v in b.iter_mut().skip(d / 2) {
            if v.abs() < 0.05 {
                *v = 0.5;
            }
        }
        let pre = ckpt_of(&[("w", &pre_vals)]);
        let fa = ckpt_of(&[("w", &a)]);
        let fb = ckpt_of(&[("w", &b)]);
        let cfg = PcbConfig {
            mask_ratio: 0.5,
            ..PcbConfig::default()
        };
        let merged = pcb_merge(&pre, &[&fa, &fb], &cfg).unwrap();
        let got = merged.get("w").unwrap().to_f32_vec();
        for i in 0..d / 2 {
            assert!((got[i] - a[i]).abs() <= 1e-6, "coord {i}");
            assert!((got[d / 2 + i] - b[d / 2 + i]).abs() <= 1e-6, "coord {}", d / 2 + i);
        }
    }

    #[test]
    fn merge_is_invariant_under_task_order() {
        let pre = ckpt_of(&[("w", &[0.1, -0.2, 0.3, 0.05, -0.4, 0.25])]);
        let f1 = ckpt_of(&[("w", &[0.5, -0.1, 0.2, 0.3, -0.3, 0.2])]);
        let f2 = ckpt_of(&[("w", &[-0.2, 0.4, 0.35, 0.0, -0.5, 0.3])]);
        let f3 = ckpt_of(&[("w", &[0.0, 0.1, -0.6, 0.2, 0.1, 0.45])]);
        let cfg = PcbConfig {
            per_task_lambdas: Some(vec![0.9, 1.1, 1.3]),
            mask_ratio: 0.5,
            ..PcbConfig::default()
        };
        let merged = pcb_merge(&pre, &[&f1, &f2, &f3], &cfg).unwrap();
        let permuted_cfg = PcbConfig {
            per_task_lambdas: Some(vec![1.3, 0.9, 1.1]),
            ..cfg
        };
        let permuted = pcb_merge(&pre, &[&f3, &f1, &f2], &permuted_cfg).unwrap();
        for (a, b) in merged
            .get("w")
            .unwrap()
            .to_f32_vec()
            .iter()
            .zip(permuted.get("w").unwrap().to_f32_vec())
        {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn global_granularity_shares_one_unit() {
        // One dominant coordinate in tensor "b" should absorb the global
        // mask budget, leaving tensor "a" fully dropped.
        let pre = ckpt_of(&[("a", &[0.0, 0.0]), ("b", &[0.0, 0.0])]);
        let ft = ckpt_of(&[("a", &[0.1, 0.05]), ("b", &[5.0, 0.02])]);
        let cfg = PcbConfig {
            mask_ratio: 0.25,
            granularity: Granularity::Global,
            ..PcbConfig::default()
        };
        let merged = pcb_merge(&pre, &[&ft], &cfg).unwrap();
        assert_eq!(merged.get("a").unwrap().to_f32_vec(), vec![0.0, 0.0]);
        let b = merged.get("b").unwrap().to_f32_vec();
        assert!((b[0] - 5.0).abs() <= 1e-6);
        assert_eq!(b[1], 0.0);

        // Per-tensor granularity keeps the top coordinate of each tensor.
        let cfg = PcbConfig {
            mask_ratio: 0.5,
            ..PcbConfig::default()
        };
        let merged = pcb_merge(&pre, &[&ft], &cfg).unwrap();
        let a = merged.get("a").unwrap().to_f32_vec();
        assert!((a[0] - 0.1).abs() <= 1e-6);
        assert_eq!(a[1], 0.0);
    }

    #[test]
    fn report_counts_kept_fraction() {
        let pre = ckpt_of(&[("w", &[0.0; 8])]);
        let ft = ckpt_of(&[("w", &[1.0, -2.0, 0.5, 3.0, -0.25, 0.75, 1.5, -1.0])]);
        let cfg = PcbConfig {
            mask_ratio: 0.25,
            ..PcbConfig::default()
        };
        let (_, report) = pcb_merge_with_report(&pre, &[&ft], &cfg, true).unwrap();
        assert_eq!(report.units.len(), 1);
        let stats = &report.units[0];
        assert_eq!(stats.unit, "w");
        assert!((stats.kept_fraction - 0.25).abs() < 1e-6);
        assert!(stats.beta_max >= stats.beta_min);
        assert!(stats.beta_min > 0.0);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let cfg = PcbConfig {
            mask_ratio: 0.0,
            ..PcbConfig::default()
        };
        assert!(cfg.validate(2).is_err());
        let cfg = PcbConfig {
            mask_ratio: 1.5,
            ..PcbConfig::default()
        };
        assert!(cfg.validate(2).is_err());
        let cfg = PcbConfig {
            per_task_lambdas: Some(vec![1.0]),
            ..PcbConfig::default()
        };
        assert!(cfg.validate(2).is_err());
        assert!(PcbConfig::default().validate(2).is_ok());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn small_vec() -> impl Strategy<Value = Vec<f32>> {
            proptest::collection::vec(-8.0f32..8.0, 1..64)
        }

        proptest! {
            #[test]
            fn softmax_sums_to_one(values in small_vec()) {
                let mut v = values;
                softmax_unit(&mut v);
                let sum: f64 = v.iter().map(|x| *x as f64).sum();
                prop_assert!((sum - 1.0).abs() <= 1e-6);
                prop_assert!(v.iter().all(|x| *x > 0.0));
            }

            #[test]
            fn mask_cardinality_is_exact(
                values in small_vec(),
                ratio in prop::sample::select(vec![0.05f32, 0.1, 0.2, 0.5, 1.0]),
            ) {
                let mask = build_mask_unit(&values, ratio);
                let kept = mask.iter().filter(|b| **b).count();
                prop_assert_eq!(kept, mask_keep_count(values.len(), ratio));
            }

            #[test]
            fn intra_sharpens_with_regulator(values in proptest::collection::vec(-4.0f32..4.0, 4..32)) {
                // Skip near-constant squares, where entropy differences
                // vanish into rounding.
                let squares: Vec<f32> = values.iter().map(|v| v * v).collect();
                let spread = squares.iter().fold(0.0f32, |m, v| m.max(*v))
                    - squares.iter().fold(f32::INFINITY, |m, v| m.min(*v));
                prop_assume!(spread > 1e-3);
                let tv = tv_of(&values, "t");
                let h: Vec<f64> = [1u32, 2, 4]
                    .iter()
                    .map(|n| {
                        let m = intra_balance(&tv, *n, Granularity::PerTensor);
                        entropy_unit(m.get("w").unwrap())
                    })
                    .collect();
                prop_assert!(h[0] > h[1] && h[1] > h[2], "entropies {:?}", h);
            }

            #[test]
            fn combined_scores_are_positive(values in small_vec()) {
                let tv = tv_of(&values, "t");
                let all = vec![tv.clone()];
                let intra = intra_balance(&tv, 1, Granularity::PerTensor);
                let inter = inter_balance(&tv, &all, Granularity::PerTensor, true).unwrap();
                let combined = combine_scores(&intra, &inter, true, true).unwrap();
                prop_assert!(combined.get("w").unwrap().iter().all(|x| *x > 0.0));
            }
        }
    }
}
