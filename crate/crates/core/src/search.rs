//! Coefficient search drivers: exhaustive grid over a uniform λ and a
//! budgeted ask/tell evolution-strategy loop for per-task coefficients.
//!
//! Fitness evaluations are cached by the parameter vector rounded to four
//! decimals; the cached evaluation runs on the rounded representative, so a
//! cache key always maps to the fitness of one concrete vector and repeated
//! near-identical samples cost nothing.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::cma::{cma_ask, cma_init, cma_tell, SearchSpace};
use crate::error::{Error, Result};

/// Outcome of a search: the best vector found, its fitness, and the full
/// evaluation history in evaluation order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitnessReport {
    pub best_params: Vec<f32>,
    pub best_fitness: f32,
    pub evaluations_used: usize,
    pub history: Vec<(Vec<f32>, f32)>,
}

/// Inclusive decimal grid from `lo` to `hi`: 0.2:1.5 step 0.1 gives 14
/// candidates, 0.8:2.5 gives 18.
pub fn grid_candidates(lo: f32, hi: f32, step: f32) -> Result<Vec<f32>> {
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "grid step must be positive, got {step}"
        )));
    }
    if lo > hi {
        return Err(Error::InvalidConfig(format!(
            "grid range must satisfy lo <= hi, got {lo}:{hi}"
        )));
    }
    let snap = |x: f64| (x * 1e6).round() / 1e6;
    let (lo, hi, step) = (snap(lo as f64), snap(hi as f64), snap(step as f64));
    let mut out = Vec::new();
    let mut i = 0u32;
    loop {
        let v = snap(lo + i as f64 * step);
        if v > hi + 1e-9 {
            break;
        }
        out.push(v as f32);
        i += 1;
    }
    Ok(out)
}

/// Evaluates each candidate λ replicated across `dim` coordinates and
/// returns the argmax; ties go to the smaller λ.
pub fn grid_search<F>(candidates: &[f32], dim: usize, mut fitness: F) -> Result<FitnessReport>
where
    F: FnMut(&[f32]) -> Result<f32>,
{
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("grid needs at least one candidate".into()));
    }
    let mut history = Vec::with_capacity(candidates.len());
    let mut best: Option<(f32, f32)> = None;
    for &lambda in candidates {
        let params = vec![lambda; dim];
        let fit = fitness(&params)?;
        if !fit.is_finite() {
            return Err(Error::NonFiniteFitness {
                params: params.iter().map(|x| *x as f64).collect(),
            });
        }
        history.push((params, fit));
        best = Some(match best {
            None => (lambda, fit),
            Some((bl, bf)) if fit > bf || (fit == bf && lambda < bl) => (lambda, fit),
            Some(b) => b,
        });
    }
    let (best_lambda, best_fitness) = best.expect("non-empty candidates");
    Ok(FitnessReport {
        best_params: vec![best_lambda; dim],
        best_fitness,
        evaluations_used: history.len(),
        history,
    })
}

fn cache_key(params: &[f32]) -> Vec<i64> {
    params
        .iter()
        .map(|x| (*x as f64 * 1e4).round() as i64)
        .collect()
}

/// Ask/tell loop until the sample budget is exhausted; returns the best
/// evaluated vector. Each generation consumes population_size budget;
/// duplicate rounded vectors are served from the cache without invoking
/// the fitness function again.
pub fn search<F>(space: &SearchSpace, mut fitness: F, budget: usize, seed: u64) -> Result<FitnessReport>
where
    F: FnMut(&[f32]) -> Result<f32>,
{
    space.validate()?;
    let mut state = cma_init(space, seed, None);
    if budget < state.population_size {
        return Err(Error::InvalidConfig(format!(
            "budget {budget} is below the population size {}",
            state.population_size
        )));
    }
    let mut cache: BTreeMap<Vec<i64>, f32> = BTreeMap::new();
    let mut history = Vec::new();
    let mut best_params = Vec::new();
    let mut best_fitness = f32::NEG_INFINITY;
    let mut sampled = 0usize;

    while sampled + state.population_size <= budget {
        let samples = cma_ask(&mut state);
        sampled += samples.len();
        let mut fits = Vec::with_capacity(samples.len());
        for sample in &samples {
            let key = cache_key(sample);
            let rounded: Vec<f32> = key.iter().map(|k| *k as f32 / 1e4).collect();
            let fit = match cache.get(&key) {
                Some(f) => *f,
                None => {
                    let f = fitness(&rounded)?;
                    if !f.is_finite() {
                        return Err(Error::NonFiniteFitness {
                            params: rounded.iter().map(|x| *x as f64).collect(),
                        });
                    }
                    cache.insert(key, f);
                    history.push((rounded.clone(), f));
                    f
                }
            };
            if fit > best_fitness {
                best_fitness = fit;
                best_params = rounded;
            }
            fits.push(fit);
        }
        state = cma_tell(state, &samples, &fits)?;
    }

    Ok(FitnessReport {
        best_params,
        best_fitness,
        evaluations_used: cache.len(),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(x: &[f32]) -> Result<f32> {
        Ok(-x.iter().map(|v| v * v).sum::<f32>())
    }

    #[test]
    fn grid_counts_match_inclusive_ranges() {
        assert_eq!(grid_candidates(0.2, 1.5, 0.1).unwrap().len(), 14);
        assert_eq!(grid_candidates(0.8, 2.5, 0.1).unwrap().len(), 18);
        assert_eq!(grid_candidates(1.0, 1.0, 0.1).unwrap(), vec![1.0]);
        assert!(grid_candidates(1.0, 0.5, 0.1).is_err());
        assert!(grid_candidates(0.5, 1.0, 0.0).is_err());
    }

    #[test]
    fn grid_finds_quadratic_argmax() {
        let candidates = grid_candidates(0.2, 1.5, 0.1).unwrap();
        let report = grid_search(&candidates, 1, |p| Ok(-(p[0] - 0.7).powi(2))).unwrap();
        assert!((report.best_params[0] - 0.7).abs() <= 1e-6);
        assert_eq!(report.evaluations_used, 14);
        assert_eq!(report.history.len(), 14);
    }

    #[test]
    fn grid_single_candidate_is_returned() {
        let report = grid_search(&[1.3], 2, |_| Ok(f32::MIN)).unwrap();
        assert_eq!(report.best_params, vec![1.3, 1.3]);
    }

    #[test]
    fn grid_ties_break_toward_smaller_lambda() {
        let report = grid_search(&[0.9, 0.5, 0.7], 1, |_| Ok(1.0)).unwrap();
        assert_eq!(report.best_params, vec![0.5]);
    }

    #[test]
    fn grid_replicates_lambda_across_dimensions() {
        let report = grid_search(&[0.5, 1.5], 3, |p| {
            assert_eq!(p.len(), 3);
            assert!(p.iter().all(|x| *x == p[0]));
            Ok(-p[0])
        })
        .unwrap();
        assert_eq!(report.best_params, vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn budget_of_one_population_runs_one_generation() {
        let space = SearchSpace::with_bounds(3, -5.0, 5.0).unwrap();
        let pop = crate::cma::default_population(3);
        let mut calls = 0usize;
        let report = search(
            &space,
            |p| {
                calls += 1;
                sphere(p)
            },
            pop,
            0,
        )
        .unwrap();
        assert!(calls <= pop);
        assert_eq!(report.evaluations_used, calls);
        assert_eq!(report.history.len(), calls);
    }

    #[test]
    fn cache_counts_distinct_rounded_vectors() {
        let space = SearchSpace::with_bounds(2, -5.0, 5.0).unwrap();
        let mut calls = 0usize;
        let report = search(
            &space,
            |p| {
                calls += 1;
                sphere(p)
            },
            600,
            1,
        )
        .unwrap();
        assert_eq!(report.evaluations_used, calls);
        assert_eq!(report.history.len(), calls);
        assert!(calls <= 600);
        // Convergence collapses samples onto few rounded vectors.
        assert!(calls < 600, "every sample was distinct");
    }

    #[test]
    fn search_is_deterministic() {
        let space = SearchSpace::with_bounds(3, -5.0, 5.0).unwrap();
        let a = search(&space, sphere, 400, 7).unwrap();
        let b = search(&space, sphere, 400, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn best_fitness_is_max_over_history() {
        let space = SearchSpace::with_bounds(2, -5.0, 5.0).unwrap();
        let report = search(&space, sphere, 300, 3).unwrap();
        let max = report
            .history
            .iter()
            .map(|(_, f)| *f)
            .fold(f32::NEG_INFINITY, f32::max);
        assert_eq!(report.best_fitness, max);
    }

    #[test]
    fn more_budget_never_hurts() {
        let space = SearchSpace::with_bounds(2, -5.0, 5.0).unwrap();
        let short = search(&space, sphere, 120, 5).unwrap();
        let long = search(&space, sphere, 480, 5).unwrap();
        assert!(long.best_fitness >= short.best_fitness);
    }

    #[test]
    fn sphere_smoke_convergence() {
        let space = SearchSpace::with_bounds(2, -5.0, 5.0).unwrap();
        let report = search(&space, sphere, 600, 0).unwrap();
        assert!(report.best_fitness > -1e-4, "got {}", report.best_fitness);
    }

    #[test]
    fn undersized_budget_is_rejected() {
        let space = SearchSpace::with_bounds(3, -5.0, 5.0).unwrap();
        assert!(matches!(
            search(&space, sphere, 3, 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn fitness_errors_propagate() {
        let space = SearchSpace::with_bounds(2, -5.0, 5.0).unwrap();
        let result = search(
            &space,
            |_: &[f32]| -> Result<f32> { Err(Error::UnparsableOutput("no score".into())) },
            100,
            0,
        );
        assert!(matches!(result, Err(Error::UnparsableOutput(_))));
    }
}
