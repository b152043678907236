//! Covariance matrix adaptation evolution strategy over a box-constrained
//! search space, in the canonical (μ/μ_w, λ) form: rank by fitness, move the
//! mean by weighted recombination, adapt the covariance with rank-1 and
//! rank-μ updates, and adapt the step size by cumulative path length.
//!
//! Maximization convention: higher fitness is better. All internal state is
//! f64; sampled parameter vectors cross the API boundary as f32.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Box constraints for the coefficient search.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dim: usize,
    pub lower: f32,
    pub upper: f32,
}

impl SearchSpace {
    /// Default coefficient range used for merging searches.
    pub fn new(dim: usize) -> Self {
        SearchSpace {
            dim,
            lower: 0.8,
            upper: 2.5,
        }
    }

    pub fn with_bounds(dim: usize, lower: f32, upper: f32) -> Result<Self> {
        let space = SearchSpace { dim, lower, upper };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidConfig("search space needs dim >= 1".into()));
        }
        if !(self.lower < self.upper) {
            return Err(Error::InvalidConfig(format!(
                "search bounds must satisfy lower < upper, got [{}, {}]",
                self.lower, self.upper
            )));
        }
        Ok(())
    }
}

/// Optimizer state carried between ask/tell steps.
#[derive(Debug, Clone)]
pub struct CmaState {
    pub space: SearchSpace,
    pub mean: DVector<f64>,
    pub sigma: f64,
    pub covariance: DMatrix<f64>,
    pub path_sigma: DVector<f64>,
    pub path_c: DVector<f64>,
    pub generation: u32,
    pub population_size: usize,
    rng: ChaCha8Rng,
}

/// Default population size: 4 + ⌊3·ln(dim)⌋.
pub fn default_population(dim: usize) -> usize {
    4 + (3.0 * (dim as f64).ln()).floor() as usize
}

/// Mean at the box center, sigma at 20% of the box width, identity
/// covariance, zero evolution paths.
pub fn cma_init(space: &SearchSpace, seed: u64, population_size: Option<usize>) -> CmaState {
    let dim = space.dim;
    let center = (space.lower as f64 + space.upper as f64) / 2.0;
    CmaState {
        space: *space,
        mean: DVector::from_element(dim, center),
        sigma: 0.2 * (space.upper as f64 - space.lower as f64),
        covariance: DMatrix::identity(dim, dim),
        path_sigma: DVector::zeros(dim),
        path_c: DVector::zeros(dim),
        generation: 0,
        population_size: population_size.unwrap_or_else(|| default_population(dim)),
        rng: ChaCha8Rng::seed_from_u64(seed),
    }
}

/// Eigendecomposition of the covariance with eigenvalues clamped positive.
fn covariance_sqrt(c: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let eigen = nalgebra::SymmetricEigen::new(c.clone());
    let values = eigen.eigenvalues.map(|v| v.max(1e-30));
    (eigen.eigenvectors, values)
}

/// Draws population_size samples from N(mean, sigma²·C), clipping each
/// coordinate into the box.
pub fn cma_ask(state: &mut CmaState) -> Vec<Vec<f32>> {
    let dim = state.space.dim;
    let (basis, eigenvalues) = covariance_sqrt(&state.covariance);
    let scale = eigenvalues.map(f64::sqrt);
    (0..state.population_size)
        .map(|_| {
            let z = DVector::from_fn(dim, |_, _| state.rng.sample::<f64, _>(StandardNormal));
            let y = &basis * z.component_mul(&scale);
            (0..dim)
                .map(|i| {
                    let x = state.mean[i] + state.sigma * y[i];
                    (x as f32).clamp(state.space.lower, state.space.upper)
                })
                .collect()
        })
        .collect()
}

/// Ranks the population (higher fitness first, ties by sample index) and
/// applies the recombination, path, covariance, and step-size updates.
pub fn cma_tell(mut state: CmaState, samples: &[Vec<f32>], fitnesses: &[f32]) -> Result<CmaState> {
    let dim = state.space.dim;
    let pop = state.population_size;
    if samples.len() != pop || fitnesses.len() != pop {
        return Err(Error::LengthMismatch(format!(
            "expected {pop} samples and fitnesses, got {} and {}",
            samples.len(),
            fitnesses.len()
        )));
    }
    for (s, f) in samples.iter().zip(fitnesses) {
        if s.len() != dim {
            return Err(Error::LengthMismatch(format!(
                "sample has {} coordinates, search space has {dim}",
                s.len()
            )));
        }
        if !f.is_finite() {
            return Err(Error::NonFiniteFitness {
                params: s.iter().map(|x| *x as f64).collect(),
            });
        }
    }

    let mut order: Vec<usize> = (0..pop).collect();
    order.sort_by(|&a, &b| fitnesses[b].total_cmp(&fitnesses[a]).then(a.cmp(&b)));

    // Canonical strategy parameters.
    let n = dim as f64;
    let mu = pop / 2;
    let mut weights: Vec<f64> = (0..mu)
        .map(|i| ((mu as f64) + 0.5).ln() - ((i + 1) as f64).ln())
        .collect();
    let wsum: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= wsum;
    }
    let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
    let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
    let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
    let c_1 = 2.0 / ((n + 1.3).powi(2) + mu_eff);
    let c_mu = (2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0).powi(2) + mu_eff))
        .min(1.0 - c_1);
    let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));

    // Steps of the selected samples in the pre-update frame.
    let ys: Vec<DVector<f64>> = order[..mu]
        .iter()
        .map(|&idx| {
            DVector::from_fn(dim, |i, _| {
                (samples[idx][i] as f64 - state.mean[i]) / state.sigma
            })
        })
        .collect();
    let mut y_w = DVector::zeros(dim);
    for (w, y) in weights.iter().zip(&ys) {
        y_w += y * *w;
    }

    state.mean += &y_w * state.sigma;

    // C^{-1/2}·y_w for the step-size path.
    let (basis, eigenvalues) = covariance_sqrt(&state.covariance);
    let inv_sqrt = eigenvalues.map(|v| 1.0 / v.sqrt());
    let whitened = &basis * (basis.transpose() * &y_w).component_mul(&inv_sqrt);

    state.path_sigma = &state.path_sigma * (1.0 - c_sigma)
        + whitened * (c_sigma * (2.0 - c_sigma) * mu_eff).sqrt();

    let gen1 = (state.generation + 1) as f64;
    let ps_norm = state.path_sigma.norm();
    let h_sigma = ps_norm / (1.0 - (1.0 - c_sigma).powf(2.0 * gen1)).sqrt()
        < (1.4 + 2.0 / (n + 1.0)) * chi_n;

    state.path_c = &state.path_c * (1.0 - c_c)
        + &y_w * if h_sigma {
            (c_c * (2.0 - c_c) * mu_eff).sqrt()
        } else {
            0.0
        };

    // Rank-1 plus rank-μ covariance update; the (1 − h_σ) term compensates
    // for the frozen rank-1 path.
    let delta_h = if h_sigma { 0.0 } else { c_c * (2.0 - c_c) };
    let mut cov = &state.covariance * (1.0 - c_1 - c_mu + c_1 * delta_h);
    cov += &state.path_c * state.path_c.transpose() * c_1;
    for (w, y) in weights.iter().zip(&ys) {
        cov += y * y.transpose() * (c_mu * w);
    }
    // Rounding can desymmetrize the accumulated outer products.
    state.covariance = (&cov + cov.transpose()) * 0.5;

    let exponent = (c_sigma / d_sigma) * (ps_norm / chi_n - 1.0);
    state.sigma *= exponent.min(1.0).exp();
    state.generation += 1;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(x: &[f32]) -> f32 {
        -x.iter().map(|v| v * v).sum::<f32>()
    }

    #[test]
    fn init_matches_documented_defaults() {
        let space = SearchSpace::new(3);
        let state = cma_init(&space, 0, None);
        assert_eq!(state.population_size, 7);
        assert!((state.sigma - 0.34).abs() < 1e-6);
        for i in 0..3 {
            assert!((state.mean[i] - 1.65).abs() < 1e-6);
        }
        assert_eq!(state.covariance, DMatrix::identity(3, 3));

        let state = cma_init(&SearchSpace::new(1), 0, None);
        assert_eq!(state.population_size, 4);
        let state = cma_init(&SearchSpace::new(3), 0, Some(12));
        assert_eq!(state.population_size, 12);
    }

    #[test]
    fn same_seed_gives_identical_population() {
        let space = SearchSpace::with_bounds(4, -2.0, 2.0).unwrap();
        let mut a = cma_init(&space, 42, None);
        let mut b = cma_init(&space, 42, None);
        assert_eq!(cma_ask(&mut a), cma_ask(&mut b));
        let mut c = cma_init(&space, 43, None);
        assert_ne!(cma_ask(&mut a), cma_ask(&mut c));
    }

    #[test]
    fn samples_stay_inside_box() {
        let space = SearchSpace::with_bounds(3, 0.8, 2.5).unwrap();
        let mut state = cma_init(&space, 7, None);
        state.sigma = 10.0;
        for _ in 0..20 {
            for sample in cma_ask(&mut state) {
                for x in sample {
                    assert!((0.8..=2.5).contains(&x));
                }
            }
        }
    }

    #[test]
    fn vanishing_sigma_collapses_to_mean() {
        let space = SearchSpace::with_bounds(2, -1.0, 1.0).unwrap();
        let mut state = cma_init(&space, 5, None);
        state.sigma = 1e-12;
        for sample in cma_ask(&mut state) {
            for x in sample {
                assert!(x.abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn equal_fitness_barely_moves_mean() {
        let space = SearchSpace::with_bounds(3, -5.0, 5.0).unwrap();
        let mut state = cma_init(&space, 0, None);
        let before = state.mean.clone();
        let sigma = state.sigma;
        let samples = cma_ask(&mut state);
        let fits = vec![1.0f32; samples.len()];
        let state = cma_tell(state, &samples, &fits).unwrap();
        assert!((state.mean - before).norm() <= sigma);
    }

    #[test]
    fn sphere_mean_converges_toward_origin() {
        // Asymmetric box so the starting mean (the center) is off-optimum.
        let run = || {
            let space = SearchSpace::with_bounds(3, -1.0, 5.0).unwrap();
            let mut state = cma_init(&space, 0, None);
            let mut distances = vec![state.mean.norm()];
            for _ in 0..50 {
                let samples = cma_ask(&mut state);
                let fits: Vec<f32> = samples.iter().map(|s| sphere(s)).collect();
                state = cma_tell(state, &samples, &fits).unwrap();
                distances.push(state.mean.norm());
            }
            distances
        };
        let distances = run();
        // Windowed decrease: every 10 generations the distance shrinks.
        for w in (0..=40).step_by(10) {
            assert!(
                distances[w + 10] < distances[w],
                "window {w}: {distances:?}"
            );
        }
        assert!(distances[50] < 1e-3 * distances[0]);
        assert_eq!(distances, run());
    }

    #[test]
    fn covariance_stays_symmetric_positive_definite() {
        let space = SearchSpace::with_bounds(3, -5.0, 5.0).unwrap();
        let mut state = cma_init(&space, 9, None);
        for _ in 0..100 {
            let samples = cma_ask(&mut state);
            let fits: Vec<f32> = samples.iter().map(|s| sphere(s)).collect();
            state = cma_tell(state, &samples, &fits).unwrap();
            let c = &state.covariance;
            assert_eq!(c, &c.transpose());
            let eigen = nalgebra::SymmetricEigen::new(c.clone());
            assert!(eigen.eigenvalues.iter().all(|v| *v > 0.0));
            assert!(state.sigma > 0.0);
        }
    }

    #[test]
    fn tell_rejects_malformed_input() {
        let space = SearchSpace::with_bounds(2, -1.0, 1.0).unwrap();
        let mut state = cma_init(&space, 0, None);
        let samples = cma_ask(&mut state);
        let short = vec![0.0f32; samples.len() - 1];
        assert!(matches!(
            cma_tell(state.clone(), &samples, &short),
            Err(Error::LengthMismatch(_))
        ));
        let mut fits = vec![0.0f32; samples.len()];
        fits[1] = f32::NAN;
        assert!(matches!(
            cma_tell(state, &samples, &fits),
            Err(Error::NonFiniteFitness { .. })
        ));
    }

    #[test]
    fn bad_spaces_are_rejected() {
        assert!(SearchSpace::with_bounds(0, 0.0, 1.0).is_err());
        assert!(SearchSpace::with_bounds(2, 1.0, 1.0).is_err());
        assert!(SearchSpace::with_bounds(2, 2.0, 1.0).is_err());
    }
}
