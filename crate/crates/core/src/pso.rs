//! Particle swarm minimization over the unit hypercube.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsoConfig {
    pub swarm_size: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for PsoConfig {
    fn default() -> Self {
        PsoConfig {
            swarm_size: 40,
            inertia: 0.729,
            cognitive: 1.494,
            social: 1.494,
            iterations: 60,
            seed: 0,
        }
    }
}

impl PsoConfig {
    pub fn validate(&self) -> Result<(), crate::ModelError> {
        if self.swarm_size < 2 {
            return Err(crate::ModelError::param("pso.swarm_size", "must be >= 2"));
        }
        for (name, v) in [
            ("pso.inertia", self.inertia),
            ("pso.cognitive", self.cognitive),
            ("pso.social", self.social),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(crate::ModelError::param(name, "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// How fitness evaluations of one iteration are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Evaluation {
    #[default]
    Parallel,
    Sequential,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsoResult {
    pub best: Vec<f64>,
    pub best_value: f64,
    /// Global best after initialization and after every iteration.
    pub history: Vec<f64>,
    pub evaluations: usize,
}

struct Particle {
    x: Vec<f64>,
    v: Vec<f64>,
    best: Vec<f64>,
    best_value: f64,
    rng: ChaCha8Rng,
}

fn evaluate<F>(f: &F, particles: &[Particle], mode: Evaluation) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    match mode {
        #[cfg(feature = "parallel")]
        Evaluation::Parallel => particles.par_iter().map(|p| f(&p.x)).collect(),
        _ => particles.iter().map(|p| f(&p.x)).collect(),
    }
}

/// Minimizes `f` over `[0, 1]^dim`. Each `initial` point replaces one random
/// starting particle. Every particle draws from its own random stream
/// derived from the seed, so results do not depend on `mode`.
///
/// Particles leaving the box are put back on the violated bound and their
/// velocity component is reversed and halved.
pub fn minimize<F>(f: F, dim: usize, initial: &[Vec<f64>], config: &PsoConfig, mode: Evaluation) -> PsoResult
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let n = config.swarm_size.max(initial.len()).max(1);
    let mut particles: Vec<Particle> = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            let x: Vec<f64> = match initial.get(i) {
                Some(p) => p.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
                None => (0..dim).map(|_| rng.gen::<f64>()).collect(),
            };
            let v = (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
            Particle {
                best: x.clone(),
                x,
                v,
                best_value: f64::INFINITY,
                rng,
            }
        })
        .collect();

    let mut best = vec![0.0; dim];
    let mut best_value = f64::INFINITY;
    let mut history = Vec::with_capacity(config.iterations + 1);
    let mut evaluations = 0;

    for iteration in 0..=config.iterations {
        if iteration > 0 {
            for p in particles.iter_mut() {
                for d in 0..dim {
                    let r1: f64 = p.rng.gen();
                    let r2: f64 = p.rng.gen();
                    let v = config.inertia * p.v[d]
                        + config.cognitive * r1 * (p.best[d] - p.x[d])
                        + config.social * r2 * (best[d] - p.x[d]);
                    let mut v = v.clamp(-1.0, 1.0);
                    let mut x = p.x[d] + v;
                    if x < 0.0 {
                        x = 0.0;
                        v *= -0.5;
                    } else if x > 1.0 {
                        x = 1.0;
                        v *= -0.5;
                    }
                    p.x[d] = x;
                    p.v[d] = v;
                }
            }
        }
        let values = evaluate(&f, &particles, mode);
        evaluations += values.len();
        for (p, &value) in particles.iter_mut().zip(&values) {
            if value < p.best_value {
                p.best_value = value;
                p.best.clone_from(&p.x);
            }
            if value < best_value {
                best_value = value;
                best.clone_from(&p.x);
            }
        }
        history.push(best_value);
    }

    PsoResult {
        best,
        best_value,
        history,
        evaluations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(target: &[f64]) -> impl Fn(&[f64]) -> f64 + Sync + '_ {
        move |x: &[f64]| x.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum()
    }

    #[test]
    fn finds_an_interior_minimum() {
        let target = [0.3, 0.7, 0.5];
        let r = minimize(sphere(&target), 3, &[], &PsoConfig::default(), Evaluation::Sequential);
        assert!(r.best_value < 1e-6, "{}", r.best_value);
    }

    #[test]
    fn reaches_corner_optima_exactly() {
        let f = |x: &[f64]| x[0] + (1.0 - x[1]);
        let r = minimize(f, 2, &[], &PsoConfig::default(), Evaluation::Sequential);
        assert_eq!(r.best, vec![0.0, 1.0]);
        assert_eq!(r.best_value, 0.0);
    }

    #[test]
    fn history_never_increases() {
        let target = [0.1, 0.9];
        let r = minimize(sphere(&target), 2, &[], &PsoConfig::default(), Evaluation::Sequential);
        assert_eq!(r.history.len(), 61);
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*r.history.last().unwrap(), r.best_value);
    }

    #[test]
    fn injected_particle_bounds_the_result() {
        let f = |x: &[f64]| (x[0] - 0.25).abs();
        let cfg = PsoConfig {
            iterations: 0,
            ..PsoConfig::default()
        };
        let r = minimize(f, 1, &[vec![0.25]], &cfg, Evaluation::Sequential);
        assert_eq!(r.best_value, 0.0);
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let target = [0.2, 0.4, 0.6, 0.8];
        let cfg = PsoConfig {
            seed: 17,
            ..PsoConfig::default()
        };
        let a = minimize(sphere(&target), 4, &[], &cfg, Evaluation::Sequential);
        let b = minimize(sphere(&target), 4, &[], &cfg, Evaluation::Parallel);
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let target = [0.2, 0.4];
        let mut cfg = PsoConfig {
            iterations: 2,
            ..PsoConfig::default()
        };
        let a = minimize(sphere(&target), 2, &[], &cfg, Evaluation::Sequential);
        cfg.seed = 99;
        let b = minimize(sphere(&target), 2, &[], &cfg, Evaluation::Sequential);
        assert_ne!(a.best, b.best);
    }
}
