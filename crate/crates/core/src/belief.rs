//! Weighted particle belief with a sequential importance resampling update.

use rayon::prelude::*;

use crate::error::{PlanError, Result};
use crate::model::{ActionId, Obs, ProblemModel, StateBatch};
use crate::rng::{tags, StreamKey};

/// Propagate-reweight attempts after the first one before giving up.
pub const DEPRIVATION_RETRIES: u32 = 3;

#[derive(Debug, Clone)]
pub struct ParticleBelief<S> {
    particles: StateBatch<S>,
    weights: Vec<f64>,
}

/// Result of one filter update.
#[derive(Debug, Clone)]
pub struct UpdateOutcome<S> {
    pub belief: ParticleBelief<S>,
    /// Every attempt gave zero total weight; `belief` holds the propagated
    /// particles with uniform weights.
    pub degenerate: bool,
    pub attempts: u32,
    /// `|sum(w) - 1|` of the returned weights.
    pub weight_error: f64,
}

impl<S: Clone + Send + Sync> ParticleBelief<S> {
    pub fn new(particles: StateBatch<S>, weights: Vec<f64>) -> Result<Self> {
        if particles.is_empty() {
            return Err(PlanError::Config(
                "a particle belief needs at least one particle".into(),
            ));
        }
        if weights.len() != particles.len() {
            return Err(PlanError::LengthMismatch {
                what: "particle weights",
                got: weights.len(),
                expected: particles.len(),
            });
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) || weights.iter().any(|&w| w < 0.0) {
            return Err(PlanError::Config(
                "particle weights must be non-negative with positive sum".into(),
            ));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(ParticleBelief { particles, weights })
    }

    pub fn uniform(particles: StateBatch<S>) -> Result<Self> {
        let m = particles.len();
        Self::new(particles, vec![1.0; m.max(1)])
    }

    /// `m` independent draws from the model's initial distribution.
    pub fn from_model<M>(model: &M, m: usize, key: StreamKey) -> Result<Self>
    where
        M: ProblemModel<State = S> + ?Sized,
    {
        Self::uniform(model.sample_initial_states(m, key))
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn particles(&self) -> &StateBatch<S> {
        &self.particles
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight_error(&self) -> f64 {
        (self.weights.iter().sum::<f64>() - 1.0).abs()
    }

    /// Probability mass of the particles satisfying `pred`.
    pub fn probability<F: Fn(&S) -> bool>(&self, pred: F) -> f64 {
        self.particles
            .states()
            .iter()
            .zip(&self.weights)
            .filter(|(s, _)| pred(s))
            .map(|(_, w)| w)
            .sum()
    }

    /// `n` draws with replacement; row `i` inverts the weight CDF at the first
    /// uniform of `key.rng(i)`.
    pub fn sample_states(&self, n: usize, key: StreamKey) -> StateBatch<S> {
        let mut cdf = Vec::with_capacity(self.weights.len());
        let mut acc = 0.0;
        for &w in &self.weights {
            acc += w;
            cdf.push(acc);
        }
        let last = self.weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
        let idx: Vec<usize> = (0..n)
            .into_par_iter()
            .with_min_len(1024)
            .map(|i| {
                let t = key.rng(i as u64).uniform() * acc;
                cdf.partition_point(|&c| c <= t).min(last)
            })
            .collect();
        self.particles.gather(&idx)
    }

    /// SIR update with no directly observed state components.
    pub fn update<M>(
        &self,
        model: &M,
        action: ActionId,
        obs: Obs,
        key: StreamKey,
    ) -> Result<UpdateOutcome<S>>
    where
        M: ProblemModel<State = S> + ?Sized,
    {
        self.update_with(model, action, obs, key, |_| true)
    }

    /// SIR update. `reconcile` sees each propagated particle, may overwrite the
    /// components the agent observes directly, and returns `false` if the
    /// particle contradicts them (its weight becomes zero).
    pub fn update_with<M, F>(
        &self,
        model: &M,
        action: ActionId,
        obs: Obs,
        key: StreamKey,
        reconcile: F,
    ) -> Result<UpdateOutcome<S>>
    where
        M: ProblemModel<State = S> + ?Sized,
        F: Fn(&mut S) -> bool + Sync,
    {
        let spec = model.spec();
        spec.check_action(action)?;
        if !spec.is_valid_observation(obs) {
            return Err(PlanError::InvalidObservation(obs));
        }
        let actions = vec![action; self.len()];
        let mut fallback = None;
        for attempt in 0..=DEPRIVATION_RETRIES {
            let k = key.child(tags::UPDATE).child(attempt as u64);
            let step = model.step_batch(&self.particles, &actions, k)?;
            let mut states = step.next_states.into_states();
            let consistent: Vec<bool> = states.par_iter_mut().map(&reconcile).collect();
            let propagated = StateBatch::from_model(model, states);
            let loglik = model.observation_log_likelihood(&propagated, action, obs)?;
            let weights: Vec<f64> = self
                .weights
                .iter()
                .zip(&loglik)
                .zip(&consistent)
                .map(|((&w, &ll), &ok)| if ok { w * ll.exp() } else { 0.0 })
                .collect();
            let total: f64 = weights.iter().sum();
            if total > 0.0 && total.is_finite() {
                let normalized: Vec<f64> = weights.iter().map(|w| w / total).collect();
                let resample_key = key.child(tags::RESAMPLE).child(attempt as u64);
                let idx = systematic_resample(&normalized, resample_key.rng(0).uniform());
                let m = idx.len();
                let belief = ParticleBelief {
                    particles: propagated.gather(&idx),
                    weights: vec![1.0 / m as f64; m],
                };
                let weight_error = belief.weight_error();
                return Ok(UpdateOutcome {
                    belief,
                    degenerate: false,
                    attempts: attempt + 1,
                    weight_error,
                });
            }
            if fallback.is_none() {
                fallback = Some(propagated);
            }
        }
        let particles = fallback.expect("at least one attempt");
        let m = particles.len();
        log::warn!("particle deprivation: action {action}, observation {obs}; keeping propagated particles");
        let belief = ParticleBelief {
            particles,
            weights: vec![1.0 / m as f64; m],
        };
        let weight_error = belief.weight_error();
        Ok(UpdateOutcome {
            belief,
            degenerate: true,
            attempts: DEPRIVATION_RETRIES + 1,
            weight_error,
        })
    }
}

/// Low-variance resampling: `m` evenly spaced pointers offset by `u / m`.
pub fn systematic_resample(weights: &[f64], u: f64) -> Vec<usize> {
    let m = weights.len();
    let step = 1.0 / m as f64;
    let last = weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
    let mut out = Vec::with_capacity(m);
    let mut acc = weights[0];
    let mut i = 0;
    for j in 0..m {
        let t = (u + j as f64) * step;
        while acc <= t && i < last {
            i += 1;
            acc += weights[i];
        }
        out.push(i);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::tabular::{tiger, TIGER_LEFT, TIGER_RIGHT};

    fn batch(v: Vec<u32>) -> StateBatch<u32> {
        let n = v.len();
        StateBatch::from_parts(v, vec![false; n]).unwrap()
    }

    #[test]
    fn single_particle_copies() {
        let b = ParticleBelief::uniform(batch(vec![42])).unwrap();
        assert_eq!(b.sample_states(5, StreamKey::new(1)).states(), &[42; 5]);
    }

    #[test]
    fn zero_weight_never_drawn() {
        let b = ParticleBelief::new(batch(vec![0, 1]), vec![1.0, 0.0]).unwrap();
        assert!(b
            .sample_states(10_000, StreamKey::new(2))
            .states()
            .iter()
            .all(|&s| s == 0));
        let b = ParticleBelief::new(batch(vec![0, 1, 2]), vec![0.0, 1.0, 0.0]).unwrap();
        assert!(b
            .sample_states(10_000, StreamKey::new(2))
            .states()
            .iter()
            .all(|&s| s == 1));
    }

    #[test]
    fn draw_frequencies() {
        let b = ParticleBelief::new(batch(vec![0, 1]), vec![0.25, 0.75]).unwrap();
        let n = 100_000;
        let ones = b
            .sample_states(n, StreamKey::new(3))
            .states()
            .iter()
            .filter(|&&s| s == 1)
            .count();
        let sd = (n as f64 * 0.25 * 0.75).sqrt();
        assert!((ones as f64 - 0.75 * n as f64).abs() < 3.0 * sd);
    }

    #[test]
    fn systematic_counts_are_near_proportional() {
        let w = [0.1, 0.0, 0.6, 0.3];
        for k in 0..20 {
            let idx = systematic_resample(&w, k as f64 / 20.0);
            let mut c = [0usize; 4];
            for i in idx {
                c[i] += 1;
            }
            assert_eq!(c[1], 0);
            for (ci, wi) in c.iter().zip(&w) {
                assert!((*ci as f64 - wi * 4.0).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn systematic_resampling_is_unbiased() {
        // E[f] under resampling equals the weighted mean, checked at 3 sigma.
        let w = [0.05, 0.15, 0.5, 0.3];
        let f = [1.0, -2.0, 0.5, 4.0];
        let exact: f64 = w.iter().zip(&f).map(|(a, b)| a * b).sum();
        let trials = 20_000;
        let key = StreamKey::new(17);
        let est: Vec<f64> = (0..trials)
            .map(|t| {
                let idx = systematic_resample(&w, key.rng(t).uniform());
                idx.iter().map(|&i| f[i]).sum::<f64>() / 4.0
            })
            .collect();
        let mean = est.iter().sum::<f64>() / trials as f64;
        let var = est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        assert!((mean - exact).abs() < 3.0 * (var / trials as f64).sqrt() + 1e-12);
    }

    #[test]
    fn deterministic_evidence_concentrates() {
        // Noiseless listening: hearing left rules out tiger-right.
        let model = tiger(1.0);
        let b = ParticleBelief::uniform(batch(vec![TIGER_LEFT, TIGER_RIGHT])).unwrap();
        let out = b.update(&model, 0, 0, StreamKey::new(5)).unwrap();
        assert!(!out.degenerate);
        assert!(out
            .belief
            .particles()
            .states()
            .iter()
            .all(|&s| s == TIGER_LEFT));
        assert!(out.weight_error < 1e-9);
    }

    #[test]
    fn deprivation_is_flagged() {
        let model = tiger(1.0);
        let b = ParticleBelief::uniform(batch(vec![TIGER_LEFT; 8])).unwrap();
        let out = b.update(&model, 0, 1, StreamKey::new(5)).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.attempts, DEPRIVATION_RETRIES + 1);
        assert_eq!(out.belief.len(), 8);
        assert!(out.weight_error < 1e-9);
    }

    #[test]
    fn reconcile_rejects_contradictions() {
        let model = tiger(0.85);
        let b = ParticleBelief::uniform(batch(vec![TIGER_LEFT, TIGER_RIGHT])).unwrap();
        let out = b
            .update_with(&model, 0, 0, StreamKey::new(5), |s| *s == TIGER_RIGHT)
            .unwrap();
        assert!(out
            .belief
            .particles()
            .states()
            .iter()
            .all(|&s| s == TIGER_RIGHT));
    }
}
