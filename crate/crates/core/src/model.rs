//! Problem contract: batched generative stepping, observation likelihoods,
//! initial-state sampling, reference log-probabilities and leaf heuristics.
//!
//! Terminal states are absorbing: stepping a terminal row returns the same
//! state, reward `0.0` and [`TERMINAL_OBS`], so every batch keeps its width
//! through the whole search.

use std::collections::BTreeMap;
use std::fmt::Debug;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PlanError, Result};
use crate::rng::{CounterRng, StreamKey};

pub type ActionId = u32;
pub type Obs = u32;

/// Reserved observation emitted only by absorbing self-loops.
pub const TERMINAL_OBS: Obs = u32::MAX - 1;

/// Problem-specific episode counters (rocks sampled, bumps, yells, ...).
pub type Counters = BTreeMap<String, f64>;

const PAR_MIN_ROWS: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub name: String,
    pub action_count: usize,
    /// Observation codes emitted by non-absorbing transitions are `0..observation_count`.
    pub observation_count: usize,
    pub discount: f64,
    pub max_steps: usize,
}

impl ProblemSpec {
    pub fn new(
        name: impl Into<String>,
        action_count: usize,
        observation_count: usize,
        discount: f64,
        max_steps: usize,
    ) -> Result<Self> {
        let spec = ProblemSpec {
            name: name.into(),
            action_count,
            observation_count,
            discount,
            max_steps,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(PlanError::Config(format!(
                "discount must lie in (0, 1), got {}",
                self.discount
            )));
        }
        if self.action_count == 0 {
            return Err(PlanError::Config("action_count must be >= 1".into()));
        }
        if self.observation_count == 0 || self.observation_count >= TERMINAL_OBS as usize {
            return Err(PlanError::Config(format!(
                "observation_count {} out of range",
                self.observation_count
            )));
        }
        if self.max_steps == 0 {
            return Err(PlanError::Config("max_steps must be >= 1".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn check_action(&self, action: ActionId) -> Result<()> {
        if (action as usize) < self.action_count {
            Ok(())
        } else {
            Err(PlanError::InvalidAction {
                action,
                action_count: self.action_count,
            })
        }
    }

    #[inline]
    pub fn is_valid_observation(&self, obs: Obs) -> bool {
        obs == TERMINAL_OBS || (obs as usize) < self.observation_count
    }
}

/// A batch of `n` state records with their terminal mask.
#[derive(Debug, Clone, PartialEq)]
pub struct StateBatch<S> {
    states: Vec<S>,
    terminal: Vec<bool>,
}

impl<S> StateBatch<S> {
    pub fn from_parts(states: Vec<S>, terminal: Vec<bool>) -> Result<Self> {
        if states.len() != terminal.len() {
            return Err(PlanError::LengthMismatch {
                what: "terminal mask",
                got: terminal.len(),
                expected: states.len(),
            });
        }
        Ok(StateBatch { states, terminal })
    }

    pub fn from_model<M>(model: &M, states: Vec<S>) -> Self
    where
        M: ProblemModel<State = S> + ?Sized,
    {
        let terminal = states.iter().map(|s| model.is_terminal(s)).collect();
        StateBatch { states, terminal }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[S] {
        &self.states
    }

    pub fn terminal_mask(&self) -> &[bool] {
        &self.terminal
    }

    pub fn get(&self, i: usize) -> (&S, bool) {
        (&self.states[i], self.terminal[i])
    }

    pub fn states_mut(&mut self) -> &mut [S] {
        &mut self.states
    }

    pub fn into_states(self) -> Vec<S> {
        self.states
    }

    pub fn all_terminal(&self) -> bool {
        self.terminal.iter().all(|&t| t)
    }
}

impl<S: Clone> StateBatch<S> {
    /// Rows `indices[0], indices[1], ...` as a new batch.
    pub fn gather(&self, indices: &[usize]) -> Self {
        StateBatch {
            states: indices.iter().map(|&i| self.states[i].clone()).collect(),
            terminal: indices.iter().map(|&i| self.terminal[i]).collect(),
        }
    }

    pub fn repeat(state: S, terminal: bool, n: usize) -> Self {
        StateBatch {
            states: vec![state; n],
            terminal: vec![terminal; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult<S> {
    pub next_states: StateBatch<S>,
    pub observations: Vec<Obs>,
    pub rewards: Vec<f64>,
}

/// One sampled `(s', o, r)` for a non-terminal row.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition<S> {
    pub next: S,
    pub observation: Obs,
    pub reward: f64,
}

/// A POMDP exposed through a per-row generative model.
///
/// Implementors provide the single-row kernels; the batched operations used by
/// the planner are provided methods that map the kernels over rows with one
/// counter-based substream per row.
pub trait ProblemModel: Send + Sync {
    type State: Clone + Send + Sync + Debug;

    fn spec(&self) -> &ProblemSpec;

    fn sample_initial_state(&self, rng: &mut CounterRng) -> Self::State;

    fn is_terminal(&self, state: &Self::State) -> bool;

    /// Samples `(s', o) ~ T(s,a,.) Z(.,a,.)` and `r = R(s,a)` for a non-terminal `state`.
    fn step(
        &self,
        state: &Self::State,
        action: ActionId,
        rng: &mut CounterRng,
    ) -> Transition<Self::State>;

    /// `log Z(s', a, o)` for a code in `0..observation_count`.
    fn observation_log_prob(&self, next: &Self::State, action: ActionId, obs: Obs) -> f64;

    /// Leaf value estimate for a non-terminal state.
    fn heuristic(&self, _state: &Self::State) -> f64 {
        0.0
    }

    /// `log pi_0(a)`; uniform unless overridden.
    fn reference_log_prob(&self, _action: ActionId) -> f64 {
        -(self.spec().action_count as f64).ln()
    }

    fn has_uniform_reference(&self) -> bool {
        true
    }

    /// Copies the components of the executed environment's initial state that
    /// the agent observes directly into a freshly sampled particle.
    fn align_initial(&self, _particle: &mut Self::State, _truth: &Self::State) {}

    /// Copies fully observed components of the executed environment's state
    /// into a propagated particle. Returns `false` if the particle contradicts
    /// them.
    fn reconcile_observed(&self, _particle: &mut Self::State, _truth: &Self::State) -> bool {
        true
    }

    /// Updates episode counters for an executed transition.
    fn tally(
        &self,
        _counters: &mut Counters,
        _state: &Self::State,
        _action: ActionId,
        _transition: &Transition<Self::State>,
    ) {
    }

    /// Batched generative step. Row `i` draws from `key.rng(i)`.
    fn step_batch(
        &self,
        states: &StateBatch<Self::State>,
        actions: &[ActionId],
        key: StreamKey,
    ) -> Result<StepResult<Self::State>> {
        if actions.len() != states.len() {
            return Err(PlanError::LengthMismatch {
                what: "actions",
                got: actions.len(),
                expected: states.len(),
            });
        }
        let spec = self.spec();
        for &a in actions {
            spec.check_action(a)?;
        }
        let rows: Vec<(Self::State, bool, Obs, f64)> = states
            .states
            .par_iter()
            .zip(states.terminal.par_iter())
            .zip(actions.par_iter())
            .enumerate()
            .with_min_len(PAR_MIN_ROWS)
            .map(|(i, ((s, &term), &a))| {
                if term {
                    (s.clone(), true, TERMINAL_OBS, 0.0)
                } else {
                    let mut rng = key.rng(i as u64);
                    let t = self.step(s, a, &mut rng);
                    let done = self.is_terminal(&t.next);
                    (t.next, done, t.observation, t.reward)
                }
            })
            .collect();
        let n = rows.len();
        let mut next = Vec::with_capacity(n);
        let mut terminal = Vec::with_capacity(n);
        let mut observations = Vec::with_capacity(n);
        let mut rewards = Vec::with_capacity(n);
        for (s, t, o, r) in rows {
            next.push(s);
            terminal.push(t);
            observations.push(o);
            rewards.push(r);
        }
        Ok(StepResult {
            next_states: StateBatch {
                states: next,
                terminal,
            },
            observations,
            rewards,
        })
    }

    /// `log Z(s', a, o)` per row. For [`TERMINAL_OBS`] this is `0` on terminal
    /// rows and `-inf` elsewhere.
    fn observation_log_likelihood(
        &self,
        next_states: &StateBatch<Self::State>,
        action: ActionId,
        obs: Obs,
    ) -> Result<Vec<f64>> {
        let spec = self.spec();
        spec.check_action(action)?;
        if !spec.is_valid_observation(obs) {
            return Err(PlanError::InvalidObservation(obs));
        }
        Ok(next_states
            .states
            .par_iter()
            .zip(next_states.terminal.par_iter())
            .with_min_len(PAR_MIN_ROWS)
            .map(|(s, &term)| {
                if obs == TERMINAL_OBS {
                    if term {
                        0.0
                    } else {
                        f64::NEG_INFINITY
                    }
                } else {
                    self.observation_log_prob(s, action, obs)
                }
            })
            .collect())
    }

    fn sample_initial_states(&self, n: usize, key: StreamKey) -> StateBatch<Self::State> {
        let states: Vec<Self::State> = (0..n)
            .into_par_iter()
            .with_min_len(PAR_MIN_ROWS)
            .map(|i| self.sample_initial_state(&mut key.rng(i as u64)))
            .collect();
        StateBatch::from_model(self, states)
    }

    /// Leaf values; exactly `0.0` on terminal rows.
    fn value_heuristic(&self, states: &StateBatch<Self::State>) -> Vec<f64> {
        states
            .states
            .iter()
            .zip(&states.terminal)
            .map(|(s, &t)| if t { 0.0 } else { self.heuristic(s) })
            .collect()
    }
}
