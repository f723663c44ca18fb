//! Per-step planning loop and episode driver.
//!
//! Each planning step builds a fresh tree and runs iterations of
//! sample-search-backup with the search depth growing by one per iteration,
//! until the budget is spent or the depth cap is passed. The executed action
//! is the root preference argmax.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backup::backup;
use crate::belief::{ParticleBelief, UpdateOutcome};
use crate::error::{PlanError, Result};
use crate::model::{ActionId, Counters, Obs, ProblemModel, Transition};
use crate::rng::{tags, StreamKey};
use crate::search::{search, SearchBatch};
use crate::tree::{BeliefTree, TreeStats};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    /// Fixed number of iterations per step; deterministic.
    Iterations(u32),
    /// Wall-clock seconds per step. The iteration in progress always completes.
    Seconds(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub eta: f64,
    pub n_parallel: usize,
    pub budget: Budget,
    pub d_max_cap: u32,
    pub particles: usize,
    /// Run full-table invariant scans after every iteration.
    #[serde(default)]
    pub verify: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            eta: 2.0,
            n_parallel: 50_000,
            budget: Budget::Seconds(1.0),
            d_max_cap: 90,
            particles: 10_000,
            verify: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(PlanError::Config(format!(
                "eta must be positive, got {}",
                self.eta
            )));
        }
        if self.n_parallel == 0 {
            return Err(PlanError::Config("n_parallel must be >= 1".into()));
        }
        if self.particles == 0 {
            return Err(PlanError::Config("particles must be >= 1".into()));
        }
        if self.d_max_cap == 0 {
            return Err(PlanError::Config("d_max_cap must be >= 1".into()));
        }
        match self.budget {
            Budget::Iterations(0) => Err(PlanError::Config("iteration budget must be >= 1".into())),
            Budget::Seconds(s) if !(s > 0.0 && s.is_finite()) => Err(PlanError::Config(format!(
                "time budget must be positive, got {s}"
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOutcome {
    pub chosen_action: ActionId,
    pub iterations_run: u32,
    pub final_d_max: u32,
    pub tree_stats: TreeStats,
    pub elapsed_secs: f64,
    /// Invariant violations found when `verify` is on.
    pub violations: Vec<String>,
}

/// Stream key of iteration `i` within a planning step.
pub fn iteration_key(step_key: StreamKey, i: u32) -> StreamKey {
    step_key.child(tags::ITERATION).child(i as u64)
}

/// Root preference argmax, lowest action id on ties.
pub fn root_argmax(tree: &BeliefTree) -> ActionId {
    let row = tree.preference_row(0);
    let mut best = 0;
    for (a, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = a;
        }
    }
    best as ActionId
}

pub fn plan<M: ProblemModel + ?Sized>(
    belief: &ParticleBelief<M::State>,
    model: &M,
    config: &SolverConfig,
    key: StreamKey,
) -> Result<PlanOutcome> {
    plan_with_tree(belief, model, config, key).map(|(o, _)| o)
}

/// [`plan`], also returning the final tree.
pub fn plan_with_tree<M: ProblemModel + ?Sized>(
    belief: &ParticleBelief<M::State>,
    model: &M,
    config: &SolverConfig,
    key: StreamKey,
) -> Result<(PlanOutcome, BeliefTree)> {
    config.validate()?;
    let start = Instant::now();
    let spec = model.spec();
    let mut tree = BeliefTree::for_model(model, config.eta);
    let mut violations = Vec::new();
    let mut expected_visits = 0u64;
    let mut d_max = 1u32;
    let mut iterations = 0u32;
    let mut final_d_max;
    loop {
        let ik = iteration_key(key, iterations);
        let states = belief.sample_states(config.n_parallel, ik.child(tags::SAMPLE_STATES));
        let leaves = search(
            &mut tree,
            model,
            SearchBatch::at_root(states),
            d_max,
            config.eta,
            ik,
        )?;
        backup(&mut tree, &leaves, d_max, config.eta, spec.discount)?;
        iterations += 1;
        final_d_max = d_max;
        if config.verify {
            expected_visits += config.n_parallel as u64 * d_max as u64;
            let total = tree.stats().total_visits;
            if total != expected_visits {
                violations.push(format!("visit total {total} != expected {expected_visits}"));
            }
            violations.extend(tree.check_invariants());
        }
        d_max += 1;
        if d_max > config.d_max_cap {
            break;
        }
        let done = match config.budget {
            Budget::Iterations(k) => iterations >= k,
            Budget::Seconds(s) => start.elapsed().as_secs_f64() >= s,
        };
        if done {
            break;
        }
    }
    let chosen_action = if spec.action_count == 1 {
        0
    } else {
        root_argmax(&tree)
    };
    let outcome = PlanOutcome {
        chosen_action,
        iterations_run: iterations,
        final_d_max,
        tree_stats: tree.stats(),
        elapsed_secs: start.elapsed().as_secs_f64(),
        violations,
    };
    Ok((outcome, tree))
}

/// Outcome of executing an action in the environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Executed {
    pub observation: Obs,
    pub reward: f64,
    pub terminal: bool,
}

/// The world an agent acts in: holds the hidden true state and maintains the
/// agent's belief between planning steps.
pub trait Environment {
    type Model: ProblemModel;

    fn model(&self) -> &Self::Model;

    fn initial_belief(
        &mut self,
        particles: usize,
        key: StreamKey,
    ) -> Result<ParticleBelief<<Self::Model as ProblemModel>::State>>;

    fn execute(&mut self, action: ActionId, key: StreamKey) -> Result<Executed>;

    fn update_belief(
        &mut self,
        belief: &ParticleBelief<<Self::Model as ProblemModel>::State>,
        action: ActionId,
        observation: Obs,
        key: StreamKey,
    ) -> Result<UpdateOutcome<<Self::Model as ProblemModel>::State>>;

    fn counters(&self) -> Counters;
}

/// Environment that simulates the true state with the planning model itself.
#[derive(Debug, Clone)]
pub struct SimulatedEnvironment<M: ProblemModel> {
    model: M,
    state: M::State,
    counters: Counters,
}

impl<M: ProblemModel> SimulatedEnvironment<M> {
    /// Samples the hidden initial state from the model's initial distribution.
    pub fn new(model: M, key: StreamKey) -> Self {
        let state = model.sample_initial_state(&mut key.child(tags::WORLD).rng(0));
        Self::with_state(model, state)
    }

    pub fn with_state(model: M, state: M::State) -> Self {
        SimulatedEnvironment {
            model,
            state,
            counters: Counters::new(),
        }
    }

    pub fn state(&self) -> &M::State {
        &self.state
    }

    /// Lets a wrapping environment retune the model between steps.
    pub fn model_mut(&mut self) -> &mut M {
        &mut self.model
    }
}

impl<M: ProblemModel> Environment for SimulatedEnvironment<M> {
    type Model = M;

    fn model(&self) -> &M {
        &self.model
    }

    fn initial_belief(
        &mut self,
        particles: usize,
        key: StreamKey,
    ) -> Result<ParticleBelief<M::State>> {
        let mut batch = self.model.sample_initial_states(particles, key);
        for s in batch.states_mut() {
            self.model.align_initial(s, &self.state);
        }
        let states = batch.into_states();
        ParticleBelief::uniform(crate::model::StateBatch::from_model(&self.model, states))
    }

    fn execute(&mut self, action: ActionId, key: StreamKey) -> Result<Executed> {
        self.model.spec().check_action(action)?;
        if self.model.is_terminal(&self.state) {
            return Ok(Executed {
                observation: crate::model::TERMINAL_OBS,
                reward: 0.0,
                terminal: true,
            });
        }
        let t: Transition<M::State> = self.model.step(&self.state, action, &mut key.rng(0));
        self.model
            .tally(&mut self.counters, &self.state, action, &t);
        self.state = t.next;
        Ok(Executed {
            observation: t.observation,
            reward: t.reward,
            terminal: self.model.is_terminal(&self.state),
        })
    }

    fn update_belief(
        &mut self,
        belief: &ParticleBelief<M::State>,
        action: ActionId,
        observation: Obs,
        key: StreamKey,
    ) -> Result<UpdateOutcome<M::State>> {
        let truth = &self.state;
        let model = &self.model;
        belief.update_with(model, action, observation, key, |p| {
            model.reconcile_observed(p, truth)
        })
    }

    fn counters(&self) -> Counters {
        self.counters.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalReason {
    Terminal,
    Truncated,
}

/// One episode's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_index: usize,
    pub seed: u64,
    pub discounted_return: f64,
    pub undiscounted_return: f64,
    pub steps: usize,
    pub terminal_reason: TerminalReason,
    pub planning_secs: Vec<f64>,
    pub iterations: Vec<u32>,
    pub actions: Vec<ActionId>,
    pub counters: Counters,
    pub degenerate_updates: usize,
    pub invariant_violations: Vec<String>,
    pub max_weight_error: f64,
}

impl RunRecord {
    pub fn mean_planning_secs(&self) -> f64 {
        if self.planning_secs.is_empty() {
            0.0
        } else {
            self.planning_secs.iter().sum::<f64>() / self.planning_secs.len() as f64
        }
    }
}

/// Plans, executes and updates the belief until the episode terminates or
/// reaches the step cap.
pub fn run_episode<E: Environment>(
    env: &mut E,
    config: &SolverConfig,
    run_index: usize,
    seed: u64,
) -> Result<RunRecord> {
    config.validate()?;
    let key = StreamKey::new(seed);
    let spec = env.model().spec().clone();
    let mut belief = env.initial_belief(config.particles, key.child(tags::INITIAL))?;
    let mut record = RunRecord {
        run_index,
        seed,
        discounted_return: 0.0,
        undiscounted_return: 0.0,
        steps: 0,
        terminal_reason: TerminalReason::Truncated,
        planning_secs: Vec::new(),
        iterations: Vec::new(),
        actions: Vec::new(),
        counters: Counters::new(),
        degenerate_updates: 0,
        invariant_violations: Vec::new(),
        max_weight_error: belief.weight_error(),
    };
    let mut discount = 1.0;
    for t in 0..spec.max_steps {
        let outcome = plan(
            &belief,
            env.model(),
            config,
            key.child(tags::PLAN).child(t as u64),
        )?;
        record.planning_secs.push(outcome.elapsed_secs);
        record.iterations.push(outcome.iterations_run);
        record.invariant_violations.extend(outcome.violations);
        let action = outcome.chosen_action;
        record.actions.push(action);
        let ex = env.execute(action, key.child(tags::EXECUTE).child(t as u64))?;
        record.discounted_return += discount * ex.reward;
        record.undiscounted_return += ex.reward;
        record.steps = t + 1;
        discount *= spec.discount;
        log::debug!(
            "step {t}: action {action} obs {} reward {} ({} iterations, depth {})",
            ex.observation,
            ex.reward,
            outcome.iterations_run,
            outcome.final_d_max
        );
        if ex.terminal {
            record.terminal_reason = TerminalReason::Terminal;
            break;
        }
        if t + 1 == spec.max_steps {
            break;
        }
        let upd = env.update_belief(
            &belief,
            action,
            ex.observation,
            key.child(tags::UPDATE).child(t as u64),
        )?;
        if upd.degenerate {
            record.degenerate_updates += 1;
        }
        record.max_weight_error = record.max_weight_error.max(upd.weight_error);
        belief = upd.belief;
    }
    record.counters = env.counters();
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::tabular::{tiger, tiger_pomdp, TabularModel, TIGER_LEFT};
    use crate::model::StateBatch;

    fn cfg(iters: u32) -> SolverConfig {
        SolverConfig {
            eta: 2.0,
            n_parallel: 64,
            budget: Budget::Iterations(iters),
            d_max_cap: 90,
            particles: 100,
            verify: true,
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(3).validate().is_ok());
        assert!(SolverConfig { eta: 0.0, ..cfg(3) }.validate().is_err());
        assert!(SolverConfig {
            n_parallel: 0,
            ..cfg(3)
        }
        .validate()
        .is_err());
        assert!(cfg(0).validate().is_err());
        assert!(SolverConfig {
            budget: Budget::Seconds(-1.0),
            ..cfg(1)
        }
        .validate()
        .is_err());
    }

    #[test]
    fn final_depth_tracks_iterations() {
        let m = tiger(0.85);
        let b = ParticleBelief::from_model(&m, 100, StreamKey::new(1)).unwrap();
        for k in [1, 2, 5] {
            let out = plan(&b, &m, &cfg(k), StreamKey::new(2)).unwrap();
            assert_eq!(out.iterations_run, k);
            assert_eq!(out.final_d_max, k);
            assert!(out.violations.is_empty(), "{:?}", out.violations);
        }
        let capped = SolverConfig {
            d_max_cap: 3,
            ..cfg(10)
        };
        let out = plan(&b, &m, &capped, StreamKey::new(2)).unwrap();
        assert_eq!((out.iterations_run, out.final_d_max), (3, 3));
    }

    #[test]
    fn single_action_problem() {
        let mut p = tiger_pomdp(0.85, 0.95);
        p.spec.action_count = 1;
        for s in 0..3 {
            p.transition[s].truncate(1);
            p.observation[s].truncate(1);
            p.reward[s].truncate(1);
        }
        let m = TabularModel::new(p).unwrap();
        let b = ParticleBelief::from_model(&m, 10, StreamKey::new(1)).unwrap();
        assert_eq!(
            plan(&b, &m, &cfg(2), StreamKey::new(1))
                .unwrap()
                .chosen_action,
            0
        );
    }

    #[test]
    fn same_seed_same_action() {
        let m = tiger(0.85);
        let b = ParticleBelief::from_model(&m, 100, StreamKey::new(1)).unwrap();
        let a = plan(&b, &m, &cfg(4), StreamKey::new(7)).unwrap();
        let c = plan(&b, &m, &cfg(4), StreamKey::new(7)).unwrap();
        assert_eq!(a.chosen_action, c.chosen_action);
        assert_eq!(a.tree_stats, c.tree_stats);
    }

    #[test]
    fn confident_belief_opens_the_safe_door() {
        let m = tiger(0.85);
        let particles = StateBatch::from_model(&m, vec![TIGER_LEFT; 200]);
        let b = ParticleBelief::uniform(particles).unwrap();
        let config = SolverConfig {
            n_parallel: 1024,
            ..cfg(8)
        };
        let out = plan(&b, &m, &config, StreamKey::new(3)).unwrap();
        assert_eq!(out.chosen_action, crate::envs::tabular::OPEN_RIGHT);
    }

    #[test]
    fn immediate_termination_return() {
        // Opening a door ends the episode at t = 0: the return is that reward.
        let m = tiger(0.85);
        let mut env = SimulatedEnvironment::with_state(m, TIGER_LEFT);
        let config = SolverConfig {
            n_parallel: 512,
            ..cfg(6)
        };
        let b = ParticleBelief::uniform(StateBatch::from_model(env.model(), vec![TIGER_LEFT; 50]))
            .unwrap();
        let action = plan(&b, env.model(), &config, StreamKey::new(1))
            .unwrap()
            .chosen_action;
        let ex = env.execute(action, StreamKey::new(2)).unwrap();
        assert!(ex.terminal);
        assert_eq!(ex.reward, 10.0);
    }

    #[test]
    fn truncated_episodes_are_flagged() {
        let mut p = tiger_pomdp(0.85, 0.95);
        p.spec.max_steps = 2;
        // Doors cost the same as listening and never end the episode.
        for s in 0..2 {
            p.transition[s] = vec![p.transition[s][0].clone(); 3];
            p.reward[s] = vec![-1.0; 3];
        }
        let m = TabularModel::new(p).unwrap();
        let mut env = SimulatedEnvironment::new(m, StreamKey::new(4));
        let rec = run_episode(&mut env, &cfg(2), 0, 11).unwrap();
        assert_eq!(rec.terminal_reason, TerminalReason::Truncated);
        assert_eq!(rec.steps, 2);
        assert!((rec.discounted_return - (-1.0 - 0.95)).abs() < 1e-12);
        assert!(rec.invariant_violations.is_empty());
    }
}
