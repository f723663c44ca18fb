//! Two-agent rock sampling on an n x n grid.
//!
//! Each agent moves N/E/S/W, samples the rock under it, or checks any rock
//! with a distance-dependent noisy sensor. Sampling a good rock pays +10 and
//! turns it bad; a bad rock or an empty cell costs 10. Walking east off the
//! map pays +10 and removes the agent. The episode ends when both have left.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::belief::{ParticleBelief, UpdateOutcome};
use crate::error::{PlanError, Result};
use crate::model::{ActionId, Counters, Obs, ProblemModel, ProblemSpec, Transition};
use crate::rng::{CounterRng, StreamKey};
use crate::solver::{Environment, Executed, SimulatedEnvironment};

pub const NORTH: u32 = 0;
pub const EAST: u32 = 1;
pub const SOUTH: u32 = 2;
pub const WEST: u32 = 3;
pub const SAMPLE: u32 = 4;
/// Per-agent action `FIRST_CHECK + i` checks rock `i`.
pub const FIRST_CHECK: u32 = 5;

pub const READ_NULL: Obs = 0;
pub const READ_GOOD: Obs = 1;
pub const READ_BAD: Obs = 2;

pub const ROCK_REWARD: f64 = 10.0;
pub const EXIT_REWARD: f64 = 10.0;

const MAX_ROCKS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarsHeuristic {
    /// Both agents walk straight to the east edge.
    Exit,
    /// Each agent greedily collects the nearest remaining good rock while that
    /// beats leaving, then exits; rock qualities are read from the state.
    Greedy,
    /// Each agent tours unsampled rocks chosen from the current belief's
    /// per-rock odds, spending a check and a sample step at each and earning
    /// the expected rock reward, then exits; nothing counts past the step cap.
    /// Depends only on positions, time and which rocks were sampled, so
    /// particles at a node share one value.
    Survey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarsConfig {
    pub n: usize,
    pub m: usize,
    /// Distance at which the sensor's advantage over a coin flip halves.
    pub half_efficiency: f64,
    pub discount: f64,
    pub max_steps: usize,
    pub heuristic: MarsHeuristic,
}

impl MarsConfig {
    pub fn new(n: usize, m: usize) -> Self {
        MarsConfig {
            n,
            m,
            half_efficiency: 20.0,
            discount: 0.983,
            max_steps: 90,
            heuristic: MarsHeuristic::Survey,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MarsState {
    /// `(x, y)` per agent; `x` grows eastward.
    pub agents: [(u8, u8); 2],
    pub departed: [bool; 2],
    /// Bit `i` set means rock `i` is good.
    pub rocks: u64,
    /// Bit `i` set once either agent has sampled rock `i`.
    pub sampled: u64,
    /// Steps taken since the start.
    pub elapsed: u16,
}

#[derive(Debug, Clone)]
pub struct MarsModel {
    spec: ProblemSpec,
    config: MarsConfig,
    rocks: Vec<(u8, u8)>,
    /// Rock index per cell, row-major by `y * n + x`.
    rock_at: Vec<Option<u8>>,
    starts: [(u8, u8); 2],
    /// `discount^k` for every delay the heuristics can produce.
    powers: Vec<f64>,
    /// Belief probability that each rock is good, read by the survey heuristic.
    good_probs: Vec<f64>,
}

impl MarsModel {
    /// Model with rocks at the given distinct cells.
    pub fn with_rocks(config: MarsConfig, rocks: Vec<(u8, u8)>) -> Result<Self> {
        let (n, m) = (config.n, config.m);
        if !(2..=255).contains(&n) {
            return Err(PlanError::Config(format!(
                "grid size must lie in [2, 255], got {n}"
            )));
        }
        if m > MAX_ROCKS || m > n * n {
            return Err(PlanError::Config(format!(
                "at most {MAX_ROCKS} rocks and one per cell, got {m}"
            )));
        }
        if rocks.len() != m {
            return Err(PlanError::Config(format!(
                "expected {m} rock cells, got {}",
                rocks.len()
            )));
        }
        if config.half_efficiency <= 0.0 {
            return Err(PlanError::Config(
                "sensor half-efficiency distance must be positive".into(),
            ));
        }
        let mut rock_at = vec![None; n * n];
        for (i, &(x, y)) in rocks.iter().enumerate() {
            let cell = y as usize * n + x as usize;
            if x as usize >= n || y as usize >= n || rock_at[cell].is_some() {
                return Err(PlanError::Config(format!(
                    "rock {i} is off the map or shares a cell"
                )));
            }
            rock_at[cell] = Some(i as u8);
        }
        let per_agent = 5 + m;
        let spec = ProblemSpec::new(
            format!("mars({n},{m})"),
            per_agent * per_agent,
            9,
            config.discount,
            config.max_steps,
        )?;
        let starts = [(0, (n / 4) as u8), (0, (3 * n / 4) as u8)];
        // Each tour leg is at most 2n moves plus check and sample, then the exit.
        let longest = (m + 1) * (2 * n + 2) + n;
        let powers = (0..=longest)
            .map(|k| config.discount.powi(k as i32))
            .collect();
        Ok(MarsModel {
            spec,
            config,
            rocks,
            rock_at,
            starts,
            powers,
            good_probs: vec![0.5; m],
        })
    }

    /// Model with `m` rocks on distinct uniformly drawn cells.
    pub fn random(config: MarsConfig, key: StreamKey) -> Result<Self> {
        let n = config.n;
        if config.m > n * n {
            return Err(PlanError::Config("more rocks than cells".into()));
        }
        let mut rng = key.rng(0);
        let mut cells: Vec<usize> = (0..n * n).collect();
        for i in 0..config.m {
            let j = i + rng.below((cells.len() - i) as u64) as usize;
            cells.swap(i, j);
        }
        let rocks = cells[..config.m]
            .iter()
            .map(|&c| ((c % n) as u8, (c / n) as u8))
            .collect();
        Self::with_rocks(config, rocks)
    }

    pub fn config(&self) -> &MarsConfig {
        &self.config
    }

    pub fn rocks(&self) -> &[(u8, u8)] {
        &self.rocks
    }

    pub fn starts(&self) -> [(u8, u8); 2] {
        self.starts
    }

    pub fn good_probs(&self) -> &[f64] {
        &self.good_probs
    }

    /// Sets the per-rock odds the survey heuristic plans its tour with.
    pub fn set_good_probs(&mut self, probs: Vec<f64>) -> Result<()> {
        if probs.len() != self.config.m || probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(PlanError::Config(format!(
                "need {} rock probabilities in [0, 1]",
                self.config.m
            )));
        }
        self.good_probs = probs;
        Ok(())
    }

    pub fn joint_action(&self, a0: u32, a1: u32) -> ActionId {
        a0 * (5 + self.config.m as u32) + a1
    }

    pub fn split_action(&self, a: ActionId) -> [u32; 2] {
        let per = 5 + self.config.m as u32;
        [a / per, a % per]
    }

    pub fn split_observation(o: Obs) -> [Obs; 2] {
        [o / 3, o % 3]
    }

    /// Probability that checking a rock at distance `d` reports its true quality.
    pub fn sensor_accuracy(&self, d: f64) -> f64 {
        0.5 * (1.0 + (-d / self.config.half_efficiency).exp2())
    }

    fn distance(a: (u8, u8), b: (u8, u8)) -> f64 {
        let dx = a.0 as f64 - b.0 as f64;
        let dy = a.1 as f64 - b.1 as f64;
        (dx * dx + dy * dy).sqrt()
    }

    fn rock_under(&self, p: (u8, u8)) -> Option<usize> {
        self.rock_at[p.1 as usize * self.config.n + p.0 as usize].map(usize::from)
    }

    /// Applies one agent's action in place; returns the reward.
    fn act(&self, s: &mut MarsState, agent: usize, a: u32) -> f64 {
        if s.departed[agent] {
            return 0.0;
        }
        let n = self.config.n as u8;
        let (x, y) = s.agents[agent];
        match a {
            NORTH if y > 0 => s.agents[agent].1 = y - 1,
            SOUTH if y + 1 < n => s.agents[agent].1 = y + 1,
            WEST if x > 0 => s.agents[agent].0 = x - 1,
            EAST if x + 1 < n => s.agents[agent].0 = x + 1,
            EAST => {
                s.departed[agent] = true;
                return EXIT_REWARD;
            }
            SAMPLE => {
                if let Some(i) = self.rock_under((x, y)) {
                    s.sampled |= 1 << i;
                }
                return match self.rock_under((x, y)) {
                    Some(i) if s.rocks >> i & 1 == 1 => {
                        s.rocks &= !(1 << i);
                        ROCK_REWARD
                    }
                    _ => -ROCK_REWARD,
                };
            }
            _ => {}
        }
        0.0
    }

    fn exit_value(&self, x: u8, elapsed: i32) -> f64 {
        let steps = (self.config.n - x as usize) as i32;
        EXIT_REWARD * self.power(elapsed + steps - 1)
    }

    fn power(&self, k: i32) -> f64 {
        self.powers[k as usize]
    }

    fn greedy_value(&self, s: &MarsState) -> f64 {
        let mut remaining = s.rocks;
        let mut total = 0.0;
        for agent in 0..2 {
            if s.departed[agent] {
                continue;
            }
            let mut pos = s.agents[agent];
            let mut t = 0i32;
            loop {
                let mut best: Option<(usize, i32)> = None;
                let mut bits = remaining;
                while bits != 0 {
                    let i = bits.trailing_zeros() as usize;
                    bits &= bits - 1;
                    let r = self.rocks[i];
                    let d = (pos.0.abs_diff(r.0) + pos.1.abs_diff(r.1)) as i32;
                    if best.is_none_or(|(_, bd)| d < bd) {
                        best = Some((i, d));
                    }
                }
                let Some((i, d)) = best else { break };
                let r = self.rocks[i];
                let detour = ROCK_REWARD * self.power(t + d) + self.exit_value(r.0, t + d + 1);
                if detour <= self.exit_value(pos.0, t) {
                    break;
                }
                total += ROCK_REWARD * self.power(t + d);
                remaining &= !(1 << i);
                pos = r;
                t += d + 1;
            }
            total += self.exit_value(pos.0, t);
        }
        total
    }

    fn survey_value(&self, s: &MarsState) -> f64 {
        let left = self.config.max_steps as i32 - s.elapsed as i32;
        // Leaving from column x at relative step t lands on step t + n - x - 1.
        let exit = |x: u8, t: i32| {
            if t + (self.config.n - x as usize) as i32 - 1 < left {
                self.exit_value(x, t)
            } else {
                0.0
            }
        };
        let mut toured = s.sampled;
        let mut total = 0.0;
        for agent in 0..2 {
            if s.departed[agent] {
                continue;
            }
            let mut pos = s.agents[agent];
            let mut t = 0i32;
            loop {
                // Detour to rock i: walk d, check, sample, then head for the edge.
                let stay = exit(pos.0, t);
                let mut best: Option<(usize, f64, i32)> = None;
                for (i, &r) in self.rocks.iter().enumerate() {
                    let p = self.good_probs[i];
                    if toured >> i & 1 == 1 || p == 0.0 {
                        continue;
                    }
                    let d = (pos.0.abs_diff(r.0) + pos.1.abs_diff(r.1)) as i32;
                    if t + d + 1 >= left {
                        continue;
                    }
                    let worth = p * ROCK_REWARD * self.power(t + d + 1) + exit(r.0, t + d + 2);
                    if worth > stay && best.is_none_or(|(_, w, _)| worth > w) {
                        best = Some((i, worth, d));
                    }
                }
                let Some((i, _, d)) = best else { break };
                total += self.good_probs[i] * ROCK_REWARD * self.power(t + d + 1);
                toured |= 1 << i;
                pos = self.rocks[i];
                t += d + 2;
            }
            total += exit(pos.0, t);
        }
        total
    }
}

impl ProblemModel for MarsModel {
    type State = MarsState;

    fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    /// Agents at their fixed starts; each rock good with probability 1/2.
    fn sample_initial_state(&self, rng: &mut CounterRng) -> MarsState {
        let m = self.config.m;
        let mask = if m == 64 { u64::MAX } else { (1u64 << m) - 1 };
        MarsState {
            agents: self.starts,
            departed: [false; 2],
            rocks: rng.next_u64() & mask,
            sampled: 0,
            elapsed: 0,
        }
    }

    fn is_terminal(&self, s: &MarsState) -> bool {
        s.departed[0] && s.departed[1]
    }

    fn step(&self, s: &MarsState, a: ActionId, rng: &mut CounterRng) -> Transition<MarsState> {
        let acts = self.split_action(a);
        let mut next = *s;
        next.elapsed = s.elapsed.saturating_add(1);
        let reward = self.act(&mut next, 0, acts[0]) + self.act(&mut next, 1, acts[1]);
        let mut obs = [READ_NULL; 2];
        for agent in 0..2 {
            if next.departed[agent] || acts[agent] < FIRST_CHECK {
                continue;
            }
            let i = (acts[agent] - FIRST_CHECK) as usize;
            let good = next.rocks >> i & 1 == 1;
            let correct = rng
                .bernoulli(self.sensor_accuracy(Self::distance(next.agents[agent], self.rocks[i])));
            obs[agent] = if good == correct { READ_GOOD } else { READ_BAD };
        }
        Transition {
            next,
            observation: obs[0] * 3 + obs[1],
            reward,
        }
    }

    fn observation_log_prob(&self, next: &MarsState, a: ActionId, o: Obs) -> f64 {
        let acts = self.split_action(a);
        let obs = Self::split_observation(o);
        let mut lp = 0.0;
        for agent in 0..2 {
            if next.departed[agent] || acts[agent] < FIRST_CHECK {
                if obs[agent] != READ_NULL {
                    return f64::NEG_INFINITY;
                }
                continue;
            }
            let i = (acts[agent] - FIRST_CHECK) as usize;
            let truth = if next.rocks >> i & 1 == 1 {
                READ_GOOD
            } else {
                READ_BAD
            };
            let acc = self.sensor_accuracy(Self::distance(next.agents[agent], self.rocks[i]));
            let p = match obs[agent] {
                READ_NULL => 0.0,
                r if r == truth => acc,
                _ => 1.0 - acc,
            };
            lp += p.ln();
        }
        lp
    }

    fn heuristic(&self, s: &MarsState) -> f64 {
        match self.config.heuristic {
            MarsHeuristic::Exit => (0..2)
                .filter(|&i| !s.departed[i])
                .map(|i| self.exit_value(s.agents[i].0, 0))
                .sum(),
            MarsHeuristic::Greedy => self.greedy_value(s),
            MarsHeuristic::Survey => self.survey_value(s),
        }
    }

    fn reconcile_observed(&self, particle: &mut MarsState, truth: &MarsState) -> bool {
        particle.agents == truth.agents
            && particle.departed == truth.departed
            && particle.sampled == truth.sampled
            && particle.elapsed == truth.elapsed
    }

    fn tally(
        &self,
        counters: &mut Counters,
        s: &MarsState,
        a: ActionId,
        t: &Transition<MarsState>,
    ) {
        for (agent, act) in self.split_action(a).into_iter().enumerate() {
            if s.departed[agent] {
                continue;
            }
            let name = match act {
                SAMPLE => match self.rock_under(s.agents[agent]) {
                    Some(i) if s.rocks >> i & 1 == 1 => "rocks_good",
                    Some(_) => "rocks_bad",
                    None => "empty_samples",
                },
                EAST if t.next.departed[agent] => "exits",
                c if c >= FIRST_CHECK => "checks",
                _ => continue,
            };
            *counters.entry(name.into()).or_default() += 1.0;
        }
    }
}

/// Simulated MARS world that refreshes the model's per-rock odds from the
/// belief after every update, so the survey heuristic plans with them.
#[derive(Debug, Clone)]
pub struct MarsWorld {
    sim: SimulatedEnvironment<MarsModel>,
}

impl MarsWorld {
    pub fn new(model: MarsModel, key: StreamKey) -> Self {
        MarsWorld {
            sim: SimulatedEnvironment::new(model, key),
        }
    }

    pub fn with_state(model: MarsModel, state: MarsState) -> Self {
        MarsWorld {
            sim: SimulatedEnvironment::with_state(model, state),
        }
    }

    pub fn state(&self) -> &MarsState {
        self.sim.state()
    }

    fn refresh_odds(&mut self, belief: &ParticleBelief<MarsState>) -> Result<()> {
        let probs = (0..self.sim.model().config.m)
            .map(|i| {
                belief
                    .probability(|s| s.rocks >> i & 1 == 1)
                    .clamp(0.0, 1.0)
            })
            .collect();
        self.sim.model_mut().set_good_probs(probs)
    }
}

impl Environment for MarsWorld {
    type Model = MarsModel;

    fn model(&self) -> &MarsModel {
        self.sim.model()
    }

    fn initial_belief(
        &mut self,
        particles: usize,
        key: StreamKey,
    ) -> Result<ParticleBelief<MarsState>> {
        let belief = self.sim.initial_belief(particles, key)?;
        self.refresh_odds(&belief)?;
        Ok(belief)
    }

    fn execute(&mut self, action: ActionId, key: StreamKey) -> Result<Executed> {
        self.sim.execute(action, key)
    }

    fn update_belief(
        &mut self,
        belief: &ParticleBelief<MarsState>,
        action: ActionId,
        observation: Obs,
        key: StreamKey,
    ) -> Result<UpdateOutcome<MarsState>> {
        let outcome = self.sim.update_belief(belief, action, observation, key)?;
        self.refresh_odds(&outcome.belief)?;
        Ok(outcome)
    }

    fn counters(&self) -> Counters {
        self.sim.counters()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> MarsModel {
        // Rock 0 at (1, 1), rock 1 at (3, 3).
        MarsModel::with_rocks(MarsConfig::new(4, 2), vec![(1, 1), (3, 3)]).unwrap()
    }

    fn state(m: &MarsModel, rocks: u64) -> MarsState {
        MarsState {
            agents: m.starts(),
            departed: [false; 2],
            rocks,
            sampled: 0,
            elapsed: 0,
        }
    }

    #[test]
    fn action_and_observation_counts() {
        let m = MarsModel::random(MarsConfig::new(20, 20), StreamKey::new(1)).unwrap();
        assert_eq!(m.spec().action_count, 625);
        assert_eq!(m.spec().observation_count, 9);
        assert_eq!(m.starts(), [(0, 5), (0, 15)]);
        let mut cells = m.rocks().to_vec();
        cells.sort();
        cells.dedup();
        assert_eq!(cells.len(), 20);
        assert_eq!(m.split_action(m.joint_action(3, 17)), [3, 17]);
    }

    #[test]
    fn sampling_a_good_rock_flips_it() {
        let m = toy();
        let mut s = state(&m, 0b11);
        s.agents[0] = (1, 1);
        let t = m.step(
            &s,
            m.joint_action(SAMPLE, NORTH),
            &mut StreamKey::new(2).rng(0),
        );
        assert_eq!(t.reward, 10.0);
        assert_eq!(t.next.rocks, 0b10);
        let t2 = m.step(
            &t.next,
            m.joint_action(SAMPLE, NORTH),
            &mut StreamKey::new(2).rng(1),
        );
        assert_eq!(t2.reward, -10.0);
        // Empty cell.
        let t3 = m.step(
            &state(&m, 0b11),
            m.joint_action(SAMPLE, SAMPLE),
            &mut StreamKey::new(2).rng(2),
        );
        assert_eq!(t3.reward, -20.0);
    }

    #[test]
    fn both_agents_exit_together() {
        let m = toy();
        let mut s = state(&m, 0);
        s.agents = [(3, 0), (3, 2)];
        let t = m.step(
            &s,
            m.joint_action(EAST, EAST),
            &mut StreamKey::new(3).rng(0),
        );
        assert_eq!(t.reward, 20.0);
        assert!(m.is_terminal(&t.next));
        assert_eq!(t.observation, 0);
    }

    #[test]
    fn departed_agent_is_inert() {
        let m = toy();
        let mut s = state(&m, 0b11);
        s.departed[0] = true;
        let t = m.step(
            &s,
            m.joint_action(SAMPLE, WEST),
            &mut StreamKey::new(4).rng(0),
        );
        assert_eq!(t.reward, 0.0);
        assert_eq!(t.next, MarsState { elapsed: 1, ..s });
        assert!(!m.is_terminal(&t.next));
    }

    #[test]
    fn walls_block_moves() {
        let m = toy();
        let mut s = state(&m, 0);
        s.agents[0] = (0, 0);
        let t = m.step(
            &s,
            m.joint_action(NORTH, WEST),
            &mut StreamKey::new(5).rng(0),
        );
        assert_eq!(t.next.agents, s.agents);
        assert_eq!(t.reward, 0.0);
    }

    #[test]
    fn sensor_accuracy_is_monotone() {
        let m = toy();
        assert_eq!(m.sensor_accuracy(0.0), 1.0);
        assert!((m.sensor_accuracy(20.0) - 0.75).abs() < 1e-12);
        let mut prev = 1.0;
        for d in 1..400 {
            let a = m.sensor_accuracy(d as f64 * 0.5);
            assert!(a <= prev && a > 0.5);
            prev = a;
        }
        assert!((m.sensor_accuracy(1e4) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn check_at_distance_zero_is_exact() {
        let m = toy();
        let mut s = state(&m, 0b01);
        s.agents[1] = (1, 1);
        let a = m.joint_action(NORTH, FIRST_CHECK);
        for row in 0..50 {
            let t = m.step(&s, a, &mut StreamKey::new(6).rng(row));
            assert_eq!(t.observation, READ_GOOD);
            assert_eq!(m.observation_log_prob(&t.next, a, READ_GOOD), 0.0);
            assert_eq!(
                m.observation_log_prob(&t.next, a, READ_BAD),
                f64::NEG_INFINITY
            );
        }
    }

    #[test]
    fn likelihoods_normalize() {
        let m = toy();
        let s = state(&m, 0b10);
        let a = m.joint_action(FIRST_CHECK + 1, FIRST_CHECK);
        let total: f64 = (0..9).map(|o| m.observation_log_prob(&s, a, o).exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let a = m.joint_action(NORTH, SAMPLE);
        let total: f64 = (0..9).map(|o| m.observation_log_prob(&s, a, o).exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn check_frequencies_match_accuracy() {
        let m = toy();
        let s = state(&m, 0b10);
        let a = m.joint_action(FIRST_CHECK + 1, NORTH);
        let n = 100_000;
        let good = (0..n)
            .filter(|&r| {
                MarsModel::split_observation(
                    m.step(&s, a, &mut StreamKey::new(7).rng(r)).observation,
                )[0] == READ_GOOD
            })
            .count() as f64;
        let p = m.sensor_accuracy(MarsModel::distance(s.agents[0], (3, 3)));
        assert!((good / n as f64 - p).abs() < 4.0 * (p * (1.0 - p) / n as f64).sqrt());
    }

    #[test]
    fn heuristics() {
        let mut config = MarsConfig::new(4, 2);
        config.heuristic = MarsHeuristic::Exit;
        let m = MarsModel::with_rocks(config.clone(), vec![(1, 1), (3, 3)]).unwrap();
        let s = state(&m, 0);
        let g: f64 = 0.983;
        assert!((m.heuristic(&s) - 20.0 * g.powi(3)).abs() < 1e-12);
        config.heuristic = MarsHeuristic::Greedy;
        let m = MarsModel::with_rocks(config, vec![(1, 1), (3, 3)]).unwrap();
        assert!((m.heuristic(&s) - 20.0 * g.powi(3)).abs() < 1e-12);
        // Agent 0 at (0,1): rock 0 at distance 1, sampled at step 1, exit from x=1 takes 3 more.
        let s = state(&m, 0b01);
        let expected = 10.0 * g + 10.0 * g.powi(2 + 3 - 1) + 10.0 * g.powi(3);
        assert!((m.heuristic(&s) - expected).abs() < 1e-12);
        let mut done = s;
        done.departed = [true, true];
        assert_eq!(m.heuristic(&done), 0.0);
    }

    #[test]
    fn survey_heuristic_uses_odds_and_skips_sampled_rocks() {
        let mut m = toy();
        let g: f64 = 0.983;
        m.set_good_probs(vec![1.0, 0.0]).unwrap();
        // Agent 0 walks one step to rock 0, checks, samples, then exits from x=1.
        let s = state(&m, 0);
        let expected = 10.0 * g.powi(2) + 10.0 * g.powi(5) + 10.0 * g.powi(3);
        assert!((m.heuristic(&s) - expected).abs() < 1e-12);
        // The value ignores the state's qualities.
        assert_eq!(m.heuristic(&state(&m, 0b11)), m.heuristic(&s));
        m.set_good_probs(vec![0.5, 0.0]).unwrap();
        let expected = 5.0 * g.powi(2) + 10.0 * g.powi(5) + 10.0 * g.powi(3);
        assert!((m.heuristic(&s) - expected).abs() < 1e-12);
        let mut sampled = s;
        sampled.sampled = 0b01;
        assert!((m.heuristic(&sampled) - 20.0 * g.powi(3)).abs() < 1e-12);
        // Near the step cap only what still fits counts. With 4 steps left
        // agent 1 can still walk out; agent 0 cannot take the rock and leave.
        let mut late = s;
        late.elapsed = 86;
        assert!((m.heuristic(&late) - 20.0 * g.powi(3)).abs() < 1e-12);
        // With 3 left nobody can leave, so agent 0 takes the rock anyway.
        late.elapsed = 87;
        assert!((m.heuristic(&late) - 5.0 * g.powi(2)).abs() < 1e-12);
        late.elapsed = 90;
        assert_eq!(m.heuristic(&late), 0.0);
        assert!(m.set_good_probs(vec![0.5]).is_err());
        assert!(m.set_good_probs(vec![0.5, 1.5]).is_err());
    }

    #[test]
    fn sampling_marks_the_rock() {
        let m = toy();
        let mut s = state(&m, 0b00);
        s.agents[0] = (1, 1);
        let t = m.step(
            &s,
            m.joint_action(SAMPLE, SAMPLE),
            &mut StreamKey::new(2).rng(0),
        );
        assert_eq!(t.next.sampled, 0b01);
    }

    #[test]
    fn world_refreshes_rock_odds() {
        let m = toy();
        let mut world = MarsWorld::with_state(m.clone(), state(&m, 0b01));
        let mut belief = world.initial_belief(4000, StreamKey::new(1)).unwrap();
        assert!(world
            .model()
            .good_probs()
            .iter()
            .all(|&p| (p - 0.5).abs() < 0.05));
        // Step onto rock 0, then check it from distance zero, which is exact.
        for (i, a) in [
            m.joint_action(EAST, NORTH),
            m.joint_action(FIRST_CHECK, NORTH),
        ]
        .into_iter()
        .enumerate()
        {
            let done = world.execute(a, StreamKey::new(2).child(i as u64)).unwrap();
            let out = world
                .update_belief(
                    &belief,
                    a,
                    done.observation,
                    StreamKey::new(3).child(i as u64),
                )
                .unwrap();
            assert!(!out.degenerate);
            belief = out.belief;
        }
        assert!((world.model().good_probs()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_layouts() {
        assert!(MarsModel::with_rocks(MarsConfig::new(4, 2), vec![(1, 1), (1, 1)]).is_err());
        assert!(MarsModel::with_rocks(MarsConfig::new(4, 1), vec![(4, 0)]).is_err());
        assert!(MarsModel::with_rocks(MarsConfig::new(4, 2), vec![(1, 1)]).is_err());
        assert!(MarsModel::random(MarsConfig::new(2, 5), StreamKey::new(1)).is_err());
    }
}
