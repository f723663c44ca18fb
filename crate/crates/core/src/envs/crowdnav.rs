//! Robot crossing a crowded hall from the southern to the northern border.
//!
//! People jitter randomly and, when the robot is close, react to it: curious
//! people drift toward it, shy people away, and everyone nearby backs off
//! quickly after the robot yells. Positions are observed; the traits are
//! hidden. The planning state carries the few people nearest to the robot and
//! a bit per person saying whether its distance to the robot shrank.
//!
//! [`CrowdHall`] is the executed world: it simulates the whole crowd and
//! refreshes the planner's belief after each step, re-selecting the tracked
//! people and carrying trait beliefs over by person id.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::belief::{ParticleBelief, UpdateOutcome};
use crate::error::{PlanError, Result};
use crate::model::{
    ActionId, Counters, Obs, ProblemModel, ProblemSpec, StateBatch, Transition, TERMINAL_OBS,
};
use crate::rng::{tags, CounterRng, StreamKey};
use crate::solver::{Environment, Executed};

pub const NORTH: ActionId = 0;
pub const EAST: ActionId = 1;
pub const SOUTH: ActionId = 2;
pub const WEST: ActionId = 3;
pub const YELL: ActionId = 4;

/// People carried in the planning state.
pub const TRACKED: usize = 6;

pub const GOAL_REWARD: f64 = 1000.0;
pub const BUMP_PENALTY: f64 = -200.0;
pub const YELL_PENALTY: f64 = -25.0;
pub const STEP_PENALTY: f64 = -1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrowdNavConfig {
    pub p_curious: f64,
    pub width: f64,
    pub height: f64,
    pub people: usize,
    pub start: [f64; 2],
    /// No one is placed closer than this to the start.
    pub start_clearance: f64,
    pub noise_sd: f64,
    pub react_prob: f64,
    pub nearby_radius: f64,
    pub v_curious: f64,
    pub v_shy: f64,
    pub v_back: f64,
    pub bump_radius: f64,
    pub discount: f64,
    pub max_steps: usize,
}

impl CrowdNavConfig {
    pub fn new(p_curious: f64) -> Self {
        CrowdNavConfig {
            p_curious,
            width: 50.0,
            height: 40.0,
            people: 300,
            start: [25.0, 0.0],
            start_clearance: 3.0,
            noise_sd: 0.05,
            react_prob: 0.9,
            nearby_radius: 4.0,
            v_curious: 0.3,
            v_shy: 0.8,
            v_back: 2.0,
            bump_radius: 0.5,
            discount: 0.97,
            max_steps: 200,
        }
    }
}

impl Default for CrowdNavConfig {
    fn default() -> Self {
        Self::new(0.5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Person {
    pub id: u16,
    pub pos: [f64; 2],
    pub curious: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrowdState {
    pub robot: [f64; 2],
    pub people: [Person; TRACKED],
    /// Distance from each tracked person's position before the last step to
    /// the robot's position after it.
    pub prev_dist: [f64; TRACKED],
    pub crossed: bool,
}

/// What one step did, shared by the planning model and the world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepEffects {
    pub crossed: bool,
    pub bumped: bool,
    pub yelled: bool,
    pub moved: f64,
}

impl StepEffects {
    pub fn reward(&self) -> f64 {
        let mut r = STEP_PENALTY;
        if self.yelled {
            r += YELL_PENALTY;
        }
        if self.crossed {
            r += GOAL_REWARD;
        } else if self.bumped {
            r += BUMP_PENALTY;
        }
        r
    }
}

#[inline]
fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[derive(Debug, Clone)]
pub struct CrowdNavModel {
    spec: ProblemSpec,
    config: CrowdNavConfig,
}

impl CrowdNavModel {
    pub fn new(config: CrowdNavConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&config.p_curious) || !(0.0..=1.0).contains(&config.react_prob) {
            return Err(PlanError::Config("probabilities must lie in [0, 1]".into()));
        }
        if config.people < TRACKED || config.people > u16::MAX as usize {
            return Err(PlanError::Config(format!(
                "need between {TRACKED} and 65535 people"
            )));
        }
        if config.width <= 0.0 || config.height <= 0.0 || config.noise_sd < 0.0 {
            return Err(PlanError::Config(
                "hall size must be positive and noise non-negative".into(),
            ));
        }
        let spec = ProblemSpec::new(
            "crowdnav",
            5,
            1 << TRACKED,
            config.discount,
            config.max_steps,
        )?;
        Ok(CrowdNavModel { spec, config })
    }

    pub fn config(&self) -> &CrowdNavConfig {
        &self.config
    }

    /// Moves the robot; returns its new position and whether it crossed north.
    pub fn move_robot(&self, robot: [f64; 2], a: ActionId) -> ([f64; 2], bool) {
        let c = &self.config;
        let mut r = robot;
        match a {
            NORTH => r[1] += 1.0,
            EAST => r[0] += 1.0,
            SOUTH => r[1] -= 1.0,
            WEST => r[0] -= 1.0,
            _ => {}
        }
        r[0] = r[0].clamp(0.0, c.width);
        r[1] = r[1].max(0.0);
        (r, r[1] > c.height)
    }

    /// Noise, then trait reaction (with `react_prob` when within the nearby
    /// radius), then clamping to the hall.
    pub fn move_person(&self, p: &mut Person, robot: [f64; 2], yelled: bool, rng: &mut CounterRng) {
        let c = &self.config;
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        p.pos[0] += c.noise_sd * nx;
        p.pos[1] += c.noise_sd * ny;
        let d = dist(p.pos, robot);
        if d < c.nearby_radius && rng.bernoulli(c.react_prob) && d > 0.0 {
            let u = [(robot[0] - p.pos[0]) / d, (robot[1] - p.pos[1]) / d];
            let step = if yelled {
                -c.v_back
            } else if p.curious {
                c.v_curious.min(d)
            } else {
                -c.v_shy
            };
            p.pos[0] += step * u[0];
            p.pos[1] += step * u[1];
        }
        p.pos[0] = p.pos[0].clamp(0.0, c.width);
        p.pos[1] = p.pos[1].clamp(0.0, c.height);
    }

    /// Advances the robot and `people` by one step.
    pub fn advance(
        &self,
        robot: &mut [f64; 2],
        a: ActionId,
        people: &mut [Person],
        rng: &mut CounterRng,
    ) -> StepEffects {
        let (next, crossed) = self.move_robot(*robot, a);
        let moved = dist(*robot, next);
        *robot = next;
        let yelled = a == YELL;
        let mut bumped = false;
        for p in people.iter_mut() {
            self.move_person(p, next, yelled, rng);
            bumped |= dist(p.pos, next) < self.config.bump_radius;
        }
        StepEffects {
            crossed,
            bumped: bumped && !crossed,
            yelled,
            moved,
        }
    }

    /// Observation code: bit `i` is set when tracked person `i` got closer.
    pub fn reading(s: &CrowdState) -> Obs {
        let mut code = 0;
        for (i, p) in s.people.iter().enumerate() {
            if dist(p.pos, s.robot) < s.prev_dist[i] {
                code |= 1 << i;
            }
        }
        code
    }

    /// Uniform crowd outside the start clearance with traits drawn from `p_curious`.
    pub fn sample_crowd(&self, rng: &mut CounterRng) -> Vec<Person> {
        let c = &self.config;
        (0..c.people)
            .map(|id| {
                let pos = loop {
                    let pos = [rng.uniform() * c.width, rng.uniform() * c.height];
                    if dist(pos, c.start) >= c.start_clearance {
                        break pos;
                    }
                };
                Person {
                    id: id as u16,
                    pos,
                    curious: rng.bernoulli(c.p_curious),
                }
            })
            .collect()
    }

    /// Planning state tracking the people nearest to `robot`.
    pub fn track(&self, robot: [f64; 2], crowd: &[Person], crossed: bool) -> CrowdState {
        let ids = nearest(robot, crowd);
        let people = ids.map(|i| crowd[i]);
        CrowdState {
            robot,
            people,
            prev_dist: people.map(|p| dist(p.pos, robot)),
            crossed,
        }
    }
}

/// Indices of the `TRACKED` people closest to `robot`, nearest first.
pub fn nearest(robot: [f64; 2], crowd: &[Person]) -> [usize; TRACKED] {
    let mut order: Vec<(f64, usize)> = crowd
        .iter()
        .enumerate()
        .map(|(i, p)| (dist(p.pos, robot), i))
        .collect();
    order.select_nth_unstable_by(TRACKED - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.truncate(TRACKED);
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    std::array::from_fn(|k| order[k].1)
}

impl ProblemModel for CrowdNavModel {
    type State = CrowdState;

    fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    fn sample_initial_state(&self, rng: &mut CounterRng) -> CrowdState {
        let crowd = self.sample_crowd(rng);
        self.track(self.config.start, &crowd, false)
    }

    fn is_terminal(&self, s: &CrowdState) -> bool {
        s.crossed
    }

    fn step(&self, s: &CrowdState, a: ActionId, rng: &mut CounterRng) -> Transition<CrowdState> {
        let mut next = *s;
        let before = s.people.map(|p| p.pos);
        let fx = self.advance(&mut next.robot, a, &mut next.people, rng);
        next.crossed = fx.crossed;
        for (d, b) in next.prev_dist.iter_mut().zip(before) {
            *d = dist(b, next.robot);
        }
        Transition {
            observation: Self::reading(&next),
            next,
            reward: fx.reward(),
        }
    }

    fn observation_log_prob(&self, next: &CrowdState, _a: ActionId, obs: Obs) -> f64 {
        if Self::reading(next) == obs {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Return of walking straight north with no one in the way.
    fn heuristic(&self, s: &CrowdState) -> f64 {
        let k = ((self.config.height - s.robot[1]).max(0.0).floor() as i32) + 1;
        let g = self.spec.discount;
        STEP_PENALTY * (1.0 - g.powi(k)) / (1.0 - g) + GOAL_REWARD * g.powi(k - 1)
    }

    fn tally(
        &self,
        counters: &mut Counters,
        s: &CrowdState,
        a: ActionId,
        t: &Transition<CrowdState>,
    ) {
        *counters.entry("path_length".into()).or_default() += dist(s.robot, t.next.robot);
        if a == YELL {
            *counters.entry("yells".into()).or_default() += 1.0;
        }
        if t.reward <= BUMP_PENALTY {
            *counters.entry("bumps".into()).or_default() += 1.0;
        }
    }
}

/// The executed hall: the full crowd plus per-person trait beliefs.
#[derive(Debug, Clone)]
pub struct CrowdHall {
    model: CrowdNavModel,
    robot: [f64; 2],
    crowd: Vec<Person>,
    crossed: bool,
    /// Ids tracked by the current belief, in particle order.
    tracked: [u16; TRACKED],
    /// Believed probability that each person is curious.
    marginals: Vec<f64>,
    /// Planning-state view of the last executed step.
    last_view: Option<CrowdState>,
    counters: Counters,
}

impl CrowdHall {
    /// Draws the crowd from the world stream of `key`.
    pub fn new(model: CrowdNavModel, key: StreamKey) -> Self {
        let crowd = model.sample_crowd(&mut key.child(tags::WORLD).rng(0));
        Self::with_crowd(model, crowd)
    }

    pub fn with_crowd(model: CrowdNavModel, crowd: Vec<Person>) -> Self {
        let robot = model.config.start;
        let tracked = nearest(robot, &crowd).map(|i| crowd[i].id);
        let marginals = vec![model.config.p_curious; crowd.len()];
        let mut counters = Counters::new();
        for name in ["path_length", "bumps", "yells"] {
            counters.insert(name.into(), 0.0);
        }
        CrowdHall {
            model,
            robot,
            crowd,
            crossed: false,
            tracked,
            marginals,
            last_view: None,
            counters,
        }
    }

    pub fn robot(&self) -> [f64; 2] {
        self.robot
    }

    pub fn crowd(&self) -> &[Person] {
        &self.crowd
    }

    pub fn marginals(&self) -> &[f64] {
        &self.marginals
    }

    pub fn tracked(&self) -> [u16; TRACKED] {
        self.tracked
    }

    /// Particles over the currently tracked people, with traits drawn per
    /// person from `curious_prob` unless `inherit` supplies one.
    fn particles_for_tracked<F>(
        &self,
        n: usize,
        key: StreamKey,
        inherit: F,
    ) -> Result<ParticleBelief<CrowdState>>
    where
        F: Fn(usize, u16) -> Option<bool>,
    {
        let base = self.model.track(self.robot, &self.crowd, self.crossed);
        let states: Vec<CrowdState> = (0..n)
            .map(|row| {
                let mut rng = key.rng(row as u64);
                let mut s = base;
                for p in s.people.iter_mut() {
                    p.curious = match inherit(row, p.id) {
                        Some(c) => c,
                        None => rng.bernoulli(self.marginals[p.id as usize]),
                    };
                }
                s
            })
            .collect();
        ParticleBelief::uniform(StateBatch::from_model(&self.model, states))
    }
}

impl Environment for CrowdHall {
    type Model = CrowdNavModel;

    fn model(&self) -> &CrowdNavModel {
        &self.model
    }

    fn initial_belief(
        &mut self,
        particles: usize,
        key: StreamKey,
    ) -> Result<ParticleBelief<CrowdState>> {
        self.tracked = nearest(self.robot, &self.crowd).map(|i| self.crowd[i].id);
        self.particles_for_tracked(particles, key, |_, _| None)
    }

    fn execute(&mut self, action: ActionId, key: StreamKey) -> Result<Executed> {
        self.model.spec.check_action(action)?;
        if self.crossed {
            return Ok(Executed {
                observation: TERMINAL_OBS,
                reward: 0.0,
                terminal: true,
            });
        }
        let before: Vec<[f64; 2]> = self
            .tracked
            .iter()
            .map(|&id| self.crowd[id as usize].pos)
            .collect();
        let fx = self
            .model
            .advance(&mut self.robot, action, &mut self.crowd, &mut key.rng(0));
        self.crossed = fx.crossed;
        let mut view = CrowdState {
            robot: self.robot,
            people: self.tracked.map(|id| self.crowd[id as usize]),
            prev_dist: [0.0; TRACKED],
            crossed: fx.crossed,
        };
        for (d, b) in view.prev_dist.iter_mut().zip(&before) {
            *d = dist(*b, self.robot);
        }
        let observation = CrowdNavModel::reading(&view);
        self.last_view = Some(view);
        *self.counters.entry("path_length".into()).or_default() += fx.moved;
        if fx.bumped {
            *self.counters.entry("bumps".into()).or_default() += 1.0;
        }
        if fx.yelled {
            *self.counters.entry("yells".into()).or_default() += 1.0;
        }
        Ok(Executed {
            observation,
            reward: fx.reward(),
            terminal: fx.crossed,
        })
    }

    /// Filters traits of the tracked people on the observation, stores their
    /// marginals, then rebuilds particles around the newly nearest people at
    /// their observed positions. Traits of people tracked before and after
    /// keep their joint posterior; newcomers draw from their marginal.
    fn update_belief(
        &mut self,
        belief: &ParticleBelief<CrowdState>,
        action: ActionId,
        observation: Obs,
        key: StreamKey,
    ) -> Result<UpdateOutcome<CrowdState>> {
        let robot = self.robot;
        let filtered = belief.update_with(&self.model, action, observation, key, |p| {
            dist(p.robot, robot) < 1e-9
        })?;
        let posterior = filtered.belief.particles().states();
        let w = filtered.belief.weights();
        if !filtered.degenerate {
            for (k, &id) in self.tracked.iter().enumerate() {
                let p: f64 = posterior
                    .iter()
                    .zip(w)
                    .filter(|(s, _)| s.people[k].curious)
                    .map(|(_, w)| w)
                    .sum();
                self.marginals[id as usize] = p.clamp(0.0, 1.0);
            }
        }
        let old = self.tracked;
        self.tracked = nearest(self.robot, &self.crowd).map(|i| self.crowd[i].id);
        let n = posterior.len();
        let belief = self.particles_for_tracked(n, key.child(tags::REFRESH), |row, id| {
            if filtered.degenerate {
                return None;
            }
            old.iter()
                .position(|&o| o == id)
                .map(|k| posterior[row].people[k].curious)
        })?;
        Ok(UpdateOutcome {
            weight_error: belief.weight_error().max(filtered.weight_error),
            belief,
            degenerate: filtered.degenerate,
            attempts: filtered.attempts,
        })
    }

    fn counters(&self) -> Counters {
        self.counters.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_state(model: &CrowdNavModel, robot: [f64; 2]) -> CrowdState {
        // Everyone far from the robot, spread along the bottom edge.
        let crowd: Vec<Person> = (0..TRACKED)
            .map(|i| Person {
                id: i as u16,
                pos: [2.0 + 5.0 * i as f64, 0.0],
                curious: false,
            })
            .collect();
        let mut s = model.track(robot, &crowd, false);
        s.robot = robot;
        s
    }

    fn model(p: f64) -> CrowdNavModel {
        CrowdNavModel::new(CrowdNavConfig::new(p)).unwrap()
    }

    #[test]
    fn yell_without_bump() {
        let m = model(0.5);
        let s = quiet_state(&m, [25.0, 20.0]);
        let t = m.step(&s, YELL, &mut StreamKey::new(1).rng(0));
        assert_eq!(t.reward, -26.0);
        assert_eq!(t.next.robot, s.robot);
    }

    #[test]
    fn crossing_north_ends_the_episode() {
        let m = model(0.5);
        let s = quiet_state(&m, [25.0, 40.0]);
        let t = m.step(&s, NORTH, &mut StreamKey::new(2).rng(0));
        assert_eq!(t.reward, 999.0);
        assert!(m.is_terminal(&t.next));
    }

    #[test]
    fn bump_penalty() {
        let m = model(1.0);
        let mut s = quiet_state(&m, [25.0, 20.0]);
        s.people[0].pos = [25.0, 21.1];
        s.people[0].curious = true;
        let t = m.step(&s, NORTH, &mut StreamKey::new(3).rng(0));
        assert_eq!(t.reward, -201.0);
    }

    #[test]
    fn robot_is_clamped() {
        let m = model(0.5);
        assert_eq!(m.move_robot([0.0, 0.0], SOUTH), ([0.0, 0.0], false));
        assert_eq!(m.move_robot([0.0, 0.0], WEST), ([0.0, 0.0], false));
        assert_eq!(m.move_robot([50.0, 3.0], EAST), ([50.0, 3.0], false));
    }

    #[test]
    fn reactions_follow_traits() {
        let m = model(0.5);
        let robot = [10.0, 10.0];
        let mut curious = 0.0;
        let mut shy = 0.0;
        let mut yelled = 0.0;
        let n = 2000;
        for row in 0..n {
            for (flag, yell, acc) in [
                (true, false, &mut curious),
                (false, false, &mut shy),
                (true, true, &mut yelled),
            ] {
                let mut p = Person {
                    id: 0,
                    pos: [12.0, 10.0],
                    curious: flag,
                };
                m.move_person(&mut p, robot, yell, &mut StreamKey::new(4).rng(row));
                *acc += dist(p.pos, robot) - 2.0;
            }
        }
        let n = n as f64;
        assert!((curious / n + 0.27).abs() < 0.02, "{}", curious / n);
        assert!((shy / n - 0.72).abs() < 0.02, "{}", shy / n);
        assert!((yelled / n - 1.8).abs() < 0.03, "{}", yelled / n);
    }

    #[test]
    fn far_people_only_jitter() {
        let m = model(1.0);
        let mut p = Person {
            id: 0,
            pos: [40.0, 30.0],
            curious: true,
        };
        m.move_person(&mut p, [10.0, 10.0], false, &mut StreamKey::new(5).rng(0));
        assert!(dist(p.pos, [40.0, 30.0]) < 0.5);
    }

    #[test]
    fn observation_is_deterministic_given_next_state() {
        let m = model(1.0);
        let s = m.sample_initial_state(&mut StreamKey::new(6).rng(0));
        for row in 0..20 {
            let t = m.step(&s, NORTH, &mut StreamKey::new(7).rng(row));
            assert_eq!(m.observation_log_prob(&t.next, NORTH, t.observation), 0.0);
            assert_eq!(
                m.observation_log_prob(&t.next, NORTH, t.observation ^ 1),
                f64::NEG_INFINITY
            );
        }
    }

    #[test]
    fn no_one_is_curious_at_zero() {
        let m = model(0.0);
        let crowd = m.sample_crowd(&mut StreamKey::new(8).rng(0));
        assert_eq!(crowd.len(), 300);
        assert!(crowd.iter().all(|p| !p.curious));
        assert!(crowd.iter().all(|p| dist(p.pos, [25.0, 0.0]) >= 3.0));
        let mut hall = CrowdHall::new(m, StreamKey::new(9));
        let b = hall.initial_belief(200, StreamKey::new(10)).unwrap();
        assert_eq!(b.probability(|s| s.people.iter().any(|p| p.curious)), 0.0);
    }

    #[test]
    fn nearest_is_sorted_and_exact() {
        let m = model(0.5);
        let crowd = m.sample_crowd(&mut StreamKey::new(11).rng(0));
        let robot = [20.0, 15.0];
        let ids = nearest(robot, &crowd);
        let mut all: Vec<f64> = crowd.iter().map(|p| dist(p.pos, robot)).collect();
        all.sort_by(f64::total_cmp);
        for k in 0..TRACKED {
            assert_eq!(dist(crowd[ids[k]].pos, robot), all[k]);
        }
    }

    #[test]
    fn heuristic_counts_steps_to_cross() {
        let m = model(0.5);
        let s = quiet_state(&m, [25.0, 40.0]);
        assert_eq!(m.heuristic(&s), 999.0);
        let s = quiet_state(&m, [25.0, 39.0]);
        assert!((m.heuristic(&s) - (-1.0 - 0.97 + 1000.0 * 0.97)).abs() < 1e-9);
    }

    #[test]
    fn hall_refresh_tracks_truth() {
        let m = model(0.5);
        let mut hall = CrowdHall::new(m, StreamKey::new(12));
        let b = hall.initial_belief(500, StreamKey::new(13)).unwrap();
        let ex = hall.execute(NORTH, StreamKey::new(14)).unwrap();
        let upd = hall
            .update_belief(&b, NORTH, ex.observation, StreamKey::new(15))
            .unwrap();
        let tracked = hall.tracked();
        for s in upd.belief.particles().states() {
            assert_eq!(s.robot, hall.robot());
            for (k, p) in s.people.iter().enumerate() {
                assert_eq!(p.id, tracked[k]);
                assert_eq!(p.pos, hall.crowd()[p.id as usize].pos);
            }
        }
        assert!(upd.weight_error < 1e-9);
        assert_eq!(hall.counters()["path_length"], 1.0);
    }
}
