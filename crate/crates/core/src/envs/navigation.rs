//! Grid navigation through a wall with two gates, on a partially known map.
//!
//! The robot starts on a random top-row cell and must reach the goal cell at
//! the bottom. Which gate is open and which of the unknown cells hold
//! obstacles are hidden; each step the robot gets a noisy occupancy reading
//! of its eight neighbours. The robot's own position is observed directly.

use serde::{Deserialize, Serialize};

use crate::belief::{ParticleBelief, UpdateOutcome};
use crate::error::{PlanError, Result};
use crate::model::{
    ActionId, Counters, Obs, ProblemModel, ProblemSpec, StateBatch, Transition, TERMINAL_OBS,
};
use crate::rng::{tags, CounterRng, StreamKey};
use crate::solver::{Environment, Executed};

/// Row and column offsets of the eight moves; action 8 stays in place.
pub const MOVES: [(i8, i8); 8] = [
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
];
pub const STAY: ActionId = 8;

pub const GOAL_REWARD: f64 = 20.0;
pub const COLLISION_PENALTY: f64 = -1.0;
pub const STAY_PENALTY: f64 = -0.2;
pub const STEP_PENALTY: f64 = -0.1;

const MAX_UNKNOWN: usize = 128;
/// Row bitmasks bound the map side.
const MAX_SIDE: usize = 64;

/// Default 13x13 layout: `?` unknown, `#` wall, `|` gate, `G` goal.
pub const DEFAULT_MAP: &str = "\
.............
?????????????
?????????????
?????????????
?????????????
???.?????.???
###|#####|###
???.?????.???
?????????????
?????????????
??????.??????
??????.??????
......G......
";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Free,
    Wall,
    /// Unknown cell with its bit index in the obstacle mask.
    Unknown(u8),
    /// Gate with its index; exactly one gate is open.
    Gate(u8),
    Goal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NavigationMap {
    pub rows: usize,
    pub cols: usize,
    cells: Vec<Cell>,
    pub unknown_count: usize,
    pub gates: Vec<(u8, u8)>,
    pub goal: (u8, u8),
}

impl NavigationMap {
    /// Parses a grid with one row per line: `#` obstacle, `.` free, `G` goal,
    /// `|` gate and `?` for a cell whose occupancy is drawn from the prior.
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.is_empty())
            .collect();
        let rows = lines.len();
        let cols = lines.first().map_or(0, |l| l.chars().count());
        if rows == 0 || cols == 0 || rows > MAX_SIDE || cols > MAX_SIDE {
            return Err(PlanError::Config(format!(
                "map must have between 1 and {MAX_SIDE} rows and columns"
            )));
        }
        let mut cells = Vec::with_capacity(rows * cols);
        let mut unknown = 0usize;
        let mut gates = Vec::new();
        let mut goal = None;
        for (r, line) in lines.iter().enumerate() {
            if line.chars().count() != cols {
                return Err(PlanError::Config(format!(
                    "map row {r} has a different width"
                )));
            }
            for (c, ch) in line.chars().enumerate() {
                let cell = match ch {
                    '.' => Cell::Free,
                    '#' => Cell::Wall,
                    '?' => {
                        if unknown == MAX_UNKNOWN {
                            return Err(PlanError::Config(format!(
                                "at most {MAX_UNKNOWN} unknown cells"
                            )));
                        }
                        unknown += 1;
                        Cell::Unknown(unknown as u8 - 1)
                    }
                    '|' => {
                        gates.push((r as u8, c as u8));
                        Cell::Gate(gates.len() as u8 - 1)
                    }
                    'G' => {
                        if goal.replace((r as u8, c as u8)).is_some() {
                            return Err(PlanError::Config("map has more than one goal".into()));
                        }
                        Cell::Goal
                    }
                    other => {
                        return Err(PlanError::Config(format!("unknown map symbol {other:?}")))
                    }
                };
                cells.push(cell);
            }
        }
        let goal = goal.ok_or_else(|| PlanError::Config("map has no goal".into()))?;
        if gates.is_empty() || gates.len() > 64 {
            return Err(PlanError::Config("map needs between 1 and 64 gates".into()));
        }
        let map = NavigationMap {
            rows,
            cols,
            cells,
            unknown_count: unknown,
            gates,
            goal,
        };
        if map.start_cells().is_empty() {
            return Err(PlanError::Config("top row has no free start cell".into()));
        }
        Ok(map)
    }

    pub fn default_map() -> Self {
        Self::parse(DEFAULT_MAP).expect("default map parses")
    }

    #[inline]
    pub fn cell(&self, r: usize, c: usize) -> Cell {
        self.cells[r * self.cols + c]
    }

    /// Free cells of the top row.
    pub fn start_cells(&self) -> Vec<u8> {
        (0..self.cols)
            .filter(|&c| self.cell(0, c) == Cell::Free)
            .map(|c| c as u8)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NavigationState {
    pub row: u8,
    pub col: u8,
    /// Bit `k` set means unknown cell `k` holds an obstacle.
    pub obstacles: u128,
    pub open_gate: u8,
    /// Bit `g` set once the robot has stood next to gate `g` and read it.
    pub inspected: u64,
    pub at_goal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavigationConfig {
    /// Per-neighbour probability that the occupancy reading is correct.
    pub sensor_accuracy: f64,
    pub obstacle_prior: f64,
    pub discount: f64,
    pub max_steps: usize,
}

impl Default for NavigationConfig {
    fn default() -> Self {
        NavigationConfig {
            sensor_accuracy: 0.9,
            obstacle_prior: 0.25,
            discount: 0.983,
            max_steps: 60,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NavigationModel {
    spec: ProblemSpec,
    map: NavigationMap,
    config: NavigationConfig,
    starts: Vec<u8>,
    /// Per row, the columns that are always passable.
    static_free: Vec<u64>,
    /// Position of each unknown cell.
    unknown_cells: Vec<(u8, u8)>,
    log_hit: f64,
    log_miss: f64,
}

impl NavigationModel {
    pub fn new(map: NavigationMap, config: NavigationConfig) -> Result<Self> {
        if !(0.5..=1.0).contains(&config.sensor_accuracy) {
            return Err(PlanError::Config(
                "sensor accuracy must lie in [0.5, 1]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&config.obstacle_prior) {
            return Err(PlanError::Config(
                "obstacle prior must lie in [0, 1]".into(),
            ));
        }
        let spec = ProblemSpec::new("navigation", 9, 256, config.discount, config.max_steps)?;
        let starts = map.start_cells();
        let mut static_free = vec![0u64; map.rows];
        let mut unknown_cells = vec![(0, 0); map.unknown_count];
        for (r, row) in static_free.iter_mut().enumerate() {
            for c in 0..map.cols {
                match map.cell(r, c) {
                    Cell::Free | Cell::Goal => *row |= 1 << c,
                    Cell::Unknown(k) => unknown_cells[k as usize] = (r as u8, c as u8),
                    Cell::Wall | Cell::Gate(_) => {}
                }
            }
        }
        Ok(NavigationModel {
            spec,
            starts,
            static_free,
            unknown_cells,
            log_hit: config.sensor_accuracy.ln(),
            log_miss: (1.0 - config.sensor_accuracy).ln(),
            map,
            config,
        })
    }

    pub fn default_model() -> Self {
        Self::new(NavigationMap::default_map(), NavigationConfig::default())
            .expect("default config is valid")
    }

    pub fn map(&self) -> &NavigationMap {
        &self.map
    }

    /// Whether the robot cannot enter `(r, c)`: off the map, wall, closed gate or obstacle.
    pub fn blocked(&self, s: &NavigationState, r: i32, c: i32) -> bool {
        if r < 0 || c < 0 || r >= self.map.rows as i32 || c >= self.map.cols as i32 {
            return true;
        }
        match self.map.cell(r as usize, c as usize) {
            Cell::Free | Cell::Goal => false,
            Cell::Wall => true,
            Cell::Gate(g) => g != s.open_gate,
            Cell::Unknown(k) => s.obstacles >> k & 1 == 1,
        }
    }

    /// Gates among the eight neighbours of `(row, col)`.
    pub fn gates_in_view(&self, row: u8, col: u8) -> u64 {
        let mut mask = 0;
        for (g, &(gr, gc)) in self.map.gates.iter().enumerate() {
            if gr.abs_diff(row) <= 1 && gc.abs_diff(col) <= 1 {
                mask |= 1 << g;
            }
        }
        mask
    }

    /// Noise-free occupancy code of the neighbours of the robot's cell.
    pub fn true_reading(&self, s: &NavigationState) -> Obs {
        let mut code = 0;
        for (i, &(dr, dc)) in MOVES.iter().enumerate() {
            if self.blocked(s, s.row as i32 + dr as i32, s.col as i32 + dc as i32) {
                code |= 1 << i;
            }
        }
        code
    }

    /// Passable cells of `s` as row bitmasks.
    fn free_rows(&self, s: &NavigationState) -> [u64; MAX_SIDE] {
        let mut free = [0u64; MAX_SIDE];
        free[..self.map.rows].copy_from_slice(&self.static_free);
        let mut clear = !s.obstacles;
        if self.map.unknown_count < MAX_UNKNOWN {
            clear &= (1u128 << self.map.unknown_count) - 1;
        }
        while clear != 0 {
            let (r, c) = self.unknown_cells[clear.trailing_zeros() as usize];
            free[r as usize] |= 1 << c;
            clear &= clear - 1;
        }
        let (r, c) = self.map.gates[s.open_gate as usize];
        free[r as usize] |= 1 << c;
        free
    }

    /// Shortest-path lengths with 8-connected moves from `from` to each
    /// target, by breadth-first dilation of row bitmasks.
    fn path_lengths<const N: usize>(
        &self,
        free: &[u64; MAX_SIDE],
        from: (u8, u8),
        targets: [(u8, u8); N],
    ) -> [Option<u32>; N] {
        let rows = self.map.rows;
        let mut out = [None; N];
        let mut reach = [0u64; MAX_SIDE];
        reach[from.0 as usize] = 1 << from.1;
        let spread = |x: u64| x | x << 1 | x >> 1;
        for k in 0.. {
            let mut pending = false;
            for (slot, &(r, c)) in out.iter_mut().zip(&targets) {
                if slot.is_none() {
                    if reach[r as usize] >> c & 1 == 1 {
                        *slot = Some(k);
                    } else {
                        pending = true;
                    }
                }
            }
            if !pending {
                break;
            }
            let mut next = [0u64; MAX_SIDE];
            let mut grew = false;
            for r in 0..rows {
                let mut band = spread(reach[r]);
                if r > 0 {
                    band |= spread(reach[r - 1]);
                }
                if r + 1 < rows {
                    band |= spread(reach[r + 1]);
                }
                next[r] = reach[r] | band & free[r];
                grew |= next[r] != reach[r];
            }
            if !grew {
                break;
            }
            reach = next;
        }
        out
    }

    /// Steps taken by a walker that knows the obstacles of `s` but not which
    /// uninspected gate is open: it heads for the nearest uninspected gate,
    /// checks it from the cell in front, and moves on to the next nearest
    /// until it finds the open one, then takes the shortest path to the goal.
    /// Inspected closed gates are skipped and an inspected open gate is taken
    /// directly. `None` when the goal is unreachable in `s`.
    pub fn steps_to_goal(&self, s: &NavigationState) -> Option<u32> {
        let free = self.free_rows(s);
        let goal = self.map.goal;
        let mut pos = (s.row, s.col);
        let gates = &self.map.gates;
        let open = s.open_gate as usize;
        let wall_row = gates[open].0;
        let side = |r: u8| (r as i32 - wall_row as i32).signum();
        if pos.0 == wall_row || side(pos.0) == side(goal.0) || s.inspected >> open & 1 == 1 {
            return self.path_lengths(&free, pos, [goal])[0];
        }
        let toward = side(goal.0);
        let front = |g: usize| ((gates[g].0 as i32 - toward) as u8, gates[g].1);
        let mut tried = s.inspected;
        let mut steps = 0;
        loop {
            let mut best: Option<(u32, usize)> = None;
            for g in (0..gates.len()).filter(|&g| tried >> g & 1 == 0) {
                if let Some(d) = self.path_lengths(&free, pos, [front(g)])[0] {
                    if best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, g));
                    }
                }
            }
            let (d, next) = best?;
            if next == open {
                return self.path_lengths(&free, pos, [goal])[0].map(|k| steps + k);
            }
            steps += d;
            pos = front(next);
            tried |= 1 << next;
        }
    }
}

impl ProblemModel for NavigationModel {
    type State = NavigationState;

    fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    fn sample_initial_state(&self, rng: &mut CounterRng) -> NavigationState {
        let col = self.starts[rng.below(self.starts.len() as u64) as usize];
        let mut obstacles = 0u128;
        for k in 0..self.map.unknown_count {
            if rng.bernoulli(self.config.obstacle_prior) {
                obstacles |= 1 << k;
            }
        }
        let open_gate = rng.below(self.map.gates.len() as u64) as u8;
        NavigationState {
            row: 0,
            col,
            obstacles,
            open_gate,
            inspected: 0,
            at_goal: false,
        }
    }

    fn is_terminal(&self, s: &NavigationState) -> bool {
        s.at_goal
    }

    fn step(
        &self,
        s: &NavigationState,
        a: ActionId,
        rng: &mut CounterRng,
    ) -> Transition<NavigationState> {
        let mut next = *s;
        let reward = if a == STAY {
            STAY_PENALTY + STEP_PENALTY
        } else {
            let (dr, dc) = MOVES[a as usize];
            let (r, c) = (s.row as i32 + dr as i32, s.col as i32 + dc as i32);
            if self.blocked(s, r, c) {
                COLLISION_PENALTY + STEP_PENALTY
            } else {
                next.row = r as u8;
                next.col = c as u8;
                next.inspected |= self.gates_in_view(next.row, next.col);
                if (next.row, next.col) == self.map.goal {
                    next.at_goal = true;
                    GOAL_REWARD
                } else {
                    STEP_PENALTY
                }
            }
        };
        let mut observation = self.true_reading(&next);
        for i in 0..8 {
            if !rng.bernoulli(self.config.sensor_accuracy) {
                observation ^= 1 << i;
            }
        }
        Transition {
            next,
            observation,
            reward,
        }
    }

    fn observation_log_prob(&self, next: &NavigationState, _a: ActionId, obs: Obs) -> f64 {
        let wrong = (self.true_reading(next) ^ obs).count_ones();
        let mut lp = (8 - wrong) as f64 * self.log_hit;
        if wrong > 0 {
            lp += wrong as f64 * self.log_miss;
        }
        lp
    }

    /// Discounted return of the gate-searching walk of [`Self::steps_to_goal`].
    fn heuristic(&self, s: &NavigationState) -> f64 {
        let g = self.spec.discount;
        let Some(k) = self.steps_to_goal(s) else {
            return STEP_PENALTY / (1.0 - g);
        };
        let k = k as i32;
        if k == 0 {
            return 0.0;
        }
        STEP_PENALTY * (1.0 - g.powi(k - 1)) / (1.0 - g) + GOAL_REWARD * g.powi(k - 1)
    }

    fn align_initial(&self, particle: &mut NavigationState, truth: &NavigationState) {
        particle.row = truth.row;
        particle.col = truth.col;
        particle.inspected = truth.inspected;
    }

    fn reconcile_observed(&self, particle: &mut NavigationState, truth: &NavigationState) -> bool {
        particle.row == truth.row
            && particle.col == truth.col
            && particle.inspected == truth.inspected
            && particle.at_goal == truth.at_goal
    }

    fn tally(
        &self,
        counters: &mut Counters,
        s: &NavigationState,
        a: ActionId,
        t: &Transition<NavigationState>,
    ) {
        if a != STAY && (t.next.row, t.next.col) == (s.row, s.col) {
            *counters.entry("collisions".into()).or_default() += 1.0;
        }
        if t.next.at_goal {
            *counters.entry("goal_reached".into()).or_default() += 1.0;
        }
    }
}

/// Executed world with an exact factored belief.
///
/// Obstacle bits and the open gate are independent a priori, and every piece
/// of evidence (a move outcome or one sensor bit) bears on a single cell or on
/// the gate, so the posterior stays a product of per-cell Bernoullis and a
/// gate distribution. Each update draws fresh particles from it, which keeps
/// the particle set from collapsing onto a few maps.
#[derive(Debug, Clone)]
pub struct NavigationWorld {
    model: NavigationModel,
    state: NavigationState,
    prev: NavigationState,
    obstacle_probs: Vec<f64>,
    gate_probs: Vec<f64>,
    counters: Counters,
}

impl NavigationWorld {
    pub fn new(model: NavigationModel, key: StreamKey) -> Self {
        let state = model.sample_initial_state(&mut key.child(tags::WORLD).rng(0));
        Self::with_state(model, state)
    }

    pub fn with_state(model: NavigationModel, state: NavigationState) -> Self {
        let gates = model.map.gates.len();
        let mut counters = Counters::new();
        for name in ["collisions", "goal_reached"] {
            counters.insert(name.into(), 0.0);
        }
        NavigationWorld {
            obstacle_probs: vec![model.config.obstacle_prior; model.map.unknown_count],
            gate_probs: vec![1.0 / gates as f64; gates],
            model,
            state,
            prev: state,
            counters,
        }
    }

    pub fn state(&self) -> &NavigationState {
        &self.state
    }

    /// Posterior probability that each unknown cell holds an obstacle.
    pub fn obstacle_probs(&self) -> &[f64] {
        &self.obstacle_probs
    }

    pub fn gate_probs(&self) -> &[f64] {
        &self.gate_probs
    }

    /// Folds in the evidence that `cell` is (or is not) blocked, with
    /// likelihoods `(if_blocked, if_free)`.
    fn observe_cell(&mut self, r: i32, c: i32, lik: (f64, f64)) {
        let map = &self.model.map;
        if r < 0 || c < 0 || r >= map.rows as i32 || c >= map.cols as i32 {
            return;
        }
        match map.cell(r as usize, c as usize) {
            Cell::Unknown(k) => {
                let p = &mut self.obstacle_probs[k as usize];
                let num = *p * lik.0;
                let den = num + (1.0 - *p) * lik.1;
                if den > 0.0 {
                    *p = num / den;
                }
            }
            Cell::Gate(g) => {
                for (i, q) in self.gate_probs.iter_mut().enumerate() {
                    *q *= if i == g as usize { lik.1 } else { lik.0 };
                }
                let total: f64 = self.gate_probs.iter().sum();
                if total > 0.0 {
                    self.gate_probs.iter_mut().for_each(|q| *q /= total);
                }
            }
            _ => {}
        }
    }

    fn draw(&self, n: usize, key: StreamKey) -> Result<ParticleBelief<NavigationState>> {
        let states = (0..n)
            .map(|row| {
                let mut rng = key.rng(row as u64);
                let mut obstacles = 0u128;
                for (k, &p) in self.obstacle_probs.iter().enumerate() {
                    if rng.bernoulli(p) {
                        obstacles |= 1 << k;
                    }
                }
                let open_gate = crate::tree::categorical(&self.gate_probs, rng.uniform()) as u8;
                NavigationState {
                    obstacles,
                    open_gate,
                    ..self.state
                }
            })
            .collect();
        ParticleBelief::uniform(StateBatch::from_model(&self.model, states))
    }
}

impl Environment for NavigationWorld {
    type Model = NavigationModel;

    fn model(&self) -> &NavigationModel {
        &self.model
    }

    fn initial_belief(
        &mut self,
        particles: usize,
        key: StreamKey,
    ) -> Result<ParticleBelief<NavigationState>> {
        self.draw(particles, key)
    }

    fn execute(&mut self, action: ActionId, key: StreamKey) -> Result<Executed> {
        self.model.spec.check_action(action)?;
        if self.state.at_goal {
            return Ok(Executed {
                observation: TERMINAL_OBS,
                reward: 0.0,
                terminal: true,
            });
        }
        let t = self.model.step(&self.state, action, &mut key.rng(0));
        self.model
            .tally(&mut self.counters, &self.state, action, &t);
        self.prev = self.state;
        self.state = t.next;
        Ok(Executed {
            observation: t.observation,
            reward: t.reward,
            terminal: t.next.at_goal,
        })
    }

    fn update_belief(
        &mut self,
        belief: &ParticleBelief<NavigationState>,
        action: ActionId,
        observation: Obs,
        key: StreamKey,
    ) -> Result<UpdateOutcome<NavigationState>> {
        if action != STAY {
            let (dr, dc) = MOVES[action as usize];
            let (r, c) = (
                self.prev.row as i32 + dr as i32,
                self.prev.col as i32 + dc as i32,
            );
            let moved = (self.state.row, self.state.col) != (self.prev.row, self.prev.col);
            let lik = if moved { (0.0, 1.0) } else { (1.0, 0.0) };
            self.observe_cell(r, c, lik);
        }
        let acc = self.model.config.sensor_accuracy;
        for (i, &(dr, dc)) in MOVES.iter().enumerate() {
            let lik = if observation >> i & 1 == 1 {
                (acc, 1.0 - acc)
            } else {
                (1.0 - acc, acc)
            };
            self.observe_cell(
                self.state.row as i32 + dr as i32,
                self.state.col as i32 + dc as i32,
                lik,
            );
        }
        log::trace!(
            "robot at ({}, {}), open gate {}, gate belief {:?}",
            self.state.row,
            self.state.col,
            self.state.open_gate,
            self.gate_probs
        );
        let belief = self.draw(belief.len(), key.child(tags::REFRESH))?;
        Ok(UpdateOutcome {
            weight_error: belief.weight_error(),
            belief,
            degenerate: false,
            attempts: 1,
        })
    }

    fn counters(&self) -> Counters {
        self.counters.clone()
    }
}
