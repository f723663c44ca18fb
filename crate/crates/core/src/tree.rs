//! Columnar belief tree.
//!
//! Three tables describe the tree:
//!
//! * `B` ([`BeliefNodeTable`]): one row per belief node holding the index of
//!   its parent action node, the observation that led to it and its depth.
//!   Row 0 is the root; its parent fields are [`NULL`].
//! * `A` ([`ActionNodeTable`]): one row per action node holding its parent
//!   belief, the action id, the cumulative immediate reward and the visit count.
//! * `Psi` ([`PreferenceTable`]): one preference row of width `|A|` per belief.
//!
//! Appends are batched. Each batch of `(parent, key)` pairs is resolved
//! against a hash index; pairs not seen before become new rows in the order
//! they first occur in the batch, duplicates share a row.
//!
//! Preference rows start from a shared initial row and only change in columns
//! that have an action node (the backup only writes to those), so `Psi` keeps
//! the initial row once plus one value per action node. Dense rows are
//! materialized on read.

use std::collections::hash_map::Entry;
use std::fmt::Write as _;

use rustc_hash::FxHashMap;

use crate::error::{PlanError, Result};
use crate::model::{ActionId, Obs, ProblemModel};

/// Sentinel for absent parent fields and empty links.
pub const NULL: u32 = u32::MAX;

#[inline]
fn pack(a: u32, b: u32) -> u64 {
    ((a as u64) << 32) | b as u64
}

/// Hash index from `(parent, key)` pairs to row numbers.
#[derive(Debug, Clone, Default)]
pub struct PairIndex {
    map: FxHashMap<u64, u32>,
    len: u32,
}

impl PairIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds an index over existing rows; `keys[i]` is row `i`. Keys must be unique.
    pub fn from_keys(keys: &[(u32, u32)]) -> Self {
        let mut idx = PairIndex::new();
        for &(a, b) in keys {
            let prev = idx.map.insert(pack(a, b), idx.len);
            debug_assert!(prev.is_none(), "duplicate key in existing table");
            idx.len += 1;
        }
        idx
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, a: u32, b: u32) -> Option<u32> {
        self.map.get(&pack(a, b)).copied()
    }

    /// Resolves every query to a row, appending unseen pairs in first-occurrence
    /// order. Returns the per-query rows and the keys of the rows appended.
    pub fn match_or_append(&mut self, queries: &[(u32, u32)]) -> (Vec<u32>, Vec<(u32, u32)>) {
        let mut rows = Vec::with_capacity(queries.len());
        let mut fresh = Vec::new();
        for &(a, b) in queries {
            let row = match self.map.entry(pack(a, b)) {
                Entry::Occupied(e) => *e.get(),
                Entry::Vacant(e) => {
                    let row = self.len;
                    e.insert(row);
                    self.len += 1;
                    fresh.push((a, b));
                    row
                }
            };
            rows.push(row);
        }
        (rows, fresh)
    }
}

/// Resolves `query_keys` against `existing_keys` (row `i` holds `existing_keys[i]`).
/// Returns the row of every query and the number of rows that would be appended.
pub fn match_or_append_pairs(
    existing_keys: &[(u32, u32)],
    query_keys: &[(u32, u32)],
) -> (Vec<u32>, usize) {
    let mut idx = PairIndex::from_keys(existing_keys);
    let (rows, fresh) = idx.match_or_append(query_keys);
    (rows, fresh.len())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BeliefNodeTable {
    parent_action: Vec<u32>,
    parent_observation: Vec<u32>,
    depth: Vec<u32>,
}

impl BeliefNodeTable {
    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    pub fn parent_action(&self, row: u32) -> Option<u32> {
        let p = self.parent_action[row as usize];
        (p != NULL).then_some(p)
    }

    pub fn parent_observation(&self, row: u32) -> Option<Obs> {
        let o = self.parent_observation[row as usize];
        (o != NULL).then_some(o)
    }

    pub fn depth(&self, row: u32) -> u32 {
        self.depth[row as usize]
    }

    pub fn parent_action_column(&self) -> &[u32] {
        &self.parent_action
    }

    pub fn parent_observation_column(&self) -> &[u32] {
        &self.parent_observation
    }

    pub fn depth_column(&self) -> &[u32] {
        &self.depth
    }

    fn push(&mut self, parent_action: u32, parent_observation: u32, depth: u32) {
        self.parent_action.push(parent_action);
        self.parent_observation.push(parent_observation);
        self.depth.push(depth);
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActionNodeTable {
    parent_belief: Vec<u32>,
    action: Vec<u32>,
    cumulative_reward: Vec<f64>,
    visit_count: Vec<u64>,
}

impl ActionNodeTable {
    pub fn len(&self) -> usize {
        self.action.len()
    }

    pub fn is_empty(&self) -> bool {
        self.action.is_empty()
    }

    pub fn parent_belief(&self, row: u32) -> u32 {
        self.parent_belief[row as usize]
    }

    pub fn action(&self, row: u32) -> ActionId {
        self.action[row as usize]
    }

    pub fn cumulative_reward(&self, row: u32) -> f64 {
        self.cumulative_reward[row as usize]
    }

    pub fn visit_count(&self, row: u32) -> u64 {
        self.visit_count[row as usize]
    }

    pub fn parent_belief_column(&self) -> &[u32] {
        &self.parent_belief
    }

    pub fn action_column(&self) -> &[u32] {
        &self.action
    }

    pub fn cumulative_reward_column(&self) -> &[f64] {
        &self.cumulative_reward
    }

    pub fn visit_count_column(&self) -> &[u64] {
        &self.visit_count
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceTable {
    width: usize,
    initial: Vec<f64>,
    uniform_initial: bool,
    belief_index: Vec<u32>,
    /// `Psi(parent_belief(n), action(n))` for every action node `n`.
    realized: Vec<f64>,
}

impl PreferenceTable {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.belief_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.belief_index.is_empty()
    }

    /// Row every belief starts from.
    pub fn initial_row(&self) -> &[f64] {
        &self.initial
    }

    pub fn belief_index_column(&self) -> &[u32] {
        &self.belief_index
    }
}

/// The belief tree plus the bookkeeping used by search and backup.
#[derive(Debug, Clone)]
pub struct BeliefTree {
    beliefs: BeliefNodeTable,
    actions: ActionNodeTable,
    prefs: PreferenceTable,
    action_keys: PairIndex,
    belief_keys: PairIndex,
    /// Head of each belief's list of child action nodes.
    first_action: Vec<u32>,
    /// Next sibling in the parent belief's child list.
    next_sibling: Vec<u32>,
    beliefs_by_depth: Vec<Vec<u32>>,
    actions_by_depth: Vec<Vec<u32>>,
    /// Value and visit weight from the latest backup that touched each belief.
    value: Vec<f64>,
    weight: Vec<f64>,
}

/// Summary counts of a tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct TreeStats {
    pub belief_nodes: usize,
    pub action_nodes: usize,
    pub total_visits: u64,
    pub max_depth: usize,
}

impl BeliefTree {
    /// Tree holding only the root, with preference rows initialized from the
    /// model's reference policy at temperature `eta`.
    pub fn for_model<M: ProblemModel + ?Sized>(model: &M, eta: f64) -> Self {
        let width = model.spec().action_count;
        if model.has_uniform_reference() {
            Self::with_initial_row(vec![0.0; width])
        } else {
            let row = (0..width as u32)
                .map(|a| model.reference_log_prob(a) / eta)
                .collect();
            Self::with_initial_row(row)
        }
    }

    /// Tree holding only the root. Under a uniform reference the initial row
    /// is all zeros (softmax and argmax ignore the constant `-log|A|/eta`).
    pub fn with_initial_row(initial: Vec<f64>) -> Self {
        assert!(
            !initial.is_empty(),
            "preference rows need at least one action"
        );
        let uniform_initial = initial.iter().all(|&v| v == initial[0]);
        let width = initial.len();
        let mut tree = BeliefTree {
            beliefs: BeliefNodeTable::default(),
            actions: ActionNodeTable::default(),
            prefs: PreferenceTable {
                width,
                initial,
                uniform_initial,
                belief_index: Vec::new(),
                realized: Vec::new(),
            },
            action_keys: PairIndex::new(),
            // The root's key is (NULL, NULL), which no append can produce.
            belief_keys: PairIndex::from_keys(&[(NULL, NULL)]),
            first_action: Vec::new(),
            next_sibling: Vec::new(),
            beliefs_by_depth: Vec::new(),
            actions_by_depth: Vec::new(),
            value: Vec::new(),
            weight: Vec::new(),
        };
        tree.push_belief(NULL, NULL, 0);
        tree
    }

    pub fn uniform(action_count: usize) -> Self {
        Self::with_initial_row(vec![0.0; action_count])
    }

    pub fn beliefs(&self) -> &BeliefNodeTable {
        &self.beliefs
    }

    pub fn actions(&self) -> &ActionNodeTable {
        &self.actions
    }

    pub fn prefs(&self) -> &PreferenceTable {
        &self.prefs
    }

    pub fn action_count(&self) -> usize {
        self.prefs.width
    }

    pub fn stats(&self) -> TreeStats {
        TreeStats {
            belief_nodes: self.beliefs.len(),
            action_nodes: self.actions.len(),
            total_visits: self.actions.visit_count.iter().sum(),
            max_depth: self.beliefs_by_depth.len().saturating_sub(1),
        }
    }

    fn push_belief(&mut self, parent_action: u32, parent_observation: u32, depth: u32) -> u32 {
        let row = self.beliefs.len() as u32;
        self.beliefs.push(parent_action, parent_observation, depth);
        self.prefs.belief_index.push(row);
        self.first_action.push(NULL);
        self.value.push(0.0);
        self.weight.push(0.0);
        let d = depth as usize;
        if self.beliefs_by_depth.len() <= d {
            self.beliefs_by_depth.resize_with(d + 1, Vec::new);
        }
        self.beliefs_by_depth[d].push(row);
        row
    }

    fn push_action(&mut self, parent_belief: u32, action: ActionId) -> u32 {
        let row = self.actions.len() as u32;
        self.actions.parent_belief.push(parent_belief);
        self.actions.action.push(action);
        self.actions.cumulative_reward.push(0.0);
        self.actions.visit_count.push(0);
        self.prefs
            .realized
            .push(self.prefs.initial[action as usize]);
        self.next_sibling
            .push(self.first_action[parent_belief as usize]);
        self.first_action[parent_belief as usize] = row;
        let d = self.beliefs.depth(parent_belief) as usize;
        if self.actions_by_depth.len() <= d {
            self.actions_by_depth.resize_with(d + 1, Vec::new);
        }
        self.actions_by_depth[d].push(row);
        row
    }

    /// Resolves `(belief, action)` pairs to action nodes, creating missing ones,
    /// and adds one visit plus the row's reward to the resolved node of every row.
    pub fn append_actions(
        &mut self,
        belief_indices: &[u32],
        sampled_actions: &[ActionId],
        rewards: &[f64],
    ) -> Result<Vec<u32>> {
        if sampled_actions.len() != belief_indices.len() {
            return Err(PlanError::LengthMismatch {
                what: "sampled actions",
                got: sampled_actions.len(),
                expected: belief_indices.len(),
            });
        }
        if rewards.len() != belief_indices.len() {
            return Err(PlanError::LengthMismatch {
                what: "rewards",
                got: rewards.len(),
                expected: belief_indices.len(),
            });
        }
        let n_beliefs = self.beliefs.len();
        let mut keys = Vec::with_capacity(belief_indices.len());
        for (&b, &a) in belief_indices.iter().zip(sampled_actions) {
            if b as usize >= n_beliefs {
                return Err(PlanError::InvalidIndex {
                    table: "belief",
                    index: b,
                    len: n_beliefs,
                });
            }
            if a as usize >= self.prefs.width {
                return Err(PlanError::InvalidAction {
                    action: a,
                    action_count: self.prefs.width,
                });
            }
            keys.push((b, a));
        }
        let (rows, fresh) = self.action_keys.match_or_append(&keys);
        for (b, a) in fresh {
            self.push_action(b, a);
        }
        for (&row, &r) in rows.iter().zip(rewards) {
            let i = row as usize;
            self.actions.visit_count[i] += 1;
            self.actions.cumulative_reward[i] += r;
        }
        Ok(rows)
    }

    /// Resolves `(action node, observation)` pairs to belief nodes, creating
    /// missing ones one level below their parent action's belief.
    pub fn append_beliefs(
        &mut self,
        action_nodes: &[u32],
        observations: &[Obs],
    ) -> Result<Vec<u32>> {
        if observations.len() != action_nodes.len() {
            return Err(PlanError::LengthMismatch {
                what: "observations",
                got: observations.len(),
                expected: action_nodes.len(),
            });
        }
        let n_actions = self.actions.len();
        if let Some(&bad) = action_nodes.iter().find(|&&a| a as usize >= n_actions) {
            return Err(PlanError::InvalidIndex {
                table: "action",
                index: bad,
                len: n_actions,
            });
        }
        let keys: Vec<(u32, u32)> = action_nodes
            .iter()
            .zip(observations)
            .map(|(&a, &o)| (a, o))
            .collect();
        let (rows, fresh) = self.belief_keys.match_or_append(&keys);
        for (a, o) in fresh {
            let parent_depth = self.beliefs.depth(self.actions.parent_belief(a));
            self.push_belief(a, o, parent_depth + 1);
        }
        Ok(rows)
    }

    /// Belief rows at depth `d`, each with its parent action row and that
    /// action's parent belief row. Empty beyond the deepest level.
    pub fn nodes_at_depth(&self, d: u32) -> (Vec<u32>, Vec<u32>, Vec<u32>) {
        let Some(rows) = self.beliefs_by_depth.get(d as usize) else {
            return (Vec::new(), Vec::new(), Vec::new());
        };
        if d == 0 {
            return (rows.clone(), vec![NULL; rows.len()], vec![NULL; rows.len()]);
        }
        let parents: Vec<u32> = rows
            .iter()
            .map(|&b| self.beliefs.parent_action[b as usize])
            .collect();
        let grand: Vec<u32> = parents
            .iter()
            .map(|&a| self.actions.parent_belief[a as usize])
            .collect();
        (rows.clone(), parents, grand)
    }

    pub(crate) fn beliefs_at_depth(&self, d: usize) -> &[u32] {
        self.beliefs_by_depth
            .get(d)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub(crate) fn actions_at_depth(&self, d: usize) -> &[u32] {
        self.actions_by_depth
            .get(d)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Child action nodes of a belief, most recently created first.
    pub fn child_actions(&self, belief: u32) -> ChildActions<'_> {
        ChildActions {
            tree: self,
            next: self.first_action[belief as usize],
        }
    }

    pub fn has_children(&self, belief: u32) -> bool {
        self.first_action[belief as usize] != NULL
    }

    pub fn preference(&self, belief: u32, action: ActionId) -> f64 {
        self.child_actions(belief)
            .find(|&n| self.actions.action[n as usize] == action)
            .map(|n| self.prefs.realized[n as usize])
            .unwrap_or(self.prefs.initial[action as usize])
    }

    /// Dense preference row `Psi(belief, .)`.
    pub fn preference_row(&self, belief: u32) -> Vec<f64> {
        let mut row = self.prefs.initial.clone();
        for n in self.child_actions(belief) {
            row[self.actions.action[n as usize] as usize] = self.prefs.realized[n as usize];
        }
        row
    }

    /// `Psi` at the column of an action node.
    pub fn node_preference(&self, action_node: u32) -> f64 {
        self.prefs.realized[action_node as usize]
    }

    pub(crate) fn set_node_preference(&mut self, action_node: u32, value: f64) {
        self.prefs.realized[action_node as usize] = value;
    }

    pub(crate) fn belief_value(&self, belief: u32) -> (f64, f64) {
        (self.value[belief as usize], self.weight[belief as usize])
    }

    pub(crate) fn set_belief_value(&mut self, belief: u32, value: f64, weight: f64) {
        self.value[belief as usize] = value;
        self.weight[belief as usize] = weight;
    }

    /// Value and visit weight last assigned to `belief` by a backup (zeros if never).
    pub fn stored_value(&self, belief: u32) -> (f64, f64) {
        self.belief_value(belief)
    }

    /// Overrides the stored value of a belief. Used to seed values of beliefs
    /// that no backup has reached.
    pub fn seed_value(&mut self, belief: u32, value: f64, weight: f64) {
        self.set_belief_value(belief, value, weight);
    }

    /// `(1/eta) log sum_a exp(eta Psi(belief, a))`.
    pub fn log_sum_exp(&self, belief: u32, eta: f64) -> f64 {
        if !self.prefs.uniform_initial {
            return crate::backup::log_sum_exp(&self.preference_row(belief), eta);
        }
        let base = self.prefs.initial[0];
        let width = self.prefs.width;
        let mut k = 0usize;
        let mut m = f64::NEG_INFINITY;
        for n in self.child_actions(belief) {
            k += 1;
            m = m.max(self.prefs.realized[n as usize]);
        }
        if k < width {
            m = m.max(base);
        }
        let mut s = (width - k) as f64 * (eta * (base - m)).exp();
        for n in self.child_actions(belief) {
            s += (eta * (self.prefs.realized[n as usize] - m)).exp();
        }
        m + s.ln() / eta
    }

    /// Softmax policy of a belief's preference row.
    pub fn policy(&self, belief: u32, eta: f64) -> RowPolicy {
        if !self.prefs.uniform_initial || self.prefs.width <= 16 {
            return RowPolicy::dense(&self.preference_row(belief), eta);
        }
        let base = self.prefs.initial[0];
        let mut visited: Vec<(u32, f64)> = self
            .child_actions(belief)
            .map(|n| {
                (
                    self.actions.action[n as usize],
                    self.prefs.realized[n as usize],
                )
            })
            .collect();
        visited.sort_unstable_by_key(|&(a, _)| a);
        let width = self.prefs.width;
        let mut m = visited
            .iter()
            .fold(f64::NEG_INFINITY, |m, &(_, v)| m.max(v));
        if visited.len() < width {
            m = m.max(base);
        }
        let gap_weight = (eta * (base - m)).exp();
        let mut cumulative = Vec::with_capacity(visited.len());
        let mut acc = 0.0;
        let mut next = 0u32;
        for entry in visited.iter_mut() {
            entry.1 = (eta * (entry.1 - m)).exp();
            acc += (entry.0 - next) as f64 * gap_weight + entry.1;
            cumulative.push(acc);
            next = entry.0 + 1;
        }
        let total = acc + (width as u32 - next) as f64 * gap_weight;
        RowPolicy::Sparse {
            width: width as u32,
            visited,
            cumulative,
            gap_weight,
            total,
        }
    }

    /// Full-table scans of the structural invariants. Returns one message per violation.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let nb = self.beliefs.len();
        let na = self.actions.len();
        if nb == 0
            || self.beliefs.parent_action[0] != NULL
            || self.beliefs.parent_observation[0] != NULL
        {
            problems.push("row 0 is not a root with NULL parent fields".to_string());
        }
        let mut seen = FxHashMap::default();
        for b in 1..nb {
            let pa = self.beliefs.parent_action[b];
            let po = self.beliefs.parent_observation[b];
            if pa as usize >= na {
                problems.push(format!("belief {b}: parent action {pa} out of range"));
                continue;
            }
            if let Some(prev) = seen.insert(pack(pa, po), b) {
                problems.push(format!("beliefs {prev} and {b} share key ({pa}, {po})"));
            }
            let pb = self.actions.parent_belief[pa as usize];
            if self.beliefs.depth[b] != self.beliefs.depth[pb as usize] + 1 {
                problems.push(format!(
                    "belief {b}: depth inconsistent with parent belief {pb}"
                ));
            }
        }
        let mut seen = FxHashMap::default();
        for a in 0..na {
            let pb = self.actions.parent_belief[a];
            let act = self.actions.action[a];
            if pb as usize >= nb {
                problems.push(format!("action {a}: parent belief {pb} out of range"));
            }
            if act as usize >= self.prefs.width {
                problems.push(format!("action {a}: action id {act} out of range"));
            }
            if let Some(prev) = seen.insert(pack(pb, act), a) {
                problems.push(format!("actions {prev} and {a} share key ({pb}, {act})"));
            }
            if self.actions.visit_count[a] == 0 {
                problems.push(format!("action {a}: zero visits"));
            }
            if !self.actions.cumulative_reward[a].is_finite() {
                problems.push(format!("action {a}: non-finite cumulative reward"));
            }
            if !self.prefs.realized[a].is_finite() {
                problems.push(format!("action {a}: non-finite preference"));
            }
        }
        if self.prefs.belief_index.len() != nb
            || self
                .prefs
                .belief_index
                .iter()
                .enumerate()
                .any(|(i, &b)| b as usize != i)
        {
            problems.push("preference rows are not one-to-one with belief rows".to_string());
        }
        problems
    }

    /// Line-oriented dump: a `BASE` line with the initial preference row, then
    /// one tab-separated line per row of `B`, `A` and `PSI`. `NULL` prints as `-1`.
    pub fn to_debug_text(&self) -> String {
        let mut out = String::new();
        write_row(&mut out, "BASE", &[], &self.prefs.initial);
        for b in 0..self.beliefs.len() {
            let _ = writeln!(
                out,
                "B\t{}\t{}\t{}\t{}",
                b,
                null_as_neg(self.beliefs.parent_action[b]),
                null_as_neg(self.beliefs.parent_observation[b]),
                self.beliefs.depth[b]
            );
        }
        for a in 0..self.actions.len() {
            let _ = writeln!(
                out,
                "A\t{}\t{}\t{}\t{:?}\t{}",
                a,
                self.actions.parent_belief[a],
                self.actions.action[a],
                self.actions.cumulative_reward[a],
                self.actions.visit_count[a]
            );
        }
        for b in 0..self.beliefs.len() as u32 {
            write_row(&mut out, "PSI", &[b as i64], &self.preference_row(b));
        }
        out
    }

    /// Rebuilds a tree from [`BeliefTree::to_debug_text`] output.
    pub fn from_debug_text(text: &str) -> Result<Self> {
        let tables = DebugTables::parse(text)?;
        let mut tree = BeliefTree::with_initial_row(tables.base.clone());
        if tables.beliefs.first() != Some(&(-1, -1, 0)) {
            return Err(PlanError::Parse("first belief row must be the root".into()));
        }
        // Replay in creation order: an action node is inserted just before the
        // first belief that hangs off it.
        let mut next_action = 0usize;
        for (b, &(pa, po, depth)) in tables.beliefs.iter().enumerate().skip(1) {
            if pa < 0 || po < 0 {
                return Err(PlanError::Parse(format!("belief {b} has NULL parent")));
            }
            while next_action <= pa as usize {
                let &(pb, act, cum, visits) = tables.actions.get(next_action).ok_or_else(|| {
                    PlanError::Parse(format!("belief {b} references missing action {pa}"))
                })?;
                if pb as usize >= tree.beliefs.len() {
                    return Err(PlanError::Parse(format!(
                        "action {next_action} parent {pb} not yet defined"
                    )));
                }
                tree.insert_action_row(pb, act, cum, visits)?;
                next_action += 1;
            }
            let row = tree.push_belief(pa as u32, po as u32, depth);
            tree.belief_keys.match_or_append(&[(pa as u32, po as u32)]);
            if tree.beliefs.depth(row)
                != tree.beliefs.depth(tree.actions.parent_belief(pa as u32)) + 1
            {
                return Err(PlanError::Parse(format!("belief {b} depth inconsistent")));
            }
        }
        while next_action < tables.actions.len() {
            let (pb, act, cum, visits) = tables.actions[next_action];
            if pb as usize >= tree.beliefs.len() {
                return Err(PlanError::Parse(format!(
                    "action {next_action} parent {pb} undefined"
                )));
            }
            tree.insert_action_row(pb, act, cum, visits)?;
            next_action += 1;
        }
        if tables.prefs.len() != tree.beliefs.len() {
            return Err(PlanError::Parse("PSI rows do not match B rows".into()));
        }
        for (b, row) in &tables.prefs {
            if row.len() != tree.prefs.width {
                return Err(PlanError::Parse(format!("PSI row {b} has wrong width")));
            }
            let nodes: Vec<u32> = tree.child_actions(*b).collect();
            for (a, &v) in row.iter().enumerate() {
                match nodes
                    .iter()
                    .find(|&&n| tree.actions.action(n) as usize == a)
                {
                    Some(&n) => tree.prefs.realized[n as usize] = v,
                    None if v.to_bits() != tree.prefs.initial[a].to_bits() => {
                        return Err(PlanError::Parse(format!(
                            "PSI({b}, {a}) differs from the initial row without an action node"
                        )));
                    }
                    None => {}
                }
            }
        }
        Ok(tree)
    }

    fn insert_action_row(&mut self, parent: u32, action: u32, cum: f64, visits: u64) -> Result<()> {
        if action as usize >= self.prefs.width {
            return Err(PlanError::Parse(format!("action id {action} out of range")));
        }
        let (_, fresh) = self.action_keys.match_or_append(&[(parent, action)]);
        if fresh.is_empty() {
            return Err(PlanError::Parse(format!(
                "duplicate action key ({parent}, {action})"
            )));
        }
        let row = self.push_action(parent, action);
        self.actions.cumulative_reward[row as usize] = cum;
        self.actions.visit_count[row as usize] = visits;
        Ok(())
    }
}

pub struct ChildActions<'a> {
    tree: &'a BeliefTree,
    next: u32,
}

impl Iterator for ChildActions<'_> {
    type Item = u32;

    fn next(&mut self) -> Option<u32> {
        if self.next == NULL {
            return None;
        }
        let cur = self.next;
        self.next = self.tree.next_sibling[cur as usize];
        Some(cur)
    }
}

/// Categorical distribution over action ids built from a preference row.
///
/// Draws use the inverse-CDF convention of [`categorical`]: the first action
/// whose running weight exceeds `u * total`, scanning ids in increasing order.
#[derive(Debug, Clone)]
pub enum RowPolicy {
    Dense {
        weights: Vec<f64>,
        total: f64,
    },
    /// Unvisited columns share `gap_weight`; `visited` is sorted by action id
    /// and `cumulative[i]` is the mass of all columns up to `visited[i]`.
    Sparse {
        width: u32,
        visited: Vec<(u32, f64)>,
        cumulative: Vec<f64>,
        gap_weight: f64,
        total: f64,
    },
}

impl RowPolicy {
    pub fn dense(row: &[f64], eta: f64) -> Self {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = row.iter().map(|&v| (eta * (v - m)).exp()).collect();
        let total = weights.iter().sum();
        RowPolicy::Dense { weights, total }
    }

    pub fn probability(&self, action: ActionId) -> f64 {
        match self {
            RowPolicy::Dense { weights, total } => weights[action as usize] / total,
            RowPolicy::Sparse {
                visited,
                gap_weight,
                total,
                ..
            } => match visited.binary_search_by_key(&action, |&(a, _)| a) {
                Ok(i) => visited[i].1 / total,
                Err(_) => gap_weight / total,
            },
        }
    }

    pub fn sample(&self, u: f64) -> ActionId {
        match self {
            RowPolicy::Dense { weights, total } => categorical_weights(weights, u * total),
            RowPolicy::Sparse {
                width,
                visited,
                cumulative,
                gap_weight,
                total,
            } => {
                let t = u * total;
                let i = cumulative.partition_point(|&c| c <= t);
                let (before, start) = match i {
                    0 => (0.0, 0),
                    _ => (cumulative[i - 1], visited[i - 1].0 + 1),
                };
                let end = visited.get(i).map_or(*width, |&(a, _)| a);
                let gap = end - start;
                if gap > 0
                    && *gap_weight > 0.0
                    && (i == visited.len() || t - before < gap as f64 * gap_weight)
                {
                    let k = (((t - before).max(0.0) / gap_weight) as u32).min(gap - 1);
                    return start + k;
                }
                if i < visited.len() {
                    return visited[i].0;
                }
                // Rounding pushed the draw past the end: take the last column with mass.
                (0..*width)
                    .rev()
                    .find(|&a| self.probability(a) > 0.0)
                    .unwrap_or(0)
            }
        }
    }
}

/// Inverse-CDF draw from a probability (or unnormalized weight) vector with a
/// uniform `u` in `[0, 1)`.
pub fn categorical(probs: &[f64], u: f64) -> ActionId {
    let total: f64 = probs.iter().sum();
    categorical_weights(probs, u * total)
}

fn categorical_weights(weights: &[f64], target: f64) -> ActionId {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last_positive = i;
            if target < acc {
                return i as ActionId;
            }
        }
    }
    last_positive as ActionId
}

fn null_as_neg(v: u32) -> i64 {
    if v == NULL {
        -1
    } else {
        v as i64
    }
}

fn write_row(out: &mut String, tag: &str, ints: &[i64], floats: &[f64]) {
    out.push_str(tag);
    for i in ints {
        let _ = write!(out, "\t{i}");
    }
    for f in floats {
        let _ = write!(out, "\t{f:?}");
    }
    out.push('\n');
}

/// Parsed form of the debug dump, for diffing trees built by different paths.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DebugTables {
    pub base: Vec<f64>,
    /// `(parent_action, parent_observation, depth)`; `-1` is NULL.
    pub beliefs: Vec<(i64, i64, u32)>,
    /// `(parent_belief, action, cumulative_reward, visit_count)`.
    pub actions: Vec<(u32, u32, f64, u64)>,
    pub prefs: Vec<(u32, Vec<f64>)>,
}

impl DebugTables {
    pub fn parse(text: &str) -> Result<Self> {
        fn field<T: std::str::FromStr>(
            it: &mut std::str::Split<'_, char>,
            line: usize,
        ) -> Result<T> {
            it.next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| PlanError::Parse(format!("line {line}: bad field")))
        }
        let mut t = DebugTables::default();
        for (ln, line) in text.lines().enumerate() {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split('\t');
            match it.next() {
                Some("BASE") => {
                    t.base = it
                        .map(|s| {
                            s.parse()
                                .map_err(|_| PlanError::Parse(format!("line {ln}: bad float")))
                        })
                        .collect::<Result<_>>()?;
                }
                Some("B") => {
                    let idx: usize = field(&mut it, ln)?;
                    if idx != t.beliefs.len() {
                        return Err(PlanError::Parse(format!("line {ln}: B rows out of order")));
                    }
                    t.beliefs.push((
                        field(&mut it, ln)?,
                        field(&mut it, ln)?,
                        field(&mut it, ln)?,
                    ));
                }
                Some("A") => {
                    let idx: usize = field(&mut it, ln)?;
                    if idx != t.actions.len() {
                        return Err(PlanError::Parse(format!("line {ln}: A rows out of order")));
                    }
                    t.actions.push((
                        field(&mut it, ln)?,
                        field(&mut it, ln)?,
                        field(&mut it, ln)?,
                        field(&mut it, ln)?,
                    ));
                }
                Some("PSI") => {
                    let b: u32 = field(&mut it, ln)?;
                    let row = it
                        .map(|s| {
                            s.parse()
                                .map_err(|_| PlanError::Parse(format!("line {ln}: bad float")))
                        })
                        .collect::<Result<_>>()?;
                    t.prefs.push((b, row));
                }
                Some(other) => {
                    return Err(PlanError::Parse(format!("line {ln}: unknown tag {other}")))
                }
                None => {}
            }
        }
        Ok(t)
    }

    /// Compares two dumps: integer fields exactly, float fields within `tol`.
    pub fn diff(&self, other: &DebugTables, tol: f64) -> std::result::Result<(), String> {
        let close = |x: f64, y: f64| (x - y).abs() <= tol;
        if self.beliefs != other.beliefs {
            return Err(format!(
                "B tables differ ({} vs {} rows)",
                self.beliefs.len(),
                other.beliefs.len()
            ));
        }
        if self.actions.len() != other.actions.len() {
            return Err(format!(
                "A tables differ in length ({} vs {})",
                self.actions.len(),
                other.actions.len()
            ));
        }
        for (i, (x, y)) in self.actions.iter().zip(&other.actions).enumerate() {
            if x.0 != y.0 || x.1 != y.1 || x.3 != y.3 || !close(x.2, y.2) {
                return Err(format!("A row {i} differs: {x:?} vs {y:?}"));
            }
        }
        if self.prefs.len() != other.prefs.len() {
            return Err("PSI tables differ in length".into());
        }
        for ((b, x), (c, y)) in self.prefs.iter().zip(&other.prefs) {
            if b != c || x.len() != y.len() || x.iter().zip(y).any(|(&p, &q)| !close(p, q)) {
                return Err(format!("PSI row {b} differs: {x:?} vs {y:?}"));
            }
        }
        if self.base.len() != other.base.len()
            || self
                .base
                .iter()
                .zip(&other.base)
                .any(|(&p, &q)| !close(p, q))
        {
            return Err("initial rows differ".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fresh_tree_has_root_only() {
        let t = BeliefTree::uniform(8);
        assert_eq!(t.beliefs().len(), 1);
        assert_eq!(t.actions().len(), 0);
        assert_eq!(t.prefs().len(), 1);
        assert_eq!(t.beliefs().parent_action(0), None);
        assert_eq!(t.beliefs().parent_observation(0), None);
        assert_eq!(t.preference_row(0), vec![0.0; 8]);
    }

    #[test]
    fn dedup_first_occurrence() {
        let (rows, n) = match_or_append_pairs(&[], &[(0, 3), (0, 3), (0, 5)]);
        assert_eq!(rows, vec![0, 0, 1]);
        assert_eq!(n, 2);
        let (rows, n) = match_or_append_pairs(&[(0, 3)], &[(0, 3)]);
        assert_eq!(rows, vec![0]);
        assert_eq!(n, 0);
        let (rows, n) = match_or_append_pairs(&[(1, 1), (0, 3)], &[(2, 2), (0, 3), (2, 2), (1, 1)]);
        assert_eq!(rows, vec![2, 1, 2, 0]);
        assert_eq!(n, 1);
    }

    #[test]
    fn append_actions_scatter_adds() {
        let mut t = BeliefTree::uniform(4);
        let rows = t
            .append_actions(&[0, 0, 0], &[2, 2, 2], &[1.0, 1.0, 4.0])
            .unwrap();
        assert_eq!(rows, vec![0, 0, 0]);
        assert_eq!(t.actions().visit_count(0), 3);
        assert_eq!(t.actions().cumulative_reward(0), 6.0);
    }

    #[test]
    fn existing_action_node_accumulates() {
        let mut t = BeliefTree::uniform(4);
        t.append_actions(&[0; 5], &[1; 5], &[2.0; 5]).unwrap();
        assert_eq!(
            (t.actions().visit_count(0), t.actions().cumulative_reward(0)),
            (5, 10.0)
        );
        t.append_actions(&[0], &[1], &[2.0]).unwrap();
        assert_eq!(
            (t.actions().visit_count(0), t.actions().cumulative_reward(0)),
            (6, 12.0)
        );
    }

    #[test]
    fn append_contract_violations() {
        let mut t = BeliefTree::uniform(3);
        assert!(matches!(
            t.append_actions(&[4], &[0], &[0.0]),
            Err(PlanError::InvalidIndex { .. })
        ));
        assert!(matches!(
            t.append_actions(&[0], &[3], &[0.0]),
            Err(PlanError::InvalidAction { .. })
        ));
        assert!(matches!(
            t.append_actions(&[0], &[0, 1], &[0.0]),
            Err(PlanError::LengthMismatch { .. })
        ));
        assert!(matches!(
            t.append_beliefs(&[0], &[1]),
            Err(PlanError::InvalidIndex { .. })
        ));
    }

    #[test]
    fn append_beliefs_links_parents() {
        let mut t = BeliefTree::uniform(3);
        let a = t.append_actions(&[0, 0], &[1, 2], &[0.0, 0.0]).unwrap();
        let b = t.append_beliefs(&[a[0], a[1], a[0]], &[7, 7, 7]).unwrap();
        assert_eq!(b, vec![1, 2, 1]);
        assert_eq!(t.beliefs().parent_action(1), Some(a[0]));
        assert_eq!(t.beliefs().parent_observation(1), Some(7));
        assert_eq!(t.beliefs().depth(2), 1);
        assert_eq!(t.prefs().len(), 3);
        let (rows, parents, grand) = t.nodes_at_depth(1);
        assert_eq!(rows, vec![1, 2]);
        assert_eq!(parents, vec![a[0], a[1]]);
        assert_eq!(grand, vec![0, 0]);
        assert_eq!(t.nodes_at_depth(5), (vec![], vec![], vec![]));
        assert!(t.check_invariants().is_empty());
    }

    #[test]
    fn policy_forms_agree() {
        let mut t = BeliefTree::uniform(40);
        t.append_actions(&[0, 0, 0], &[3, 17, 39], &[0.0; 3])
            .unwrap();
        t.set_node_preference(0, 1.5);
        t.set_node_preference(1, -0.5);
        t.set_node_preference(2, 2.0);
        let sparse = t.policy(0, 2.0);
        let dense = RowPolicy::dense(&t.preference_row(0), 2.0);
        assert!(matches!(sparse, RowPolicy::Sparse { .. }));
        for a in 0..40 {
            assert!((sparse.probability(a) - dense.probability(a)).abs() < 1e-12);
        }
        for i in 0..2000 {
            let u = (i as f64 + 0.5) / 2000.0;
            assert_eq!(sparse.sample(u), dense.sample(u), "u = {u}");
        }
        let lse = crate::backup::log_sum_exp(&t.preference_row(0), 2.0);
        assert!((t.log_sum_exp(0, 2.0) - lse).abs() < 1e-12);
    }

    #[test]
    fn sparse_sampling_matches_dense_on_random_rows() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        for _ in 0..200 {
            let width = rng.random_range(17..80);
            let mut t = BeliefTree::uniform(width);
            let mut actions: Vec<u32> =
                (0..width as u32).filter(|_| rng.random_bool(0.3)).collect();
            if rng.random_bool(0.1) {
                actions = (0..width as u32).collect();
            }
            let nodes = t
                .append_actions(&vec![0; actions.len()], &actions, &vec![0.0; actions.len()])
                .unwrap();
            for &n in &nodes {
                t.set_node_preference(n, rng.random_range(-3.0..3.0));
            }
            let sparse = t.policy(0, 2.0);
            let dense = RowPolicy::dense(&t.preference_row(0), 2.0);
            for i in 0..500 {
                let u = (i as f64 + rng.random::<f64>()) / 500.0;
                assert_eq!(sparse.sample(u), dense.sample(u), "u = {u}");
            }
        }
    }

    #[test]
    fn debug_text_round_trip() {
        let mut t = BeliefTree::uniform(3);
        let a = t.append_actions(&[0, 0], &[1, 2], &[0.5, -1.25]).unwrap();
        let b = t.append_beliefs(&a, &[0, 4]).unwrap();
        let a2 = t.append_actions(&[b[1]], &[0], &[3.0]).unwrap();
        t.append_beliefs(&a2, &[1]).unwrap();
        t.set_node_preference(a[1], 0.1 + 0.2);
        let text = t.to_debug_text();
        let back = BeliefTree::from_debug_text(&text).unwrap();
        assert_eq!(back.to_debug_text(), text);
        assert!(back.check_invariants().is_empty());
    }

    /// Serial scan-and-append reference for pair matching.
    fn serial_dedup(existing: &[(u32, u32)], queries: &[(u32, u32)]) -> (Vec<u32>, usize) {
        let mut table: Vec<(u32, u32)> = existing.to_vec();
        let mut rows = Vec::new();
        for q in queries {
            match table.iter().position(|k| k == q) {
                Some(i) => rows.push(i as u32),
                None => {
                    table.push(*q);
                    rows.push(table.len() as u32 - 1);
                }
            }
        }
        (rows, table.len() - existing.len())
    }

    #[test]
    fn matches_serial_scan_on_random_pairs() {
        let key = crate::rng::StreamKey::new(5);
        let mut rng = key.rng(0);
        let existing: Vec<(u32, u32)> = {
            let mut v: Vec<(u32, u32)> = (0..300)
                .map(|_| (rng.below(40) as u32, rng.below(40) as u32))
                .collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let queries: Vec<(u32, u32)> = (0..10_000)
            .map(|_| (rng.below(60) as u32, rng.below(60) as u32))
            .collect();
        assert_eq!(
            match_or_append_pairs(&existing, &queries),
            serial_dedup(&existing, &queries)
        );
    }

    proptest! {
        #[test]
        fn batch_order_independence(pairs in prop::collection::vec((0u32..3, 0u32..4, -5.0f64..5.0), 1..40), seed in any::<u64>()) {
            let mut t1 = BeliefTree::uniform(4);
            t1.append_actions(&[0], &[0], &[0.0]).unwrap();
            let a0 = t1.append_beliefs(&[0, 0], &[0, 1]).unwrap();
            let mut t2 = t1.clone();
            let beliefs: Vec<u32> = pairs.iter().map(|p| [0, a0[0], a0[1]][p.0 as usize]).collect();
            let acts: Vec<u32> = pairs.iter().map(|p| p.1).collect();
            let rewards: Vec<f64> = pairs.iter().map(|p| p.2.round()).collect();
            let r1 = t1.append_actions(&beliefs, &acts, &rewards).unwrap();
            let mut perm: Vec<usize> = (0..pairs.len()).collect();
            let mut rng = crate::rng::StreamKey::new(seed).rng(0);
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.below(i as u64 + 1) as usize);
            }
            let pb: Vec<u32> = perm.iter().map(|&i| beliefs[i]).collect();
            let pa: Vec<u32> = perm.iter().map(|&i| acts[i]).collect();
            let pr: Vec<f64> = perm.iter().map(|&i| rewards[i]).collect();
            let r2 = t2.append_actions(&pb, &pa, &pr).unwrap();
            for (j, &i) in perm.iter().enumerate() {
                let (n1, n2) = (r1[i], r2[j]);
                prop_assert_eq!(t1.actions().parent_belief(n1), t2.actions().parent_belief(n2));
                prop_assert_eq!(t1.actions().action(n1), t2.actions().action(n2));
                prop_assert_eq!(t1.actions().visit_count(n1), t2.actions().visit_count(n2));
                prop_assert_eq!(t1.actions().cumulative_reward(n1), t2.actions().cumulative_reward(n2));
            }
            prop_assert!(t1.check_invariants().is_empty());
            prop_assert_eq!(t1.actions().len(), t2.actions().len());
        }
    }
}
