//! Level-by-level preference backup.
//!
//! Frontier beliefs get the mean of their heuristic values, weighted by how
//! often the batch reached them. Going up one level at a time, every action
//! node gets `Q = mean reward + gamma * W`, where `W` is the visit-weighted
//! mean value of its child beliefs, and each parent belief's visited columns
//! move by `Q - LSE(row)`. The belief's new value is the log-sum-exp of the
//! updated row; its weight is the sum of its actions' visit counts.
//!
//! Beliefs without children keep the value and weight they last received,
//! which is how shallower frontiers of earlier iterations keep contributing.

use rustc_hash::FxHashMap;

use crate::error::{PlanError, Result};
use crate::search::LeafResult;
use crate::tree::BeliefTree;

/// `(1/eta) log sum_a exp(eta row_a)` with max subtraction.
pub fn log_sum_exp(row: &[f64], eta: f64) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s: f64 = row.iter().map(|&v| (eta * (v - m)).exp()).sum();
    m + s.ln() / eta
}

pub fn log_sum_exp_rows(pref_rows: &[Vec<f64>], eta: f64) -> Vec<f64> {
    pref_rows.iter().map(|r| log_sum_exp(r, eta)).collect()
}

/// Values and visit weights for a set of beliefs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LevelValues {
    pub belief_indices: Vec<u32>,
    pub values: Vec<f64>,
    pub visit_weights: Vec<f64>,
}

impl LevelValues {
    pub fn len(&self) -> usize {
        self.belief_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.belief_indices.is_empty()
    }
}

/// Groups the frontier by belief: weight = occurrences, value = mean heuristic.
/// Beliefs are listed in first-occurrence order.
pub fn aggregate_leaves(leaves: &LeafResult) -> LevelValues {
    let mut slot: FxHashMap<u32, usize> = FxHashMap::default();
    let mut out = LevelValues::default();
    for (&b, &h) in leaves
        .leaf_belief_indices
        .iter()
        .zip(&leaves.heuristic_values)
    {
        let i = *slot.entry(b).or_insert_with(|| {
            out.belief_indices.push(b);
            out.values.push(0.0);
            out.visit_weights.push(0.0);
            out.belief_indices.len() - 1
        });
        out.values[i] += h;
        out.visit_weights[i] += 1.0;
    }
    for (v, n) in out.values.iter_mut().zip(&out.visit_weights) {
        *v /= n;
    }
    out
}

/// `Q(a) = C(a)/N(a) + gamma * sum_c V(c) N(c) / sum_c N(c)` over the children
/// of each listed action node that appear in `child_values`.
pub fn action_q_values(
    tree: &BeliefTree,
    parent_action_rows: &[u32],
    child_values: &LevelValues,
    gamma: f64,
) -> Result<Vec<f64>> {
    let mut slot: FxHashMap<u32, usize> = FxHashMap::default();
    for (i, &a) in parent_action_rows.iter().enumerate() {
        if a as usize >= tree.actions().len() {
            return Err(PlanError::InvalidIndex {
                table: "action",
                index: a,
                len: tree.actions().len(),
            });
        }
        slot.insert(a, i);
    }
    let mut num = vec![0.0; parent_action_rows.len()];
    let mut den = vec![0.0; parent_action_rows.len()];
    for ((&c, &v), &n) in child_values
        .belief_indices
        .iter()
        .zip(&child_values.values)
        .zip(&child_values.visit_weights)
    {
        if let Some(pa) = tree.beliefs().parent_action(c) {
            if let Some(&i) = slot.get(&pa) {
                num[i] += v * n;
                den[i] += n;
            }
        }
    }
    parent_action_rows
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let visits = tree.actions().visit_count(a);
            if visits == 0 {
                return Err(PlanError::UnvisitedAction(a));
            }
            if den[i] <= 0.0 {
                return Err(PlanError::MissingChildValue(a));
            }
            Ok(tree.actions().cumulative_reward(a) / visits as f64 + gamma * num[i] / den[i])
        })
        .collect()
}

/// Runs the backup from depth `d_max` to the root.
pub fn backup(
    tree: &mut BeliefTree,
    leaves: &LeafResult,
    d_max: u32,
    eta: f64,
    gamma: f64,
) -> Result<()> {
    let frontier = aggregate_leaves(leaves);
    for ((&b, &v), &n) in frontier
        .belief_indices
        .iter()
        .zip(&frontier.values)
        .zip(&frontier.visit_weights)
    {
        tree.set_belief_value(b, v, n);
    }
    let mut q_by_node = vec![0.0; tree.actions().len()];
    for d in (1..=d_max as usize).rev() {
        let actions = tree.actions_at_depth(d - 1);
        if actions.is_empty() {
            continue;
        }
        let children = tree.beliefs_at_depth(d);
        let mut level = LevelValues {
            belief_indices: children.to_vec(),
            values: Vec::with_capacity(children.len()),
            visit_weights: Vec::with_capacity(children.len()),
        };
        for &c in children {
            let (v, n) = tree.belief_value(c);
            level.values.push(v);
            level.visit_weights.push(n);
        }
        let actions = actions.to_vec();
        let q = action_q_values(tree, &actions, &level, gamma)?;
        for (&a, &qa) in actions.iter().zip(&q) {
            q_by_node[a as usize] = qa;
        }
        let parents: Vec<u32> = tree
            .beliefs_at_depth(d - 1)
            .iter()
            .copied()
            .filter(|&b| tree.has_children(b))
            .collect();
        let mut nodes = Vec::new();
        for b in parents {
            let v_curr = tree.log_sum_exp(b, eta);
            nodes.clear();
            nodes.extend(tree.child_actions(b));
            let mut weight = 0.0;
            for &a in &nodes {
                weight += tree.actions().visit_count(a) as f64;
                let psi = tree.node_preference(a) - v_curr + q_by_node[a as usize];
                tree.set_node_preference(a, psi);
            }
            let v = tree.log_sum_exp(b, eta);
            tree.set_belief_value(b, v, weight);
        }
    }
    Ok(())
}
