//! Batched forward search.
//!
//! All episodes of an iteration advance one level at a time: sample one
//! action per episode from its belief's softmax policy, step every episode
//! through the generative model, then resolve the sampled action nodes and
//! observation children in two batched appends.

use rustc_hash::FxHashMap;

use crate::error::{PlanError, Result};
use crate::model::{ActionId, ProblemModel, StateBatch};
use crate::rng::{tags, StreamKey};
use crate::tree::{categorical, BeliefTree, RowPolicy};

/// Frontier of an iteration: one belief index and one state per episode.
#[derive(Debug, Clone)]
pub struct SearchBatch<S> {
    pub belief_indices: Vec<u32>,
    pub states: StateBatch<S>,
    pub depth: u32,
}

impl<S> SearchBatch<S> {
    pub fn new(belief_indices: Vec<u32>, states: StateBatch<S>, depth: u32) -> Result<Self> {
        if belief_indices.len() != states.len() {
            return Err(PlanError::LengthMismatch {
                what: "belief indices",
                got: belief_indices.len(),
                expected: states.len(),
            });
        }
        Ok(SearchBatch {
            belief_indices,
            states,
            depth,
        })
    }

    /// All episodes start at the root.
    pub fn at_root(states: StateBatch<S>) -> Self {
        SearchBatch {
            belief_indices: vec![0; states.len()],
            states,
            depth: 0,
        }
    }
}

/// Beliefs reached at the search frontier and their heuristic values.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafResult {
    pub leaf_belief_indices: Vec<u32>,
    pub heuristic_values: Vec<f64>,
}

/// Row-wise softmax of `eta * row` with max subtraction.
pub fn softmax_rows(pref_rows: &[Vec<f64>], eta: f64) -> Vec<Vec<f64>> {
    pref_rows
        .iter()
        .map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = row.iter().map(|&v| (eta * (v - m)).exp()).collect();
            let z: f64 = w.iter().sum();
            w.into_iter().map(|x| x / z).collect()
        })
        .collect()
}

/// One categorical draw per row; row `i` uses the first uniform of `key.rng(i)`.
pub fn sample_actions(policies: &[Vec<f64>], key: StreamKey) -> Vec<ActionId> {
    policies
        .iter()
        .enumerate()
        .map(|(i, p)| categorical(p, key.rng(i as u64).uniform()))
        .collect()
}

/// Key for the draws made at one search level of an iteration.
pub fn level_key(iteration_key: StreamKey, depth: u32) -> StreamKey {
    iteration_key.child(tags::LEVEL).child(depth as u64)
}

/// Expands every episode of `batch` down to depth `d_max` and returns the
/// frontier beliefs with their heuristic values.
pub fn search<M: ProblemModel + ?Sized>(
    tree: &mut BeliefTree,
    model: &M,
    batch: SearchBatch<M::State>,
    d_max: u32,
    eta: f64,
    key: StreamKey,
) -> Result<LeafResult> {
    let SearchBatch {
        mut belief_indices,
        mut states,
        mut depth,
    } = batch;
    if belief_indices.len() != states.len() {
        return Err(PlanError::LengthMismatch {
            what: "belief indices",
            got: belief_indices.len(),
            expected: states.len(),
        });
    }
    if depth > d_max {
        return Err(PlanError::Config(format!(
            "search starts at depth {depth} beyond d_max {d_max}"
        )));
    }
    let mut slots: FxHashMap<u32, usize> = FxHashMap::default();
    let mut policies: Vec<RowPolicy> = Vec::new();
    while depth < d_max {
        let lk = level_key(key, depth);
        let action_key = lk.child(tags::ACTION);
        slots.clear();
        policies.clear();
        let mut actions = Vec::with_capacity(belief_indices.len());
        for (i, &b) in belief_indices.iter().enumerate() {
            let slot = *slots.entry(b).or_insert_with(|| {
                policies.push(tree.policy(b, eta));
                policies.len() - 1
            });
            actions.push(policies[slot].sample(action_key.rng(i as u64).uniform()));
        }
        let step = model.step_batch(&states, &actions, lk.child(tags::STEP))?;
        let action_nodes = tree.append_actions(&belief_indices, &actions, &step.rewards)?;
        belief_indices = tree.append_beliefs(&action_nodes, &step.observations)?;
        states = step.next_states;
        depth += 1;
    }
    let heuristic_values = model.value_heuristic(&states);
    Ok(LeafResult {
        leaf_belief_indices: belief_indices,
        heuristic_values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::tabular::tiger;

    #[test]
    fn softmax_examples() {
        let p = softmax_rows(&[vec![1.0; 4]], 2.0);
        assert_eq!(p[0], vec![0.25; 4]);
        let p = softmax_rows(&[vec![0.0, 2f64.ln()]], 1.0);
        assert!((p[0][0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((p[0][1] - 2.0 / 3.0).abs() < 1e-12);
        let a = softmax_rows(&[vec![0.3, -1.0, 2.0]], 1.5);
        let b = softmax_rows(&[vec![100.3, 99.0, 102.0]], 1.5);
        for (x, y) in a[0].iter().zip(&b[0]) {
            assert!((x - y).abs() < 1e-12);
        }
        let big = softmax_rows(&[vec![1e6, 0.0]], 2.0);
        assert_eq!(big[0], vec![1.0, 0.0]);
    }

    #[test]
    fn degenerate_policy_always_first() {
        let pol = vec![vec![1.0, 0.0, 0.0]; 500];
        assert!(sample_actions(&pol, StreamKey::new(4))
            .iter()
            .all(|&a| a == 0));
    }

    #[test]
    fn uniform_policy_frequencies() {
        let k = 4usize;
        let n = 100_000;
        let pol = vec![vec![0.25; k]; n];
        let draws = sample_actions(&pol, StreamKey::new(8));
        let mut counts = vec![0usize; k];
        for a in draws {
            counts[a as usize] += 1;
        }
        let p = 1.0 / k as f64;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sd, "{c}");
        }
    }

    #[test]
    fn draws_do_not_depend_on_batch_width() {
        let wide = sample_actions(&vec![vec![0.2, 0.3, 0.5]; 300], StreamKey::new(2));
        let narrow = sample_actions(&vec![vec![0.2, 0.3, 0.5]; 7], StreamKey::new(2));
        assert_eq!(&wide[..7], &narrow[..]);
    }

    #[test]
    fn zero_depth_is_identity() {
        let model = tiger(0.85);
        let mut tree = BeliefTree::for_model(&model, 2.0);
        let states = model.sample_initial_states(5, StreamKey::new(1));
        let leaves = search(
            &mut tree,
            &model,
            SearchBatch::at_root(states),
            0,
            2.0,
            StreamKey::new(1),
        )
        .unwrap();
        assert_eq!(leaves.leaf_belief_indices, vec![0; 5]);
        assert_eq!(leaves.heuristic_values, vec![10.0; 5]);
        assert_eq!(tree.actions().len(), 0);
        assert_eq!(tree.beliefs().len(), 1);
    }

    #[test]
    fn visit_conservation_and_growth_bound() {
        let model = tiger(0.85);
        let mut tree = BeliefTree::for_model(&model, 2.0);
        let n = 64;
        let d = 5;
        let states = model.sample_initial_states(n, StreamKey::new(3));
        let leaves = search(
            &mut tree,
            &model,
            SearchBatch::at_root(states),
            d,
            2.0,
            StreamKey::new(9),
        )
        .unwrap();
        assert_eq!(leaves.leaf_belief_indices.len(), n);
        assert_eq!(tree.stats().total_visits, (n * d as usize) as u64);
        assert!(tree.actions().len() <= n * d as usize);
        assert!(tree.beliefs().len() - 1 <= n * d as usize);
        for &b in &leaves.leaf_belief_indices {
            assert_eq!(tree.beliefs().depth(b), d);
        }
        assert!(tree.check_invariants().is_empty());
    }

    #[test]
    fn start_beyond_d_max_rejected() {
        let model = tiger(0.85);
        let mut tree = BeliefTree::for_model(&model, 2.0);
        let states = model.sample_initial_states(1, StreamKey::new(1));
        let batch = SearchBatch::new(vec![0], states, 3).unwrap();
        assert!(search(&mut tree, &model, batch, 2, 2.0, StreamKey::new(1)).is_err());
    }
}
