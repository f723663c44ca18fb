//! Episode-at-a-time planner over a linked-record tree.
//!
//! Mirrors the batched planner with one episode per iteration: the same stream
//! keys, dense preference rows, linear child lookups and a recursive backup.

use std::fmt::Write as _;

use crate::belief::ParticleBelief;
use crate::error::Result;
use crate::model::{ActionId, Obs, ProblemModel, TERMINAL_OBS};
use crate::rng::{tags, StreamKey};
use crate::search::level_key;
use crate::solver::iteration_key;

#[derive(Debug, Clone, PartialEq)]
pub struct SerialBelief {
    pub parent_action: Option<usize>,
    pub observation: Option<Obs>,
    pub depth: u32,
    pub actions: Vec<usize>,
    pub psi: Vec<f64>,
    pub value: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SerialAction {
    pub parent: usize,
    pub action: ActionId,
    pub cumulative_reward: f64,
    pub visits: u64,
    pub children: Vec<usize>,
}

/// Beliefs and actions stored in creation order.
#[derive(Debug, Clone, PartialEq)]
pub struct SerialTree {
    pub initial: Vec<f64>,
    pub beliefs: Vec<SerialBelief>,
    pub actions: Vec<SerialAction>,
}

fn lse(row: &[f64], eta: f64) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&v| (eta * (v - m)).exp()).sum::<f64>().ln() / eta
}

impl SerialTree {
    pub fn new(initial: Vec<f64>) -> Self {
        let root = SerialBelief {
            parent_action: None,
            observation: None,
            depth: 0,
            actions: Vec::new(),
            psi: initial.clone(),
            value: 0.0,
            weight: 0.0,
        };
        SerialTree {
            initial,
            beliefs: vec![root],
            actions: Vec::new(),
        }
    }

    pub fn for_model<M: ProblemModel + ?Sized>(model: &M, eta: f64) -> Self {
        let n = model.spec().action_count;
        if model.has_uniform_reference() {
            Self::new(vec![0.0; n])
        } else {
            Self::new(
                (0..n as u32)
                    .map(|a| model.reference_log_prob(a) / eta)
                    .collect(),
            )
        }
    }

    /// Finds or creates the action node `(b, a)`, then records one visit.
    pub fn visit_action(&mut self, b: usize, a: ActionId, reward: f64) -> usize {
        let found = self.beliefs[b]
            .actions
            .iter()
            .copied()
            .find(|&n| self.actions[n].action == a);
        let n = found.unwrap_or_else(|| {
            self.actions.push(SerialAction {
                parent: b,
                action: a,
                cumulative_reward: 0.0,
                visits: 0,
                children: Vec::new(),
            });
            let n = self.actions.len() - 1;
            self.beliefs[b].actions.push(n);
            n
        });
        self.actions[n].visits += 1;
        self.actions[n].cumulative_reward += reward;
        n
    }

    /// Finds or creates the belief reached from action node `n` by `o`.
    pub fn child_belief(&mut self, n: usize, o: Obs) -> usize {
        if let Some(c) = self.actions[n]
            .children
            .iter()
            .copied()
            .find(|&c| self.beliefs[c].observation == Some(o))
        {
            return c;
        }
        let depth = self.beliefs[self.actions[n].parent].depth + 1;
        self.beliefs.push(SerialBelief {
            parent_action: Some(n),
            observation: Some(o),
            depth,
            actions: Vec::new(),
            psi: self.initial.clone(),
            value: 0.0,
            weight: 0.0,
        });
        let c = self.beliefs.len() - 1;
        self.actions[n].children.push(c);
        c
    }

    /// Post-order backup of the subtree under `b`.
    pub fn backup_from(&mut self, b: usize, eta: f64, gamma: f64) {
        if self.beliefs[b].actions.is_empty() {
            return;
        }
        let actions = self.beliefs[b].actions.clone();
        let mut q = Vec::with_capacity(actions.len());
        for &n in &actions {
            let children = self.actions[n].children.clone();
            let mut num = 0.0;
            let mut den = 0.0;
            for c in children {
                self.backup_from(c, eta, gamma);
                num += self.beliefs[c].value * self.beliefs[c].weight;
                den += self.beliefs[c].weight;
            }
            let act = &self.actions[n];
            q.push(act.cumulative_reward / act.visits as f64 + gamma * num / den);
        }
        let v_curr = lse(&self.beliefs[b].psi, eta);
        let mut weight = 0.0;
        for (&n, &qa) in actions.iter().zip(&q) {
            let a = self.actions[n].action as usize;
            self.beliefs[b].psi[a] = self.beliefs[b].psi[a] - v_curr + qa;
            weight += self.actions[n].visits as f64;
        }
        self.beliefs[b].value = lse(&self.beliefs[b].psi, eta);
        self.beliefs[b].weight = weight;
    }

    /// Same layout as `BeliefTree::to_debug_text`.
    pub fn to_debug_text(&self) -> String {
        let mut out = String::from("BASE");
        for v in &self.initial {
            let _ = write!(out, "\t{v:?}");
        }
        out.push('\n');
        for (i, b) in self.beliefs.iter().enumerate() {
            let pa = b.parent_action.map_or(-1, |a| a as i64);
            let po = b.observation.map_or(-1, |o| o as i64);
            let _ = writeln!(out, "B\t{i}\t{pa}\t{po}\t{}", b.depth);
        }
        for (i, a) in self.actions.iter().enumerate() {
            let _ = writeln!(
                out,
                "A\t{i}\t{}\t{}\t{:?}\t{}",
                a.parent, a.action, a.cumulative_reward, a.visits
            );
        }
        for (i, b) in self.beliefs.iter().enumerate() {
            let _ = write!(out, "PSI\t{i}");
            for v in &b.psi {
                let _ = write!(out, "\t{v:?}");
            }
            out.push('\n');
        }
        out
    }
}

/// Runs `iterations` single-episode iterations (depth `i + 1` at iteration `i`,
/// stopping past `d_max_cap`), each followed by a full backup.
pub fn serial_search_backup<M: ProblemModel + ?Sized>(
    model: &M,
    belief: &ParticleBelief<M::State>,
    step_key: StreamKey,
    iterations: u32,
    d_max_cap: u32,
    eta: f64,
) -> Result<SerialTree> {
    let gamma = model.spec().discount;
    let mut tree = SerialTree::for_model(model, eta);
    for i in 0..iterations.min(d_max_cap) {
        let d_max = i + 1;
        let ik = iteration_key(step_key, i);
        let mut state = draw_particle(belief, ik.child(tags::SAMPLE_STATES));
        let mut terminal = model.is_terminal(&state);
        let mut b = 0;
        for depth in 0..d_max {
            let lk = level_key(ik, depth);
            let psi = &tree.beliefs[b].psi;
            let m = psi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = psi.iter().map(|&v| (eta * (v - m)).exp()).collect();
            let z: f64 = w.iter().sum();
            let p: Vec<f64> = w.iter().map(|x| x / z).collect();
            let a = crate::tree::categorical(&p, lk.child(tags::ACTION).rng(0).uniform());
            let (next, obs, reward) = if terminal {
                (state.clone(), TERMINAL_OBS, 0.0)
            } else {
                let t = model.step(&state, a, &mut lk.child(tags::STEP).rng(0));
                (t.next, t.observation, t.reward)
            };
            let n = tree.visit_action(b, a, reward);
            b = tree.child_belief(n, obs);
            state = next;
            terminal = model.is_terminal(&state);
        }
        tree.beliefs[b].value = if terminal {
            0.0
        } else {
            model.heuristic(&state)
        };
        tree.beliefs[b].weight = 1.0;
        tree.backup_from(0, eta, gamma);
    }
    Ok(tree)
}

fn draw_particle<S: Clone + Send + Sync>(belief: &ParticleBelief<S>, key: StreamKey) -> S {
    let w = belief.weights();
    let total: f64 = w.iter().sum();
    let t = key.rng(0).uniform() * total;
    let mut acc = 0.0;
    let mut pick = 0;
    for (i, &x) in w.iter().enumerate() {
        if x > 0.0 {
            acc += x;
            pick = i;
            if t < acc {
                break;
            }
        }
    }
    belief.particles().states()[pick].clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::tabular::tiger;
    use crate::tree::BeliefTree;

    #[test]
    fn single_episode_depth_one() {
        let m = tiger(0.85);
        let b = ParticleBelief::from_model(&m, 10, StreamKey::new(1)).unwrap();
        let t = serial_search_backup(&m, &b, StreamKey::new(2), 1, 90, 2.0).unwrap();
        assert_eq!(t.actions.len(), 1);
        assert_eq!(t.beliefs.len(), 2);
    }

    #[test]
    fn revisits_accumulate() {
        let mut t = SerialTree::new(vec![0.0; 2]);
        let n1 = t.visit_action(0, 1, 1.0);
        let n2 = t.visit_action(0, 1, 2.0);
        assert_eq!(n1, n2);
        assert_eq!(t.actions[n1].visits, 2);
        assert_eq!(t.actions[n1].cumulative_reward, 3.0);
    }

    #[test]
    fn matches_batched_planner_with_one_episode() {
        use crate::solver::{plan_with_tree, Budget, SolverConfig};
        use crate::tree::DebugTables;
        let m = tiger(0.85);
        let b = ParticleBelief::from_model(&m, 50, StreamKey::new(1)).unwrap();
        let config = SolverConfig {
            eta: 2.0,
            n_parallel: 1,
            budget: Budget::Iterations(6),
            d_max_cap: 90,
            particles: 50,
            verify: false,
        };
        for seed in 0..20 {
            let (_, tree) = plan_with_tree(&b, &m, &config, StreamKey::new(seed)).unwrap();
            let serial = serial_search_backup(&m, &b, StreamKey::new(seed), 6, 90, 2.0).unwrap();
            let x = DebugTables::parse(&tree.to_debug_text()).unwrap();
            let y = DebugTables::parse(&serial.to_debug_text()).unwrap();
            x.diff(&y, 1e-9).unwrap();
        }
    }

    #[test]
    fn text_round_trips_through_columnar_tree() {
        let m = tiger(0.85);
        let b = ParticleBelief::from_model(&m, 10, StreamKey::new(1)).unwrap();
        let t = serial_search_backup(&m, &b, StreamKey::new(3), 5, 90, 2.0).unwrap();
        let text = t.to_debug_text();
        let tree = BeliefTree::from_debug_text(&text).unwrap();
        assert_eq!(tree.to_debug_text(), text);
        assert!(tree.check_invariants().is_empty());
    }
}
