//! Exact finite-horizon value iteration and Bayes filtering for tabular POMDPs.

use rustc_hash::FxHashMap;

use crate::envs::tabular::TabularPomdp;
use crate::error::{PlanError, Result};
use crate::model::{ActionId, Obs};

/// Memo entries allowed before enumeration gives up.
pub const DEFAULT_CAPACITY: usize = 2_000_000;

/// Exact `tau(b, a, o)`.
pub fn exact_bayes_filter(
    p: &TabularPomdp,
    belief: &[f64],
    action: ActionId,
    obs: Obs,
) -> Result<Vec<f64>> {
    let (post, norm) = unnormalized_posterior(p, belief, action, obs);
    if norm <= 0.0 {
        return Err(PlanError::ImpossibleEvidence { observation: obs });
    }
    Ok(post.into_iter().map(|x| x / norm).collect())
}

fn unnormalized_posterior(p: &TabularPomdp, b: &[f64], a: ActionId, o: Obs) -> (Vec<f64>, f64) {
    let (a, o) = (a as usize, o as usize);
    let mut post = vec![0.0; p.n_states];
    for (s, &bs) in b.iter().enumerate() {
        if bs == 0.0 {
            continue;
        }
        for (s2, &t) in p.transition[s][a].iter().enumerate() {
            post[s2] += bs * t;
        }
    }
    for (s2, x) in post.iter_mut().enumerate() {
        *x *= p.observation[s2][a][o];
    }
    let norm = post.iter().sum();
    (post, norm)
}

/// Optimal value, action and alpha vector at one belief.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactSolution {
    pub value: f64,
    pub action: ActionId,
    /// Expected return of the optimal conditional plan from each state.
    pub alpha: Vec<f64>,
    /// Value of committing to each first action.
    pub action_values: Vec<f64>,
}

/// Finite-horizon optimum at `belief` by enumerating reachable beliefs.
/// Terminal states contribute nothing after they are reached.
pub fn exact_value_iteration(
    p: &TabularPomdp,
    belief: &[f64],
    horizon: usize,
    discount: f64,
) -> Result<ExactSolution> {
    let mut solver = Enumerator {
        p,
        discount,
        memo: FxHashMap::default(),
        capacity: DEFAULT_CAPACITY,
    };
    solver.solve(belief, horizon)
}

/// [`exact_value_iteration`] with an explicit memo capacity.
pub fn exact_value_iteration_with_capacity(
    p: &TabularPomdp,
    belief: &[f64],
    horizon: usize,
    discount: f64,
    capacity: usize,
) -> Result<ExactSolution> {
    let mut solver = Enumerator {
        p,
        discount,
        memo: FxHashMap::default(),
        capacity,
    };
    solver.solve(belief, horizon)
}

struct Enumerator<'a> {
    p: &'a TabularPomdp,
    discount: f64,
    memo: FxHashMap<(usize, Vec<i64>), ExactSolution>,
    capacity: usize,
}

impl Enumerator<'_> {
    fn key(b: &[f64]) -> Vec<i64> {
        b.iter().map(|x| (x * 1e12).round() as i64).collect()
    }

    #[allow(clippy::needless_range_loop)]
    fn solve(&mut self, b: &[f64], h: usize) -> Result<ExactSolution> {
        let p = self.p;
        let ns = p.n_states;
        let live: f64 = b
            .iter()
            .zip(&p.terminal)
            .filter(|(_, &t)| !t)
            .map(|(x, _)| x)
            .sum();
        if h == 0 || live <= 0.0 {
            return Ok(ExactSolution {
                value: 0.0,
                action: 0,
                alpha: vec![0.0; ns],
                action_values: vec![0.0; p.spec.action_count],
            });
        }
        let key = (h, Self::key(b));
        if let Some(s) = self.memo.get(&key) {
            return Ok(s.clone());
        }
        if self.memo.len() >= self.capacity {
            return Err(PlanError::Capacity(format!(
                "more than {} reachable beliefs at horizon {h}",
                self.capacity
            )));
        }
        let mut best: Option<(f64, ActionId, Vec<f64>)> = None;
        let mut action_values = Vec::with_capacity(p.spec.action_count);
        for a in 0..p.spec.action_count {
            let mut alpha: Vec<f64> = (0..ns)
                .map(|s| if p.terminal[s] { 0.0 } else { p.reward[s][a] })
                .collect();
            for o in 0..p.spec.observation_count {
                let (post, norm) = unnormalized_posterior(p, b, a as ActionId, o as Obs);
                if norm <= 0.0 {
                    continue;
                }
                let next: Vec<f64> = post.iter().map(|x| x / norm).collect();
                let child = self.solve(&next, h - 1)?;
                for s in 0..ns {
                    if p.terminal[s] {
                        continue;
                    }
                    let mut future = 0.0;
                    for s2 in 0..ns {
                        let t = p.transition[s][a][s2];
                        if t > 0.0 {
                            future += t * p.observation[s2][a][o] * child.alpha[s2];
                        }
                    }
                    alpha[s] += self.discount * future;
                }
            }
            let v: f64 = alpha.iter().zip(b).map(|(x, y)| x * y).sum();
            action_values.push(v);
            if best.as_ref().is_none_or(|(bv, _, _)| v > *bv + 1e-12) {
                best = Some((v, a as ActionId, alpha));
            }
        }
        let (value, action, alpha) = best.expect("at least one action");
        let sol = ExactSolution {
            value,
            action,
            alpha,
            action_values,
        };
        self.memo.insert(key, sol.clone());
        Ok(sol)
    }
}

/// Finite-horizon value iteration on the fully observed MDP underlying `p`.
pub fn mdp_value_iteration(p: &TabularPomdp, horizon: usize, discount: f64) -> Vec<f64> {
    let ns = p.n_states;
    let mut v = vec![0.0; ns];
    for _ in 0..horizon {
        v = (0..ns)
            .map(|s| {
                if p.terminal[s] {
                    return 0.0;
                }
                (0..p.spec.action_count)
                    .map(|a| {
                        p.reward[s][a]
                            + discount
                                * (0..ns)
                                    .map(|s2| p.transition[s][a][s2] * v[s2])
                                    .sum::<f64>()
                    })
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::tabular::*;

    #[test]
    fn tiger_listen_posterior() {
        let p = tiger_pomdp(0.85, 0.95);
        let b = exact_bayes_filter(&p, &[0.5, 0.5, 0.0], LISTEN, HEAR_LEFT).unwrap();
        assert!((b[0] - 0.85).abs() < 1e-12);
    }

    #[test]
    fn uninformative_and_deterministic_filters() {
        let p = tiger_pomdp(0.5, 0.95);
        let b = exact_bayes_filter(&p, &[0.3, 0.7, 0.0], LISTEN, HEAR_LEFT).unwrap();
        assert!((b[0] - 0.3).abs() < 1e-12);
        let p = tiger_pomdp(1.0, 0.95);
        let b = exact_bayes_filter(&p, &[0.3, 0.7, 0.0], LISTEN, HEAR_RIGHT).unwrap();
        assert_eq!(b, vec![0.0, 1.0, 0.0]);
        assert!(matches!(
            exact_bayes_filter(&p, &[1.0, 0.0, 0.0], LISTEN, HEAR_RIGHT),
            Err(PlanError::ImpossibleEvidence { observation: 1 })
        ));
    }

    #[test]
    fn horizon_one_listens_at_uniform() {
        let p = tiger_pomdp(0.85, 0.95);
        let s = exact_value_iteration(&p, &[0.5, 0.5, 0.0], 1, 0.95).unwrap();
        assert_eq!(s.action, LISTEN);
        assert_eq!(s.value, -1.0);
        assert_eq!(s.action_values, vec![-1.0, -45.0, -45.0]);
    }

    #[test]
    fn zero_discount_is_greedy() {
        let p = tiger_pomdp(0.85, 0.95);
        let b = [0.95, 0.05, 0.0];
        let s = exact_value_iteration(&p, &b, 10, 0.0).unwrap();
        let immediate: Vec<f64> = (0..3)
            .map(|a| b[0] * p.reward[0][a] + b[1] * p.reward[1][a])
            .collect();
        let greedy = (0..3)
            .max_by(|&x, &y| immediate[x].partial_cmp(&immediate[y]).unwrap())
            .unwrap();
        assert_eq!(s.action as usize, greedy);
        assert!((s.value - immediate[greedy]).abs() < 1e-12);
    }

    #[test]
    fn point_mass_matches_mdp() {
        let p = tiger_pomdp(0.85, 0.95);
        let v = mdp_value_iteration(&p, 12, 0.95);
        let s = exact_value_iteration(&p, &[0.0, 1.0, 0.0], 12, 0.95).unwrap();
        assert!((s.value - v[1]).abs() < 1e-9);
        assert_eq!(s.value, 10.0);
    }

    #[test]
    fn capacity_error() {
        let p = tiger_pomdp(0.85, 0.95);
        assert!(matches!(
            exact_value_iteration_with_capacity(&p, &[0.5, 0.5, 0.0], 20, 0.95, 5),
            Err(PlanError::Capacity(_))
        ));
    }
}
