//! Finite POMDPs given by explicit tables, and the Tiger problem built from them.

use crate::error::{PlanError, Result};
use crate::model::{ActionId, Obs, ProblemModel, ProblemSpec, Transition};
use crate::oracle::mdp_value_iteration;
use crate::rng::CounterRng;

/// Explicit `T`, `Z`, `R` tables over states `0..n_states`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPomdp {
    pub spec: ProblemSpec,
    pub n_states: usize,
    /// `transition[s][a][s']`
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `observation[s'][a][o]`
    pub observation: Vec<Vec<Vec<f64>>>,
    /// `reward[s][a]`
    pub reward: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
    pub terminal: Vec<bool>,
}

impl TabularPomdp {
    /// Checks shapes and that every distribution sums to one.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let (ns, na, no) = (
            self.n_states,
            self.spec.action_count,
            self.spec.observation_count,
        );
        let dist_ok = |p: &[f64], n: usize| {
            p.len() == n
                && p.iter().all(|&x| x >= 0.0)
                && (p.iter().sum::<f64>() - 1.0).abs() < 1e-9
        };
        if self.transition.len() != ns || self.observation.len() != ns || self.reward.len() != ns {
            return Err(PlanError::Config(
                "table sizes do not match n_states".into(),
            ));
        }
        for s in 0..ns {
            if self.transition[s].len() != na
                || self.observation[s].len() != na
                || self.reward[s].len() != na
            {
                return Err(PlanError::Config(format!("state {s}: wrong action count")));
            }
            for a in 0..na {
                if !dist_ok(&self.transition[s][a], ns) {
                    return Err(PlanError::Config(format!(
                        "T({s},{a},.) is not a distribution"
                    )));
                }
                if !dist_ok(&self.observation[s][a], no) {
                    return Err(PlanError::Config(format!(
                        "Z({s},{a},.) is not a distribution"
                    )));
                }
            }
        }
        if !dist_ok(&self.initial, ns) || self.terminal.len() != ns {
            return Err(PlanError::Config(
                "bad initial distribution or terminal mask".into(),
            ));
        }
        Ok(())
    }
}

/// A [`TabularPomdp`] exposed as a generative model with `u32` states.
/// Leaves are valued by the fully observed MDP over the episode horizon.
#[derive(Debug, Clone)]
pub struct TabularModel {
    pub pomdp: TabularPomdp,
    leaf_values: Vec<f64>,
}

impl TabularModel {
    pub fn new(pomdp: TabularPomdp) -> Result<Self> {
        pomdp.validate()?;
        let leaf_values = mdp_value_iteration(&pomdp, pomdp.spec.max_steps, pomdp.spec.discount);
        Ok(TabularModel { pomdp, leaf_values })
    }
}

fn draw(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > 0.0 {
            acc += x;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

impl ProblemModel for TabularModel {
    type State = u32;

    fn spec(&self) -> &ProblemSpec {
        &self.pomdp.spec
    }

    fn sample_initial_state(&self, rng: &mut CounterRng) -> u32 {
        draw(&self.pomdp.initial, rng.uniform()) as u32
    }

    fn is_terminal(&self, s: &u32) -> bool {
        self.pomdp.terminal[*s as usize]
    }

    fn heuristic(&self, s: &u32) -> f64 {
        self.leaf_values[*s as usize]
    }

    fn step(&self, s: &u32, a: ActionId, rng: &mut CounterRng) -> Transition<u32> {
        let p = &self.pomdp;
        let next = draw(&p.transition[*s as usize][a as usize], rng.uniform());
        let obs = draw(&p.observation[next][a as usize], rng.uniform());
        Transition {
            next: next as u32,
            observation: obs as Obs,
            reward: p.reward[*s as usize][a as usize],
        }
    }

    fn observation_log_prob(&self, next: &u32, a: ActionId, o: Obs) -> f64 {
        self.pomdp.observation[*next as usize][a as usize][o as usize].ln()
    }
}

pub const TIGER_LEFT: u32 = 0;
pub const TIGER_RIGHT: u32 = 1;
pub const TIGER_DONE: u32 = 2;
pub const LISTEN: ActionId = 0;
pub const OPEN_LEFT: ActionId = 1;
pub const OPEN_RIGHT: ActionId = 2;
pub const HEAR_LEFT: Obs = 0;
pub const HEAR_RIGHT: Obs = 1;

/// Tiger with the given listening accuracy, discount 0.95 and 30-step episodes.
/// Opening a door ends the episode: +10 on the empty side, -100 on the tiger's.
pub fn tiger_pomdp(listen_accuracy: f64, discount: f64) -> TabularPomdp {
    let q = listen_accuracy;
    let stay = |s: usize| {
        let mut v = vec![0.0; 3];
        v[s] = 1.0;
        v
    };
    let done = stay(TIGER_DONE as usize);
    let transition = (0..3)
        .map(|s| {
            if s == TIGER_DONE as usize {
                vec![done.clone(); 3]
            } else {
                vec![stay(s), done.clone(), done.clone()]
            }
        })
        .collect();
    let observation = (0..3)
        .map(|s| {
            let listen = match s as u32 {
                TIGER_LEFT => vec![q, 1.0 - q],
                TIGER_RIGHT => vec![1.0 - q, q],
                _ => vec![0.5, 0.5],
            };
            vec![listen, vec![0.5, 0.5], vec![0.5, 0.5]]
        })
        .collect();
    let reward = vec![
        vec![-1.0, -100.0, 10.0],
        vec![-1.0, 10.0, -100.0],
        vec![0.0, 0.0, 0.0],
    ];
    TabularPomdp {
        spec: ProblemSpec {
            name: "tiger".into(),
            action_count: 3,
            observation_count: 2,
            discount,
            max_steps: 30,
        },
        n_states: 3,
        transition,
        observation,
        reward,
        initial: vec![0.5, 0.5, 0.0],
        terminal: vec![false, false, true],
    }
}

pub fn tiger(listen_accuracy: f64) -> TabularModel {
    TabularModel::new(tiger_pomdp(listen_accuracy, 0.95)).expect("tiger tables are valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StateBatch;
    use crate::rng::StreamKey;

    #[test]
    fn listen_accuracy() {
        let m = tiger(0.85);
        let n = 100_000;
        let batch = StateBatch::from_model(&m, vec![TIGER_LEFT; n]);
        let out = m
            .step_batch(&batch, &vec![LISTEN; n], StreamKey::new(1))
            .unwrap();
        let left = out.observations.iter().filter(|&&o| o == HEAR_LEFT).count() as f64;
        let sd = (n as f64 * 0.85 * 0.15).sqrt();
        assert!((left - 0.85 * n as f64).abs() < 3.0 * sd);
        assert!(out.rewards.iter().all(|&r| r == -1.0));
    }

    #[test]
    fn door_rewards() {
        let m = tiger(0.85);
        let mut rng = StreamKey::new(2).rng(0);
        let t = m.step(&TIGER_LEFT, OPEN_RIGHT, &mut rng);
        assert_eq!((t.reward, t.next), (10.0, TIGER_DONE));
        let t = m.step(&TIGER_LEFT, OPEN_LEFT, &mut rng);
        assert_eq!(t.reward, -100.0);
        assert_eq!(m.spec().discount, 0.95);
        assert!(m.is_terminal(&TIGER_DONE));
    }

    #[test]
    fn leaves_take_the_fully_observed_value() {
        // Knowing the tiger's side, open the other door at once.
        let m = tiger(0.85);
        assert_eq!(m.heuristic(&TIGER_LEFT), 10.0);
        assert_eq!(m.heuristic(&TIGER_RIGHT), 10.0);
        assert_eq!(m.heuristic(&TIGER_DONE), 0.0);
    }

    #[test]
    fn likelihoods_sum_to_one() {
        let m = tiger(0.7);
        for s in 0..3u32 {
            for a in 0..3 {
                let total: f64 = (0..2).map(|o| m.observation_log_prob(&s, a, o).exp()).sum();
                assert!((total - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_bad_tables() {
        let mut p = tiger_pomdp(0.85, 0.95);
        p.transition[0][0] = vec![0.5, 0.6, 0.0];
        assert!(TabularModel::new(p).is_err());
    }
}
