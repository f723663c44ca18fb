//! Shared fixtures for the planning benchmarks.

use vecplan::envs::mars::{MarsConfig, MarsModel, MarsState};
use vecplan::envs::navigation::{NavigationModel, NavigationState, NavigationWorld};
use vecplan::rng::StreamKey;
use vecplan::solver::{Environment, SimulatedEnvironment};
use vecplan::{Budget, ParticleBelief, SolverConfig};

/// MARS(20,20) with a fixed rock layout and its initial belief.
pub fn mars_fixture(particles: usize) -> (MarsModel, ParticleBelief<MarsState>) {
    let model =
        MarsModel::random(MarsConfig::new(20, 20), StreamKey::new(1)).expect("valid config");
    let mut env = SimulatedEnvironment::new(model.clone(), StreamKey::new(2));
    let belief = env
        .initial_belief(particles, StreamKey::new(3))
        .expect("initial belief");
    (model, belief)
}

/// The default navigation map and an initial belief.
pub fn navigation_fixture(particles: usize) -> (NavigationModel, ParticleBelief<NavigationState>) {
    let model = NavigationModel::default_model();
    let mut env = NavigationWorld::new(model.clone(), StreamKey::new(2));
    let belief = env
        .initial_belief(particles, StreamKey::new(3))
        .expect("initial belief");
    (model, belief)
}

/// Solver settings for a fixed amount of work per planning call.
pub fn fixed_work(n_parallel: usize, iterations: u32) -> SolverConfig {
    SolverConfig {
        n_parallel,
        budget: Budget::Iterations(iterations),
        ..SolverConfig::default()
    }
}

/// Episode-steps simulated by one planning call: iteration `i` runs `i` levels.
pub fn episode_steps(n_parallel: usize, iterations: u32) -> u64 {
    n_parallel as u64 * (iterations as u64 * (iterations as u64 + 1) / 2)
}
