//! Plans one MARS(20,20) step with a fixed amount of work; handy under a profiler.
//! Usage: plan_step [iterations] [episodes per iteration]

use std::time::Instant;

use vecplan::rng::StreamKey;
use vecplan::solver::plan;
use vecplan_bench::{episode_steps, fixed_work, mars_fixture};

fn main() {
    let mut args = std::env::args()
        .skip(1)
        .map(|a| a.parse::<u64>().expect("numeric argument"));
    let iterations = args.next().unwrap_or(6) as u32;
    let n_parallel = args.next().unwrap_or(60_000) as usize;
    let (model, belief) = mars_fixture(10_000);
    let start = Instant::now();
    let out = plan(
        &belief,
        &model,
        &fixed_work(n_parallel, iterations),
        StreamKey::new(4),
    )
    .expect("plan");
    let secs = start.elapsed().as_secs_f64();
    println!(
        "action {} in {secs:.3} s, {:.0} episode-steps/s, {} beliefs",
        out.chosen_action,
        episode_steps(n_parallel, iterations) as f64 / secs,
        out.tree_stats.belief_nodes
    );
}
