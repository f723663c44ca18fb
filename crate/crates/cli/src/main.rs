use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, ValueEnum};
use vecplan::envs::mars::MarsHeuristic;
use vecplan::envs::navigation::NavigationConfig;
use vecplan::harness::{run_campaign_with, CampaignConfig, ProblemConfig};
use vecplan::{Budget, SolverConfig};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Problem {
    Tiger,
    Navigation,
    Mars,
    Crowdnav,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Heuristic {
    Survey,
    Greedy,
    Exit,
}

/// Run seeded benchmark campaigns and print summary statistics.
#[derive(Debug, Parser)]
#[command(name = "vecplan", version)]
struct Args {
    #[arg(long, value_enum, default_value = "mars")]
    problem: Problem,
    /// MARS grid size.
    #[arg(long, default_value_t = 20)]
    n: usize,
    /// MARS rock count.
    #[arg(long, default_value_t = 20)]
    m: usize,
    /// MARS leaf heuristic.
    #[arg(long, value_enum, default_value = "survey")]
    heuristic: Heuristic,
    #[arg(long, default_value_t = 0.5)]
    p_curious: f64,
    #[arg(long, default_value_t = 0.85)]
    tiger_accuracy: f64,
    /// Navigation map file ('#' obstacle, '.' free, 'G' goal, '|' gate, '?' unknown).
    #[arg(long)]
    map: Option<PathBuf>,
    /// Seconds of planning per step.
    #[arg(long, default_value_t = 1.0)]
    planning_time: f64,
    /// Fixed iterations per step instead of a time budget.
    #[arg(long)]
    iterations: Option<u32>,
    /// Episodes per iteration; defaults depend on the problem.
    #[arg(long)]
    n_parallel: Option<usize>,
    #[arg(long, default_value_t = 2.0)]
    eta: f64,
    #[arg(long, default_value_t = 90)]
    d_max_cap: u32,
    /// Belief particles; defaults depend on the problem.
    #[arg(long)]
    particles: Option<usize>,
    #[arg(long, default_value_t = 1)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON-lines output file.
    #[arg(long, env = "VECPLAN_OUT")]
    out: Option<PathBuf>,
    /// Episodes run concurrently.
    #[arg(long, env = "VECPLAN_WORKERS", default_value_t = 1)]
    workers: usize,
    /// Scan the tree for invariant violations after every iteration.
    #[arg(long)]
    verify: bool,
    /// Campaign config as JSON; replaces the problem and solver flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn defaults(problem: Problem) -> (usize, usize) {
    // (episodes per iteration, belief particles)
    match problem {
        Problem::Tiger => (1024, 10_000),
        Problem::Navigation => (50_000, 10_000),
        Problem::Mars => (60_000, 10_000),
        Problem::Crowdnav => (10_000, 5_000),
    }
}

fn campaign(args: &Args) -> Result<CampaignConfig> {
    if let Some(path) = &args.config {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut c: CampaignConfig =
            serde_json::from_str(&text).context("parsing campaign config")?;
        if args.out.is_some() {
            c.out = args.out.clone();
        }
        c.workers = args.workers;
        return Ok(c);
    }
    let problem = match args.problem {
        Problem::Tiger => ProblemConfig::Tiger {
            accuracy: args.tiger_accuracy,
        },
        Problem::Navigation => ProblemConfig::Navigation {
            map: args
                .map
                .as_ref()
                .map(|p| {
                    std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
                })
                .transpose()?,
            config: NavigationConfig::default(),
        },
        Problem::Mars => ProblemConfig::Mars {
            n: args.n,
            m: args.m,
            heuristic: match args.heuristic {
                Heuristic::Survey => MarsHeuristic::Survey,
                Heuristic::Greedy => MarsHeuristic::Greedy,
                Heuristic::Exit => MarsHeuristic::Exit,
            },
        },
        Problem::Crowdnav => ProblemConfig::CrowdNav {
            p_curious: args.p_curious,
        },
    };
    let (n_parallel, particles) = defaults(args.problem);
    let solver = SolverConfig {
        eta: args.eta,
        n_parallel: args.n_parallel.unwrap_or(n_parallel),
        budget: match args.iterations {
            Some(i) => Budget::Iterations(i),
            None => Budget::Seconds(args.planning_time),
        },
        d_max_cap: args.d_max_cap,
        particles: args.particles.unwrap_or(particles),
        verify: args.verify,
    };
    Ok(CampaignConfig {
        problem,
        solver,
        runs: args.runs,
        base_seed: args.seed,
        out: args.out.clone(),
        workers: args.workers,
    })
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let config = campaign(&args)?;
    config.validate().context("invalid configuration")?;
    log::info!(
        "{} runs of {} from seed {}",
        config.runs,
        config.problem.name(),
        config.base_seed
    );
    let result = run_campaign_with(&config, |r| {
        log::info!(
            "run {} (seed {}): return {:.3} in {} steps, {:?}",
            r.run_index,
            r.seed,
            r.discounted_return,
            r.steps,
            r.terminal_reason
        );
    })?;
    println!(
        "{:<24} {:>6} {:>12} {:>12} {:>12}",
        "metric", "n", "mean", "std", "ci95"
    );
    for (name, s) in &result.summary {
        println!(
            "{:<24} {:>6} {:>12.4} {:>12.4} {:>12.4}",
            name, s.n, s.mean, s.std, s.ci95
        );
    }
    Ok(())
}
