//! Seeded benchmark campaigns.
//!
//! A campaign runs independent episodes with seeds `base_seed + i`, writes
//! one JSON record per run in run-index order and finishes with a summary
//! record holding mean, sample standard deviation and a normal-approximation
//! 95% confidence half-width for every metric.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use crate::envs::crowdnav::{CrowdHall, CrowdNavConfig, CrowdNavModel};
use crate::envs::mars::{MarsConfig, MarsHeuristic, MarsModel, MarsWorld};
use crate::envs::navigation::{NavigationConfig, NavigationMap, NavigationModel, NavigationWorld};
use crate::envs::tabular::tiger;
use crate::error::{PlanError, Result};
use crate::rng::{tags, StreamKey};
use crate::solver::{run_episode, RunRecord, SimulatedEnvironment, SolverConfig, TerminalReason};

/// Problem name plus its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "problem", rename_all = "snake_case")]
pub enum ProblemConfig {
    Tiger {
        accuracy: f64,
    },
    Navigation {
        /// Map text; the built-in 13x13 layout when absent.
        #[serde(default)]
        map: Option<String>,
        #[serde(flatten)]
        config: NavigationConfig,
    },
    Mars {
        n: usize,
        m: usize,
        #[serde(default = "default_mars_heuristic")]
        heuristic: MarsHeuristic,
    },
    #[serde(rename = "crowdnav")]
    CrowdNav {
        p_curious: f64,
    },
}

fn default_mars_heuristic() -> MarsHeuristic {
    MarsHeuristic::Survey
}

impl ProblemConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ProblemConfig::Tiger { .. } => "tiger",
            ProblemConfig::Navigation { .. } => "navigation",
            ProblemConfig::Mars { .. } => "mars",
            ProblemConfig::CrowdNav { .. } => "crowdnav",
        }
    }

    /// Builds every model once so bad parameters fail before any run.
    pub fn validate(&self) -> Result<()> {
        match self {
            ProblemConfig::Tiger { accuracy } => {
                if !(0.0..=1.0).contains(accuracy) {
                    return Err(PlanError::Config(format!(
                        "tiger accuracy must lie in [0, 1], got {accuracy}"
                    )));
                }
            }
            ProblemConfig::Navigation { .. } => {
                self.navigation_model()?;
            }
            ProblemConfig::Mars { .. } => {
                self.mars_model(StreamKey::new(0))?;
            }
            ProblemConfig::CrowdNav { p_curious } => {
                CrowdNavModel::new(CrowdNavConfig::new(*p_curious))?;
            }
        }
        Ok(())
    }

    fn navigation_model(&self) -> Result<NavigationModel> {
        let ProblemConfig::Navigation { map, config } = self else {
            unreachable!("called on a navigation config")
        };
        let map = match map {
            Some(text) => NavigationMap::parse(text)?,
            None => NavigationMap::default_map(),
        };
        NavigationModel::new(map, config.clone())
    }

    fn mars_model(&self, key: StreamKey) -> Result<MarsModel> {
        let ProblemConfig::Mars { n, m, heuristic } = self else {
            unreachable!("called on a MARS config")
        };
        let mut config = MarsConfig::new(*n, *m);
        config.heuristic = *heuristic;
        MarsModel::random(config, key)
    }

    /// Runs one episode; the hidden world is drawn from the run's seed.
    pub fn run(&self, solver: &SolverConfig, run_index: usize, seed: u64) -> Result<RunRecord> {
        let key = StreamKey::new(seed);
        match self {
            ProblemConfig::Tiger { accuracy } => {
                let mut env = SimulatedEnvironment::new(tiger(*accuracy), key);
                run_episode(&mut env, solver, run_index, seed)
            }
            ProblemConfig::Navigation { .. } => {
                let mut env = NavigationWorld::new(self.navigation_model()?, key);
                run_episode(&mut env, solver, run_index, seed)
            }
            ProblemConfig::Mars { .. } => {
                let model = self.mars_model(key.child(tags::WORLD).child(1))?;
                let mut env = MarsWorld::new(model, key);
                run_episode(&mut env, solver, run_index, seed)
            }
            ProblemConfig::CrowdNav { p_curious } => {
                let model = CrowdNavModel::new(CrowdNavConfig::new(*p_curious))?;
                let mut env = CrowdHall::new(model, key);
                run_episode(&mut env, solver, run_index, seed)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    #[serde(flatten)]
    pub problem: ProblemConfig,
    pub solver: SolverConfig,
    pub runs: usize,
    pub base_seed: u64,
    /// JSON-lines output; nothing is written when absent.
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Episodes run concurrently. Keep at 1 for wall-clock budgets.
    #[serde(default = "one")]
    pub workers: usize,
}

fn one() -> usize {
    1
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(PlanError::Config("runs must be >= 1".into()));
        }
        if self.workers == 0 {
            return Err(PlanError::Config("workers must be >= 1".into()));
        }
        if self.base_seed.checked_add(self.runs as u64 - 1).is_none() {
            return Err(PlanError::Config("base_seed + runs overflows".into()));
        }
        self.solver.validate()?;
        self.problem.validate()
    }
}

/// Mean, sample standard deviation and 95% half-width `1.96 s / sqrt(n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub ci95: f64,
}

impl Stat {
    /// Statistics of `values`; spread is 0 for a single value.
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len();
        if n == 0 {
            return Stat {
                n,
                mean: f64::NAN,
                std: f64::NAN,
                ci95: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Stat {
            n,
            mean,
            std,
            ci95: 1.96 * std / (n as f64).sqrt(),
        }
    }
}

pub type Summary = BTreeMap<String, Stat>;

/// Per-metric statistics over `records`. Counters missing from a record count as 0.
pub fn summarize(records: &[RunRecord]) -> Summary {
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let counter_names: std::collections::BTreeSet<&String> =
        records.iter().flat_map(|r| r.counters.keys()).collect();
    for r in records {
        let mut push = |k: &str, v: f64| columns.entry(k.to_string()).or_default().push(v);
        push("discounted_return", r.discounted_return);
        push("undiscounted_return", r.undiscounted_return);
        push("steps", r.steps as f64);
        push(
            "reached_terminal",
            (r.terminal_reason == TerminalReason::Terminal) as u8 as f64,
        );
        push("planning_secs", r.mean_planning_secs());
        push(
            "iterations",
            r.iterations.iter().map(|&i| i as f64).sum::<f64>() / r.iterations.len().max(1) as f64,
        );
        push("degenerate_updates", r.degenerate_updates as f64);
        for &name in &counter_names {
            push(name, r.counters.get(name).copied().unwrap_or(0.0));
        }
    }
    columns
        .into_iter()
        .map(|(k, v)| (k, Stat::of(&v)))
        .collect()
}

/// One line of campaign output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OutputLine {
    Config(CampaignConfig),
    Run(RunRecord),
    Summary { summary: Summary },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub records: Vec<RunRecord>,
    pub summary: Summary,
}

/// Runs the campaign. `on_record` sees records in run-index order as soon as
/// all earlier runs have finished.
pub fn run_campaign_with<F>(config: &CampaignConfig, mut on_record: F) -> Result<CampaignResult>
where
    F: FnMut(&RunRecord),
{
    config.validate()?;
    let mut writer = match &config.out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            let mut w = BufWriter::new(File::create(path)?);
            write_line(&mut w, &OutputLine::Config(config.clone()))?;
            Some(w)
        }
        None => None,
    };
    let mut records: Vec<RunRecord> = Vec::with_capacity(config.runs);
    let mut emit = |r: RunRecord, records: &mut Vec<RunRecord>| -> Result<()> {
        if let Some(w) = writer.as_mut() {
            write_line(w, &OutputLine::Run(r.clone()))?;
            w.flush()?;
        }
        on_record(&r);
        records.push(r);
        Ok(())
    };
    if config.workers == 1 {
        for i in 0..config.runs {
            let r = config
                .problem
                .run(&config.solver, i, config.base_seed + i as u64)?;
            emit(r, &mut records)?;
        }
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| PlanError::Config(e.to_string()))?;
        let (tx, rx) = mpsc::channel::<(usize, Result<RunRecord>)>();
        let mut failure = None;
        pool.in_place_scope(|scope| {
            for i in 0..config.runs {
                let tx = tx.clone();
                scope.spawn(move |_| {
                    let r = config
                        .problem
                        .run(&config.solver, i, config.base_seed + i as u64);
                    let _ = tx.send((i, r));
                });
            }
            drop(tx);
            let mut pending = BTreeMap::new();
            for (i, r) in rx {
                pending.insert(i, r);
                while let Some(r) = pending.remove(&records.len()) {
                    if failure.is_some() {
                        continue;
                    }
                    match r.and_then(|r| emit(r, &mut records)) {
                        Ok(()) => {}
                        Err(e) => failure = Some(e),
                    }
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
    }
    let summary = summarize(&records);
    if let Some(w) = writer.as_mut() {
        write_line(
            w,
            &OutputLine::Summary {
                summary: summary.clone(),
            },
        )?;
        w.flush()?;
    }
    Ok(CampaignResult { records, summary })
}

pub fn run_campaign(config: &CampaignConfig) -> Result<CampaignResult> {
    run_campaign_with(config, |_| {})
}

fn write_line<W: Write>(w: &mut W, line: &OutputLine) -> Result<()> {
    let text = serde_json::to_string(line).map_err(|e| PlanError::Parse(e.to_string()))?;
    writeln!(w, "{text}")?;
    Ok(())
}
