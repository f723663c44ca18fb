//! Batch-first online POMDP planning.
//!
//! The planner keeps its belief tree in three columnar tables, expands it with
//! many simulated episodes per iteration, and backs values up with a
//! log-sum-exp preference update. See the `envs` module for the benchmark
//! problems and `harness` for seeded benchmark campaigns.

pub mod backup;
pub mod belief;
pub mod envs;
pub mod error;
pub mod harness;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod search;
pub mod solver;
pub mod tree;

pub use backup::{
    action_q_values, aggregate_leaves, backup as backup_preferences, log_sum_exp, log_sum_exp_rows,
    LevelValues,
};
pub use belief::{systematic_resample, ParticleBelief, UpdateOutcome};
pub use error::{PlanError, Result};
pub use model::{
    ActionId, Counters, Obs, ProblemModel, ProblemSpec, StateBatch, StepResult, Transition,
    TERMINAL_OBS,
};
pub use rng::{CounterRng, StreamKey};
pub use search::{sample_actions, search, softmax_rows, LeafResult, SearchBatch};
pub use solver::{
    plan, plan_with_tree, run_episode, Budget, Environment, Executed, PlanOutcome, RunRecord,
    SimulatedEnvironment, SolverConfig, TerminalReason,
};
pub use tree::{match_or_append_pairs, BeliefTree, DebugTables, TreeStats, NULL};
