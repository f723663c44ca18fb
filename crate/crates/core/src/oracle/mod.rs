//! Serial reference implementations used by tests: a one-episode-at-a-time
//! planner over linked records, exact value iteration and an exact Bayes filter
//! for small tabular problems.

pub mod exact;
pub mod serial;

pub use exact::{exact_bayes_filter, exact_value_iteration, mdp_value_iteration, ExactSolution};
pub use serial::{serial_search_backup, SerialTree};
