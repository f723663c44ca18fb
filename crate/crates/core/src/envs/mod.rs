//! Benchmark problems.

pub mod crowdnav;
pub mod mars;
pub mod navigation;
pub mod tabular;
