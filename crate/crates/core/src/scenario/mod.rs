//! Scenario configuration, the simulation loop and run logs.

mod config;
mod log;
mod presets;
mod runner;

pub use config::{AgentSpec, Mode, NetworkSpec, ScenarioConfig, TargetSpec, CONFIG_VERSION};
pub use log::{
    comparison_table, BeliefRecord, InsertionRecord, RunLog, StepRecord, Table, BELIEF_FILE, CONFIG_FILE, LOG_FILE,
    SUMMARY_FILE,
};
pub use presets::{corridor_region, describe, preset, PRESETS};
pub use runner::{evaluate_metric, run, run_centralized, run_decentralized, static_field};
