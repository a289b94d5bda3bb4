//! Scenario loading, truth simulation, decentralized and centralized runs,
//! consistency metrics and result files.

pub mod config;
pub mod metrics;
pub mod output;
pub mod run;
pub mod sim;

pub use config::{load_config, load_scenario, Scenario, ScenarioConfig};
pub use metrics::{nees_bounds, robot_metrics, RobotMetrics};
pub use output::{compare, write_dot, write_results};
pub use run::{run_centralized, run_decentralized, run_monte_carlo, MonteCarlo, RunResult};
