//! Experiment driver: configurations, synthetic data, runs and sweeps.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod sweep;

pub use config::{BottleneckSpec, ConfigLabel, ExperimentConfig, HarnessError, Mode, TopologySource, EDGE_ONLY, KEYS};
pub use dataset::InputSource;
pub use experiment::{
    bind, bottleneck_config, cloud_node, describe_session, edge_row, exit_rule, prepare, run_experiment,
    run_prepared, sample_frames, serve_cloud, session_id, simulate_sample, weight_entries, Prepared,
};
pub use sweep::{sweep, SweepAxis};
