//! One-axis parameter sweeps.

use std::fmt;
use std::str::FromStr;

use crate::metrics::{RunReport, RunRow};

use super::config::{ExperimentConfig, HarnessError};
use super::experiment::run_experiment;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Alpha,
    TMax,
    BottleneckChannels,
    Split,
}

impl SweepAxis {
    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::TMax => "t_max",
            SweepAxis::BottleneckChannels => "bottleneck_channels",
            SweepAxis::Split => "split",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for SweepAxis {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim() {
            "alpha" => SweepAxis::Alpha,
            "t_max" | "tmax" => SweepAxis::TMax,
            "bottleneck_channels" | "channels" => SweepAxis::BottleneckChannels,
            "split" => SweepAxis::Split,
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown sweep axis `{other}` (alpha, t_max, bottleneck_channels, split)"
                )))
            }
        })
    }
}

/// One run per value; rows are tagged with the axis and value, in the order
/// given.
pub fn sweep(axis: SweepAxis, values: &[String], base: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::Config("sweep needs at least one value".into()));
    }
    let mut rows: Vec<RunRow> = Vec::new();
    for v in values {
        let mut cfg = base.clone();
        cfg.set(axis.key(), v)?;
        let report = run_experiment(&cfg)?;
        rows.extend(report.rows.into_iter().map(|mut r| {
            r.sweep_axis = axis.key().to_string();
            r.sweep_value = v.trim().to_string();
            r
        }));
    }
    Ok(RunReport::build(rows)?)
}
