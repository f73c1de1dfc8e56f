//! Experiment configuration and its `key = value` file format.
//!
//! ```text
//! # comment
//! topology = resnet-mini        # builtin name or path to a topology file
//! split = SP7                   # or `edge-only`
//! label = D+B                   # F-B, D-B, F+B, D+B
//! alpha = 0.9
//! t_max = 4
//! samples = 100
//! ```
//!
//! Every key is also a command-line flag; see [`KEYS`].

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::codec::CodecError;
use crate::exit::{ExitError, DEFAULT_ALPHA};
use crate::metrics::{EnergyModel, MetricsError};
use crate::model_io::ModelIoError;
use crate::netsim::{ChannelModel, TransportError};
use crate::par::Execution;
use crate::protocol::node::{DEFAULT_CLOUD_FLOPS, DEFAULT_EDGE_FLOPS};
use crate::protocol::{ComputeTiming, SessionError};
use crate::snn::SnnError;

use super::dataset::InputSource;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Snn(#[from] SnnError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Exit(#[from] ExitError),
    #[error(transparent)]
    Weights(#[from] ModelIoError),
    #[error("session {session}: {source}")]
    Session {
        session: u32,
        #[source]
        source: SessionError,
    },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn cfg_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

/// The four compared configurations: fixed or dynamic timesteps, with or
/// without the bottleneck.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConfigLabel {
    FixedNoBottleneck,
    DynamicNoBottleneck,
    FixedBottleneck,
    DynamicBottleneck,
}

impl ConfigLabel {
    pub const ALL: [ConfigLabel; 4] = [
        ConfigLabel::FixedNoBottleneck,
        ConfigLabel::DynamicNoBottleneck,
        ConfigLabel::FixedBottleneck,
        ConfigLabel::DynamicBottleneck,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConfigLabel::FixedNoBottleneck => "F-B",
            ConfigLabel::DynamicNoBottleneck => "D-B",
            ConfigLabel::FixedBottleneck => "F+B",
            ConfigLabel::DynamicBottleneck => "D+B",
        }
    }

    pub fn is_dynamic(self) -> bool {
        matches!(self, ConfigLabel::DynamicNoBottleneck | ConfigLabel::DynamicBottleneck)
    }

    pub fn has_bottleneck(self) -> bool {
        matches!(self, ConfigLabel::FixedBottleneck | ConfigLabel::DynamicBottleneck)
    }
}

impl fmt::Display for ConfigLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConfigLabel {
    type Err = HarnessError;

    /// Accepts `F-B`, `F–B` (en dash), `FmB` / `FpB` and lowercase forms.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .trim()
            .to_ascii_uppercase()
            .replace(['\u{2013}', '\u{2212}', '_'], "-")
            .replace("PB", "+B")
            .replace("MB", "-B");
        Ok(match norm.as_str() {
            "F-B" => ConfigLabel::FixedNoBottleneck,
            "D-B" => ConfigLabel::DynamicNoBottleneck,
            "F+B" => ConfigLabel::FixedBottleneck,
            "D+B" => ConfigLabel::DynamicBottleneck,
            _ => return Err(cfg_err(format!("unknown label `{s}` (expected F-B, D-B, F+B or D+B)"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TopologySource {
    Builtin(String),
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Mode {
    Simulated,
    /// Connect to a cloud node serving at this address.
    Socket(String),
}

/// Bottleneck overrides; unset fields take per-split defaults.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BottleneckSpec {
    pub channels: Option<usize>,
    pub kernel: Option<usize>,
    pub stride: Option<usize>,
    pub padding: Option<usize>,
}

/// Name of the degenerate split that keeps the whole network on the edge.
pub const EDGE_ONLY: &str = "edge-only";

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub topology: TopologySource,
    pub split: String,
    pub label: ConfigLabel,
    pub alpha: f64,
    pub t_max: usize,
    pub uplink: ChannelModel,
    pub downlink: ChannelModel,
    /// Seed for inputs (images, events, rate coding).
    pub seed: u64,
    /// Seed for initialized weights when no container is given.
    pub weight_seed: u64,
    pub samples: usize,
    pub input: InputSource,
    pub bottleneck: BottleneckSpec,
    pub weights: Option<PathBuf>,
    pub edge_timing: ComputeTiming,
    pub cloud_timing: ComputeTiming,
    pub energy: EnergyModel,
    pub mode: Mode,
    pub execution: Execution,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            topology: TopologySource::Builtin("resnet-mini".into()),
            split: "SP7".into(),
            label: ConfigLabel::DynamicBottleneck,
            alpha: DEFAULT_ALPHA,
            t_max: 4,
            uplink: ChannelModel::default(),
            downlink: ChannelModel::default(),
            seed: 0,
            weight_seed: 1,
            samples: 10,
            input: InputSource::SyntheticImages,
            bottleneck: BottleneckSpec::default(),
            weights: None,
            edge_timing: ComputeTiming::Modeled {
                flops_per_s: DEFAULT_EDGE_FLOPS,
            },
            cloud_timing: ComputeTiming::Modeled {
                flops_per_s: DEFAULT_CLOUD_FLOPS,
            },
            energy: EnergyModel::default(),
            mode: Mode::Simulated,
            execution: Execution::default(),
        }
    }
}

/// Recognized keys, with a one-line description each.
pub const KEYS: &[(&str, &str)] = &[
    ("topology", "builtin topology name (resnet-mini, vgg-mini) or topology file path"),
    ("split", "split point name, or `edge-only`"),
    ("label", "F-B, D-B, F+B or D+B"),
    ("alpha", "confidence threshold in (0,1) for dynamic labels"),
    ("t_max", "timestep budget, 1..=255"),
    ("throughput_bps", "uplink throughput in bit/s (also downlink unless set)"),
    ("delay_s", "uplink propagation delay in seconds (also downlink unless set)"),
    ("downlink_throughput_bps", "downlink throughput in bit/s"),
    ("downlink_delay_s", "downlink propagation delay in seconds"),
    ("jitter_seed", "seed of the transmission jitter stream"),
    ("jitter_fraction", "maximum relative stretch of serialization time, [0,1)"),
    ("seed", "input seed"),
    ("weight_seed", "seed of the initialized weights"),
    ("samples", "number of samples"),
    ("input", "synthetic-images, synthetic-events, or an event file / directory path"),
    ("bottleneck_channels", "code channels of the bottleneck"),
    ("bottleneck_kernel", "bottleneck kernel size"),
    ("bottleneck_stride", "bottleneck stride"),
    ("bottleneck_padding", "bottleneck padding"),
    ("weights", "weight container path (default: seeded initialization)"),
    ("compute", "modeled or measured compute timing"),
    ("edge_flops", "edge device FLOP/s for modeled timing"),
    ("cloud_flops", "cloud device FLOP/s for modeled timing"),
    ("pj_per_synop", "energy per synaptic operation in pJ"),
    ("mode", "simulated, or socket:HOST:PORT"),
    ("execution", "parallel or sequential"),
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T, HarnessError> {
    v.trim()
        .parse()
        .map_err(|_| cfg_err(format!("{key}: cannot parse `{v}`")))
}

impl ExperimentConfig {
    /// Set one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let v = value.trim();
        let chan = |c: Result<ChannelModel, TransportError>| c.map_err(|e| cfg_err(format!("{key}: {e}")));
        match key {
            "topology" => {
                self.topology = if crate::snn::BUILTIN_TOPOLOGIES.contains(&v) {
                    TopologySource::Builtin(v.to_string())
                } else {
                    TopologySource::File(PathBuf::from(v))
                }
            }
            "split" => self.split = v.to_string(),
            "label" => self.label = v.parse()?,
            "alpha" => self.alpha = num(key, v)?,
            "t_max" => self.t_max = num(key, v)?,
            "throughput_bps" => {
                let bps = num(key, v)?;
                if self.downlink == self.uplink {
                    self.downlink.throughput_bps = bps;
                }
                self.uplink.throughput_bps = bps;
                chan(self.uplink.validate().map(|_| self.uplink))?;
            }
            "delay_s" => {
                let d = num(key, v)?;
                if self.downlink == self.uplink {
                    self.downlink.propagation_delay_s = d;
                }
                self.uplink.propagation_delay_s = d;
                chan(self.uplink.validate().map(|_| self.uplink))?;
            }
            "downlink_throughput_bps" => {
                self.downlink.throughput_bps = num(key, v)?;
                chan(self.downlink.validate().map(|_| self.downlink))?;
            }
            "downlink_delay_s" => {
                self.downlink.propagation_delay_s = num(key, v)?;
                chan(self.downlink.validate().map(|_| self.downlink))?;
            }
            "jitter_seed" | "jitter_fraction" => {
                for ch in [&mut self.uplink, &mut self.downlink] {
                    let mut j = ch.jitter.unwrap_or(crate::netsim::Jitter {
                        seed: 0,
                        fraction: 0.0,
                    });
                    if key == "jitter_seed" {
                        j.seed = num(key, v)?;
                    } else {
                        j.fraction = num(key, v)?;
                    }
                    ch.jitter = Some(j);
                    chan(ch.validate().map(|_| *ch))?;
                }
            }
            "seed" => self.seed = num(key, v)?,
            "weight_seed" => self.weight_seed = num(key, v)?,
            "samples" => self.samples = num(key, v)?,
            "input" => {
                self.input = match v {
                    "synthetic-images" => InputSource::SyntheticImages,
                    "synthetic-events" => InputSource::SyntheticEvents,
                    path => InputSource::event_path(Path::new(path))?,
                }
            }
            "bottleneck_channels" => self.bottleneck.channels = Some(num(key, v)?),
            "bottleneck_kernel" => self.bottleneck.kernel = Some(num(key, v)?),
            "bottleneck_stride" => self.bottleneck.stride = Some(num(key, v)?),
            "bottleneck_padding" => self.bottleneck.padding = Some(num(key, v)?),
            "weights" => self.weights = Some(PathBuf::from(v)),
            "compute" => match v {
                "modeled" => {
                    if self.edge_timing == ComputeTiming::Measured {
                        self.edge_timing = ComputeTiming::Modeled {
                            flops_per_s: DEFAULT_EDGE_FLOPS,
                        };
                    }
                    if self.cloud_timing == ComputeTiming::Measured {
                        self.cloud_timing = ComputeTiming::Modeled {
                            flops_per_s: DEFAULT_CLOUD_FLOPS,
                        };
                    }
                }
                "measured" => {
                    self.edge_timing = ComputeTiming::Measured;
                    self.cloud_timing = ComputeTiming::Measured;
                }
                _ => return Err(cfg_err(format!("compute: expected modeled or measured, got `{v}`"))),
            },
            "edge_flops" | "cloud_flops" => {
                let r: f64 = num(key, v)?;
                if !(r.is_finite() && r > 0.0) {
                    return Err(cfg_err(format!("{key} must be positive")));
                }
                let t = ComputeTiming::Modeled { flops_per_s: r };
                if key == "edge_flops" {
                    self.edge_timing = t;
                } else {
                    self.cloud_timing = t;
                }
            }
            "pj_per_synop" => {
                self.energy = EnergyModel::new(num(key, v)?).map_err(|e| cfg_err(e.to_string()))?
            }
            "mode" => {
                self.mode = match v.strip_prefix("socket:") {
                    Some(addr) if !addr.is_empty() => Mode::Socket(addr.to_string()),
                    _ if v == "simulated" => Mode::Simulated,
                    _ => return Err(cfg_err(format!("mode: expected simulated or socket:ADDR, got `{v}`"))),
                }
            }
            "execution" => {
                self.execution = match v {
                    "parallel" if cfg!(feature = "parallel") => Execution::Parallel,
                    "parallel" => return Err(cfg_err("built without the `parallel` feature")),
                    "sequential" => Execution::Sequential,
                    _ => return Err(cfg_err(format!("execution: expected parallel or sequential, got `{v}`"))),
                }
            }
            _ => return Err(cfg_err(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), HarnessError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| cfg_err(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn is_edge_only(&self) -> bool {
        self.split == EDGE_ONLY
    }

    /// Checks that don't need the network; the rest happen in `prepare`.
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.samples == 0 {
            return Err(cfg_err("samples must be at least 1"));
        }
        if !(1..=255).contains(&self.t_max) {
            return Err(cfg_err(format!("t_max must be in 1..=255, got {}", self.t_max)));
        }
        if self.label.is_dynamic() && !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(cfg_err(format!(
                "label {} needs alpha strictly between 0 and 1, got {}",
                self.label, self.alpha
            )));
        }
        if self.is_edge_only() && self.label.has_bottleneck() {
            return Err(cfg_err(format!(
                "split `{EDGE_ONLY}` sends nothing; use F-B or D-B, not {}",
                self.label
            )));
        }
        if self.is_edge_only() && matches!(self.mode, Mode::Socket(_)) {
            return Err(cfg_err(format!("split `{EDGE_ONLY}` has no cloud to connect to")));
        }
        self.uplink.validate()?;
        self.downlink.validate()?;
        Ok(())
    }

    /// Canonical `key = value` form of the settings that matter to results.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        put(
            "topology",
            match &self.topology {
                TopologySource::Builtin(n) => n.clone(),
                TopologySource::File(p) => p.display().to_string(),
            },
        );
        put("split", self.split.clone());
        put("label", self.label.to_string());
        put("alpha", self.alpha.to_string());
        put("t_max", self.t_max.to_string());
        put("throughput_bps", self.uplink.throughput_bps.to_string());
        put("delay_s", self.uplink.propagation_delay_s.to_string());
        put("downlink_throughput_bps", self.downlink.throughput_bps.to_string());
        put("downlink_delay_s", self.downlink.propagation_delay_s.to_string());
        if let Some(j) = self.uplink.jitter {
            put("jitter_seed", j.seed.to_string());
            put("jitter_fraction", j.fraction.to_string());
        }
        put("seed", self.seed.to_string());
        put("weight_seed", self.weight_seed.to_string());
        put("samples", self.samples.to_string());
        match &self.input {
            InputSource::EventFiles(_) => {}
            other => put("input", other.describe()),
        }
        for (k, v) in [
            ("bottleneck_channels", self.bottleneck.channels),
            ("bottleneck_kernel", self.bottleneck.kernel),
            ("bottleneck_stride", self.bottleneck.stride),
            ("bottleneck_padding", self.bottleneck.padding),
        ] {
            if let Some(v) = v {
                put(k, v.to_string());
            }
        }
        if let Some(w) = &self.weights {
            put("weights", w.display().to_string());
        }
        put("pj_per_synop", self.energy.pj_per_synop().to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_parse() {
        for (s, l) in [
            ("F-B", ConfigLabel::FixedNoBottleneck),
            ("d\u{2013}b", ConfigLabel::DynamicNoBottleneck),
            ("FpB", ConfigLabel::FixedBottleneck),
            ("D+B", ConfigLabel::DynamicBottleneck),
        ] {
            assert_eq!(s.parse::<ConfigLabel>().unwrap(), l);
            assert_eq!(l.as_str().parse::<ConfigLabel>().unwrap(), l);
        }
        assert!("X+B".parse::<ConfigLabel>().is_err());
    }

    #[test]
    fn alpha_bounds() {
        let mut c = ExperimentConfig::default();
        c.alpha = 0.0;
        assert!(c.validate().is_err());
        c.label = ConfigLabel::FixedBottleneck;
        assert!(c.validate().is_ok());
        c.alpha = 1.0;
        c.label = ConfigLabel::DynamicNoBottleneck;
        assert!(c.validate().is_err());
    }

    #[test]
    fn key_value_file() {
        let mut c = ExperimentConfig::default();
        c.apply_text(
            "# demo\nlabel = F+B\nt_max=2 # budget\nthroughput_bps = 1e6\nsamples = 3\nmode = socket:127.0.0.1:7000\n",
        )
        .unwrap();
        assert_eq!(c.label, ConfigLabel::FixedBottleneck);
        assert_eq!(c.t_max, 2);
        assert_eq!(c.uplink.throughput_bps, 1e6);
        assert_eq!(c.downlink.throughput_bps, 1e6);
        assert_eq!(c.mode, Mode::Socket("127.0.0.1:7000".into()));
        assert!(c.apply_text("bogus = 1").is_err());
        assert!(c.apply_text("no equals sign").is_err());
        assert!(c.apply_text("t_max = many").is_err());

        let mut d = ExperimentConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        d.mode = c.mode.clone();
        assert_eq!(d, c);
    }

    #[test]
    fn every_key_is_settable() {
        let sample = |k: &str| match k {
            "topology" => "vgg-mini",
            "split" => "SP1",
            "label" => "D-B",
            "input" => "synthetic-events",
            "weights" => "w.bin",
            "compute" => "measured",
            "mode" => "simulated",
            "execution" => "sequential",
            "jitter_fraction" => "0.1",
            _ => "3",
        };
        for (k, _) in KEYS {
            let mut c = ExperimentConfig::default();
            c.set(k, sample(k)).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }

    #[test]
    fn edge_only_rules() {
        let mut c = ExperimentConfig::default();
        c.split = EDGE_ONLY.into();
        assert!(c.validate().is_err());
        c.label = ConfigLabel::DynamicNoBottleneck;
        assert!(c.validate().is_ok());
    }
}
