//! Running a configuration over a sample set.

use std::net::{TcpListener, ToSocketAddrs};
use std::path::Path;

use crate::codec::{Bottleneck, BottleneckConfig};
use crate::exit::{ExitPolicy, ExitRule};
use crate::metrics::{LatencyBreakdown, LayerUsage, RunReport, RunRow};
use crate::model_io::{self, Entry};
use crate::netsim::{sim_pair, Counters, Delivery, SimEndpoint, StreamTransport, Transport, TransportError};
use crate::par;
use crate::protocol::{
    edge_run_sample, CloudSession, CloudStep, run_local, serve_connection, CloudNode, CloudSessionSummary,
    EdgeNode, EdgeOutcome, LocalOutcome, SessionError,
};
use crate::rng::SeededRng;
use crate::snn::{self, FrameSource, NetworkGraph};
use crate::tensor::Shape;

use super::config::{ExperimentConfig, HarnessError, Mode, TopologySource, EDGE_ONLY};

const FRAME_SEED_STREAM: u64 = 0xF7A3E;

/// Network, weights and codec resolved from a configuration; shared by both
/// nodes.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub net: NetworkGraph,
    pub topology_text: String,
    /// `None` for the edge-only configuration.
    pub boundary: Option<usize>,
    pub codec: Option<Bottleneck>,
    pub container_crc: u32,
    pub digest: [u8; 32],
}

impl Prepared {
    /// Shape of the split activation.
    pub fn split_shape(&self) -> Option<&Shape> {
        self.boundary.map(|b| self.net.shape_before(b))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn load_topology(cfg: &ExperimentConfig) -> Result<(NetworkGraph, String), HarnessError> {
    let channels = if cfg.input.is_events() { 2 } else { 3 };
    let text = match &cfg.topology {
        TopologySource::Builtin(name) => snn::builtin_text(name, channels)?,
        TopologySource::File(p) => std::fs::read_to_string(p).map_err(io_err(p))?,
    };
    let net = snn::parse_topology(&text)?;
    let canonical = snn::to_text(&net);
    Ok((net, canonical))
}

/// Bottleneck for the split activation of shape `shape`.
pub fn bottleneck_config(cfg: &ExperimentConfig, shape: &Shape) -> Result<BottleneckConfig, HarnessError> {
    let d = BottleneckConfig::default_for(shape)?;
    let b = &cfg.bottleneck;
    let kernel = b.kernel.unwrap_or(d.kernel);
    Ok(BottleneckConfig::new(
        shape.clone(),
        b.channels.unwrap_or(d.code_channels),
        kernel,
        b.stride.unwrap_or(if b.kernel.is_some() { kernel } else { d.stride }),
        b.padding.unwrap_or(d.padding),
    )?)
}

/// Resolve topology, weights and codec, and compute the configuration digest.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, HarnessError> {
    cfg.validate()?;
    let (mut net, topology_text) = load_topology(cfg)?;
    net.set_execution(cfg.execution);
    if cfg.input.is_events() && net.input_shape().dims()[0] != 2 {
        return Err(HarnessError::Config(format!(
            "event input needs a 2-channel (polarity) network input, topology has {}",
            net.input_shape()
        )));
    }
    let boundary = if cfg.is_edge_only() {
        None
    } else {
        Some(net.split(&cfg.split).map_err(|_| {
            let names: Vec<&str> = net.split_points().iter().map(|(n, _)| *n).collect();
            HarnessError::Config(format!(
                "topology `{}` has no split `{}` (available: {}, {EDGE_ONLY})",
                net.name(),
                cfg.split,
                names.join(", ")
            ))
        })?)
    };
    let codec_cfg = match (boundary, cfg.label.has_bottleneck()) {
        (Some(b), true) => Some(bottleneck_config(cfg, net.shape_before(b))?),
        _ => None,
    };

    let entries: Vec<Entry> = match &cfg.weights {
        Some(p) => model_io::load(&std::fs::read(p).map_err(io_err(p))?)?,
        None => {
            let mut e = model_io::seeded_init(&net, cfg.weight_seed);
            if let Some(c) = &codec_cfg {
                e.extend(Bottleneck::zeroed(c.clone())?.seeded_entries(cfg.weight_seed));
            }
            e
        }
    };
    model_io::apply_entries(&mut net, &entries)?;
    let codec = match codec_cfg {
        Some(c) => {
            let mut b = Bottleneck::zeroed(c)?;
            b.apply_entries(&entries)?;
            b.set_execution(cfg.execution);
            Some(b)
        }
        None => None,
    };
    let container_crc = match &cfg.weights {
        Some(p) => model_io::container_crc(&std::fs::read(p).map_err(io_err(p))?).unwrap_or(0),
        None => model_io::container_crc(&model_io::save(&entries)?).unwrap_or(0),
    };
    let session = format!(
        "split={} boundary={:?} {}",
        cfg.split,
        boundary,
        codec.as_ref().map_or("bottleneck none".to_string(), |c| c.config().describe())
    );
    let digest = model_io::config_digest(&topology_text, &session, container_crc);
    Ok(Prepared {
        net,
        topology_text,
        boundary,
        codec,
        container_crc,
        digest,
    })
}

/// Every entry the configuration's nodes would load, for writing a container.
pub fn weight_entries(cfg: &ExperimentConfig) -> Result<Vec<Entry>, HarnessError> {
    let p = prepare(cfg)?;
    let mut e = model_io::export_entries(&p.net);
    if let Some(c) = &p.codec {
        e.extend(c.entries());
    }
    Ok(e)
}

pub fn exit_rule(cfg: &ExperimentConfig) -> Result<ExitRule, HarnessError> {
    Ok(if cfg.label.is_dynamic() {
        ExitRule::Dynamic(ExitPolicy::new(cfg.alpha, cfg.t_max)?)
    } else {
        ExitRule::fixed(cfg.t_max)?
    })
}

/// Input frames and label of sample `i`.
pub fn sample_frames(
    cfg: &ExperimentConfig,
    net: &NetworkGraph,
    i: usize,
) -> Result<(FrameSource, Option<usize>), HarnessError> {
    let (input, target) = cfg.input.sample(net.input_shape(), cfg.seed, i, net.num_classes())?;
    let frame_seed = SeededRng::derive_path(cfg.seed, &[FRAME_SEED_STREAM, i as u64]).next_u64();
    Ok((FrameSource::new(&input, cfg.t_max, net.input_shape(), frame_seed)?, target))
}

fn edge_node<'a>(cfg: &ExperimentConfig, p: &'a Prepared, rule: ExitRule) -> EdgeNode<'a> {
    EdgeNode {
        net: &p.net,
        boundary: p.boundary.expect("split configured"),
        codec: p.codec.as_ref(),
        rule,
        digest: p.digest,
        timing: cfg.edge_timing,
        uplink: cfg.uplink,
        downlink: cfg.downlink,
    }
}

pub fn cloud_node<'a>(cfg: &ExperimentConfig, p: &'a Prepared) -> Result<CloudNode<'a>, HarnessError> {
    Ok(CloudNode {
        net: &p.net,
        boundary: p
            .boundary
            .ok_or_else(|| HarnessError::Config(format!("split `{EDGE_ONLY}` has no cloud half")))?,
        codec: p.codec.as_ref(),
        digest: p.digest,
        timing: cfg.cloud_timing,
    })
}

fn base_row(cfg: &ExperimentConfig, i: usize, target: Option<usize>) -> RunRow {
    RunRow {
        sweep_axis: String::new(),
        sweep_value: String::new(),
        sample: i,
        label: cfg.label.to_string(),
        split: cfg.split.clone(),
        t_max: cfg.t_max,
        alpha: cfg.label.is_dynamic().then_some(cfg.alpha),
        t_exit: 0,
        prediction: 0,
        target,
        confidence: 0.0,
        raw_bits: 0,
        uplink_bits: 0,
        uplink_bytes: 0,
        downlink_bits: 0,
        downlink_bytes: 0,
        compression_ratio: 0.0,
        edge_compute_s: 0.0,
        uplink_s: 0.0,
        cloud_compute_s: 0.0,
        downlink_s: 0.0,
        total_s: 0.0,
        edge_synops: 0.0,
        encoder_synops: 0.0,
        edge_energy_j: 0.0,
        encoder_energy_j: 0.0,
    }
}

fn usage(flops: &[u64], activity: &[f64], t: usize) -> Vec<LayerUsage> {
    flops
        .iter()
        .zip(activity)
        .map(|(&f, &a)| LayerUsage {
            flops: f,
            rate: Some((a / t as f64).clamp(0.0, 1.0)),
        })
        .collect()
}

/// Row for one split-mode sample.
pub fn edge_row(
    cfg: &ExperimentConfig,
    p: &Prepared,
    i: usize,
    target: Option<usize>,
    o: &EdgeOutcome,
) -> Result<RunRow, HarnessError> {
    let b = p.boundary.expect("split configured");
    let t = o.t_exit;
    let backbone = crate::metrics::total_synops(&usage(&p.net.layer_flops(0..b), &o.layer_activity, t), t)?;
    let encoder = match &p.codec {
        Some(c) => crate::metrics::total_synops(&usage(&c.encoder_layer_flops(), &o.encoder_activity, t), t)?,
        None => 0.0,
    };
    let latency = o
        .steps
        .iter()
        .map(|s| LatencyBreakdown::new(s.edge_compute_s, s.uplink_s, s.cloud_compute_s, s.downlink_s))
        .fold(LatencyBreakdown::default(), |a, s| a.add(&s));
    let mut row = base_row(cfg, i, target);
    row.t_exit = t;
    row.prediction = o.prediction;
    row.confidence = o.confidence;
    row.raw_bits = o.raw_bits;
    row.uplink_bits = o.spike_bits;
    row.uplink_bytes = o.feature_bytes;
    row.downlink_bits = 32 * p.net.num_classes() as u64 * t as u64;
    row.downlink_bytes = o.logits_bytes;
    row.compression_ratio = crate::codec::compression_ratio(o.raw_bits, o.spike_bits)?;
    row.set_latency(latency);
    row.edge_synops = backbone + encoder;
    row.encoder_synops = encoder;
    row.edge_energy_j = cfg.energy.joules(backbone + encoder);
    row.encoder_energy_j = cfg.energy.joules(encoder);
    Ok(row)
}

fn local_row(
    cfg: &ExperimentConfig,
    p: &Prepared,
    i: usize,
    target: Option<usize>,
    o: &LocalOutcome,
) -> Result<RunRow, HarnessError> {
    let n = p.net.layers().len();
    let t = o.t_exit;
    let synops = crate::metrics::total_synops(&usage(&p.net.layer_flops(0..n), &o.layer_activity, t), t)?;
    let mut row = base_row(cfg, i, target);
    row.t_exit = t;
    row.prediction = o.prediction;
    row.confidence = o.confidence;
    row.set_latency(LatencyBreakdown::new(o.compute_s, 0.0, 0.0, 0.0));
    row.edge_synops = synops;
    row.edge_energy_j = cfg.energy.joules(synops);
    Ok(row)
}

fn session_err(i: usize) -> impl FnOnce(SessionError) -> HarnessError {
    move |source| HarnessError::Session {
        session: session_id(i),
        source,
    }
}

/// Session id of sample `i`.
pub fn session_id(i: usize) -> u32 {
    (i as u32).wrapping_add(1)
}

/// Edge end of a simulated link whose cloud session runs on the same thread:
/// everything the edge sends is handled by the cloud before `send` returns,
/// so no worker ever blocks waiting on another.
struct InlineCloud<'a> {
    edge: SimEndpoint,
    cloud_end: SimEndpoint,
    session: CloudSession<'a>,
    result: Option<Result<CloudSessionSummary, SessionError>>,
}

impl InlineCloud<'_> {
    fn pump(&mut self) -> Result<(), TransportError> {
        while let Some(d) = self.cloud_end.try_recv()? {
            if self.result.is_some() {
                continue;
            }
            match self.session.handle(&d, &mut self.cloud_end) {
                Ok(CloudStep::Continue) => {}
                Ok(CloudStep::Finished(s)) => self.result = Some(Ok(s)),
                Err(e) => self.result = Some(Err(e)),
            }
        }
        Ok(())
    }
}

impl Transport for InlineCloud<'_> {
    fn send(&mut self, msg: &[u8]) -> Result<f64, TransportError> {
        let t = self.edge.send(msg)?;
        self.pump()?;
        Ok(t)
    }

    fn recv(&mut self) -> Result<Delivery, TransportError> {
        self.edge.try_recv()?.ok_or(TransportError::Closed)
    }

    fn advance(&mut self, dt: f64) {
        self.edge.advance(dt);
    }

    fn now(&self) -> f64 {
        self.edge.now()
    }

    fn reset_clock(&mut self) {
        self.edge.reset_clock();
    }

    fn counters(&self) -> Counters {
        self.edge.counters()
    }

    fn is_simulated(&self) -> bool {
        true
    }
}

/// One sample over a fresh simulated link.
pub fn simulate_sample(
    cfg: &ExperimentConfig,
    p: &Prepared,
    i: usize,
) -> Result<(RunRow, EdgeOutcome, CloudSessionSummary), HarnessError> {
    let rule = exit_rule(cfg)?;
    let (frames, target) = sample_frames(cfg, &p.net, i)?;
    let edge = edge_node(cfg, p, rule);
    let cloud = cloud_node(cfg, p)?;
    let (a, b) = sim_pair(cfg.uplink, cfg.downlink);
    let mut link = InlineCloud {
        edge: a,
        cloud_end: b,
        session: CloudSession::new(&cloud),
        result: None,
    };
    let edge_result = edge_run_sample(&edge, session_id(i), &frames, &mut link);
    let outcome = match (edge_result, link.result.take()) {
        (Ok(o), Some(Ok(summary))) => (o, summary),
        // Report whichever side failed first rather than the ERROR its peer saw.
        (Err(e), _) if !matches!(e, SessionError::Remote { .. }) => return Err(session_err(i)(e)),
        (_, Some(Err(e))) | (Err(e), _) => return Err(session_err(i)(e)),
        (Ok(_), None) => return Err(HarnessError::Config("cloud saw no session end".into())),
    };
    let (outcome, summary) = outcome;
    Ok((edge_row(cfg, p, i, target, &outcome)?, outcome, summary))
}

/// Run every sample of `cfg` and build the report.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    let p = prepare(cfg)?;
    run_prepared(cfg, &p)
}

pub fn run_prepared(cfg: &ExperimentConfig, p: &Prepared) -> Result<RunReport, HarnessError> {
    let rows: Vec<RunRow> = match (&cfg.mode, p.boundary) {
        (_, None) => {
            let rule = exit_rule(cfg)?;
            par::map_indexed(cfg.execution, cfg.samples, |i| {
                let (frames, target) = sample_frames(cfg, &p.net, i)?;
                let o = run_local(&p.net, &frames, &rule, cfg.edge_timing).map_err(session_err(i))?;
                local_row(cfg, p, i, target, &o)
            })
            .into_iter()
            .collect::<Result<_, _>>()?
        }
        (Mode::Simulated, Some(_)) => par::map_indexed(cfg.execution, cfg.samples, |i| {
            simulate_sample(cfg, p, i).map(|r| r.0)
        })
        .into_iter()
        .collect::<Result<_, _>>()?,
        (Mode::Socket(addr), Some(_)) => run_socket(cfg, p, addr)?,
    };
    Ok(RunReport::build(rows)?)
}

/// Sequential sessions over one TCP connection.
fn run_socket(cfg: &ExperimentConfig, p: &Prepared, addr: &str) -> Result<Vec<RunRow>, HarnessError> {
    let rule = exit_rule(cfg)?;
    let edge = edge_node(cfg, p, rule);
    let mut t = StreamTransport::connect(addr)?;
    let mut rows = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let (frames, target) = sample_frames(cfg, &p.net, i)?;
        t.reset_clock();
        let o = edge_run_sample(&edge, session_id(i), &frames, &mut t).map_err(session_err(i))?;
        rows.push(edge_row(cfg, p, i, target, &o)?);
    }
    Ok(rows)
}

/// Per-session log line written by the cloud server.
pub fn describe_session(id: u32, r: &Result<CloudSessionSummary, SessionError>) -> String {
    match r {
        Ok(s) => format!(
            "session {id}: {} timesteps, prediction {} (cloud argmax {})",
            s.timesteps, s.edge_prediction, s.cloud_prediction
        ),
        Err(e) => format!("session {id}: failed: {e}"),
    }
}

/// Accept connections and serve their sessions; each connection gets its own
/// thread. Stops after `max_connections` connections when given.
pub fn serve_cloud(
    listener: TcpListener,
    cfg: &ExperimentConfig,
    p: &Prepared,
    max_connections: Option<usize>,
    log: &(dyn Fn(&str) + Sync),
) -> Result<(), HarnessError> {
    let cloud = cloud_node(cfg, p)?;
    std::thread::scope(|s| {
        for (n, conn) in listener.incoming().enumerate() {
            match conn {
                Ok(stream) => {
                    let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
                    let cloud = &cloud;
                    s.spawn(move || {
                        log(&format!("connection from {peer}"));
                        let mut t = match StreamTransport::from_tcp(stream) {
                            Ok(t) => t,
                            Err(e) => return log(&format!("connection {peer}: {e}")),
                        };
                        match serve_connection(cloud, &mut t, |id, r| log(&describe_session(id, r))) {
                            Ok(st) => log(&format!(
                                "connection {peer} closed: {} sessions completed, {} failed",
                                st.completed.len(),
                                st.failed.len()
                            )),
                            Err(e) => log(&format!("connection {peer} aborted: {e}")),
                        }
                    });
                }
                Err(e) => log(&format!("accept failed: {e}")),
            }
            if max_connections.is_some_and(|m| n + 1 >= m) {
                break;
            }
        }
    });
    Ok(())
}

/// Bind the cloud listener.
pub fn bind(addr: &str) -> Result<TcpListener, HarnessError> {
    let addrs: Vec<_> = addr
        .to_socket_addrs()
        .map_err(|source| HarnessError::Io {
            path: addr.to_string(),
            source,
        })?
        .collect();
    TcpListener::bind(&addrs[..]).map_err(|source| HarnessError::Io {
        path: addr.to_string(),
        source,
    })
}
