//! Edge and cloud halves of one co-inference session, plus the single-process
//! reference that both must agree with.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use crate::codec::{Bottleneck, CodecState};
use crate::exit::{assess, Decision, ExitRule, LogitsRecord};
use crate::netsim::{ChannelModel, Delivery, Transport, TransportError};
use crate::snn::{Activation, FrameSource, NetState, NetworkGraph};
use crate::tensor::SpikeTensor;

use super::session::{SessionError, SessionState};
use super::wire::{self, ErrorCode, Header, Message, MsgType, DIGEST_LEN, FLAG_COMPRESSED};

/// How compute time is charged to the timeline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ComputeTiming {
    /// Dense FLOPs divided by a nominal device rate; deterministic.
    Modeled { flops_per_s: f64 },
    /// Host wall-clock time of the computation.
    Measured,
}

impl ComputeTiming {
    fn time<T>(&self, flops: u64, f: impl FnOnce() -> T) -> (T, f64) {
        match self {
            ComputeTiming::Modeled { flops_per_s } => (f(), flops as f64 / flops_per_s),
            ComputeTiming::Measured => {
                let start = Instant::now();
                let out = f();
                (out, start.elapsed().as_secs_f64())
            }
        }
    }
}

/// Nominal edge device rate for modeled timing, FLOP/s.
pub const DEFAULT_EDGE_FLOPS: f64 = 20e9;
/// Nominal cloud device rate for modeled timing, FLOP/s.
pub const DEFAULT_CLOUD_FLOPS: f64 = 2e12;

/// Everything the edge needs for one sample.
#[derive(Clone, Copy)]
pub struct EdgeNode<'a> {
    pub net: &'a NetworkGraph,
    pub boundary: usize,
    pub codec: Option<&'a Bottleneck>,
    pub rule: ExitRule,
    pub digest: [u8; DIGEST_LEN],
    pub timing: ComputeTiming,
    /// Used to split a measured round trip into transmission and cloud time
    /// when the transport cannot timestamp the far end.
    pub uplink: ChannelModel,
    pub downlink: ChannelModel,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepTiming {
    pub edge_compute_s: f64,
    pub uplink_s: f64,
    pub cloud_compute_s: f64,
    pub downlink_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeOutcome {
    pub prediction: usize,
    pub t_exit: usize,
    pub confidence: f64,
    pub decision_logits: Vec<f32>,
    pub confidences: Vec<f64>,
    pub steps: Vec<StepTiming>,
    /// Per edge layer, input activity summed over the timesteps run.
    pub layer_activity: Vec<f64>,
    /// Encoder conv and BN input activity summed over the timesteps run.
    pub encoder_activity: [f64; 2],
    /// Spike bits sent up, before byte padding.
    pub spike_bits: u64,
    /// Bits the split activation would have taken without the bottleneck.
    pub raw_bits: u64,
    pub feature_payload_bytes: u64,
    pub feature_bytes: u64,
    pub logits_bytes: u64,
    pub control_bytes: u64,
}

/// Running edge-side state for one sample.
struct EdgeCompute<'a> {
    node: &'a EdgeNode<'a>,
    states: NetState,
    codec_state: Option<CodecState>,
    layer_activity: Vec<f64>,
    encoder_activity: [f64; 2],
    flops: u64,
}

impl<'a> EdgeCompute<'a> {
    fn new(node: &'a EdgeNode<'a>) -> Self {
        let mut flops: u64 = node.net.layer_flops(0..node.boundary).iter().sum();
        if let Some(c) = node.codec {
            flops += c.encoder_flops();
        }
        Self {
            node,
            states: node.net.new_state(),
            codec_state: node.codec.map(|c| c.new_state()),
            layer_activity: vec![0.0; node.boundary],
            encoder_activity: [0.0; 2],
            flops,
        }
    }

    /// Edge half plus optional encoder: returns (split activation, sent tensor).
    fn step(&mut self, frame: &SpikeTensor) -> Result<(SpikeTensor, SpikeTensor), SessionError> {
        let net = self.node.net;
        let act = &mut self.layer_activity;
        let out = net.forward_observed(
            &mut self.states,
            Activation::Spike(frame.clone()),
            0..self.node.boundary,
            |i, a| act[i] += a.activity(),
        )?;
        let split = match out {
            Activation::Spike(s) => s,
            Activation::Dense(_) => {
                return Err(SessionError::Compute(format!(
                    "boundary {} does not carry spikes",
                    self.node.boundary
                )))
            }
        };
        let sent = match (self.node.codec, self.codec_state.as_mut()) {
            (Some(c), Some(st)) => {
                let (z, a) = c.encode_observed(st, &split)?;
                self.encoder_activity[0] += a[0];
                self.encoder_activity[1] += a[1];
                z
            }
            _ => split.clone(),
        };
        Ok((split, sent))
    }
}

fn send(
    transport: &mut dyn Transport,
    session: &mut SessionState,
    msg: &Message,
    timestep: u8,
    flags: u8,
) -> Result<(Vec<u8>, f64, f64), SessionError> {
    let bytes = wire::encode(msg, session.session_id(), timestep, flags)?;
    session.on_send(&Header::parse(&bytes)?)?;
    let sent_at = transport.now();
    let delivered = transport.send(&bytes)?;
    Ok((bytes, sent_at, delivered))
}

/// Try to tell the peer why the session ended; failures are ignored.
fn send_error(transport: &mut dyn Transport, session_id: u32, err: &SessionError) {
    if let Some(code) = err.wire_code() {
        if let Ok(b) = wire::encode(
            &Message::Error {
                code,
                message: err.to_string(),
            },
            session_id,
            0,
            0,
        ) {
            let _ = transport.send(&b);
        }
    }
}

/// Run one sample from the edge: HELLO, then FEATURE/LOGITS per timestep
/// until the exit rule stops, then EXIT.
pub fn edge_run_sample(
    node: &EdgeNode,
    session_id: u32,
    frames: &FrameSource,
    transport: &mut dyn Transport,
) -> Result<EdgeOutcome, SessionError> {
    let mut session = SessionState::edge(session_id, node.rule.t_max(), node.digest)?;
    let result = edge_session(node, &mut session, frames, transport);
    if let Err(e) = &result {
        if !session.is_done() {
            send_error(transport, session_id, e);
        }
    }
    result
}

fn edge_session(
    node: &EdgeNode,
    session: &mut SessionState,
    frames: &FrameSource,
    transport: &mut dyn Transport,
) -> Result<EdgeOutcome, SessionError> {
    let simulated = transport.is_simulated();
    let mut compute = EdgeCompute::new(node);
    let flags = if node.codec.is_some() { FLAG_COMPRESSED } else { 0 };
    let (hello, _, _) = send(transport, session, &Message::Hello { digest: node.digest }, 0, 0)?;
    let mut control_bytes = hello.len() as u64;

    let mut record_steps = Vec::new();
    let mut confidences = Vec::new();
    let (mut spike_bits, mut raw_bits) = (0u64, 0u64);
    let (mut feature_payload_bytes, mut feature_bytes, mut logits_bytes) = (0u64, 0u64, 0u64);
    for t in 1..=node.rule.t_max() {
        let ts = t as u8;
        let frame = frames.frame(t)?;
        let (res, edge_s) = compute.timing_step(&frame);
        let (split, sent) = res?;
        transport.advance(edge_s);
        raw_bits += split.numel() as u64;
        spike_bits += sent.numel() as u64;

        let (fb, f_sent, f_delivered) = send(transport, session, &Message::Feature { spikes: sent }, ts, flags)?;
        feature_bytes += fb.len() as u64;
        feature_payload_bytes += (fb.len() - wire::HEADER_LEN) as u64;

        let reply = transport.recv()?;
        let (h, msg) = wire::decode(&reply.bytes)?;
        if h.session_id != session.session_id() {
            return Err(SessionError::Protocol(format!("reply for session {}", h.session_id)));
        }
        if let Message::Error { code, message } = msg {
            session.on_recv(&h, None)?;
            return Err(match code {
                ErrorCode::Handshake => SessionError::Handshake(message),
                code => SessionError::Remote { code, message },
            });
        }
        session.on_recv(&h, None)?;
        let Message::Logits { logits } = msg else { unreachable!("checked by session") };
        if logits.len() != node.net.num_classes() {
            return Err(SessionError::Protocol(format!(
                "{} logits, expected {}",
                logits.len(),
                node.net.num_classes()
            )));
        }
        logits_bytes += reply.bytes.len() as u64;

        let timing = step_timing(node, edge_s, &fb, f_sent, f_delivered, &reply, simulated);
        record_steps.push(timing);

        let (cs, pred) = assess(&logits)?;
        confidences.push(cs);
        if node.rule.decide(cs, t)?.is_stop() {
            let (eb, _, _) = send(
                transport,
                session,
                &Message::Exit {
                    prediction: pred as u16,
                },
                ts,
                0,
            )?;
            control_bytes += eb.len() as u64;
            return Ok(EdgeOutcome {
                prediction: pred,
                t_exit: t,
                confidence: cs,
                decision_logits: logits,
                confidences,
                steps: record_steps,
                layer_activity: compute.layer_activity,
                encoder_activity: compute.encoder_activity,
                spike_bits,
                raw_bits,
                feature_payload_bytes,
                feature_bytes,
                logits_bytes,
                control_bytes,
            });
        }
    }
    unreachable!("the exit rule always stops at t_max")
}

impl EdgeCompute<'_> {
    fn timing_step(&mut self, frame: &SpikeTensor) -> (Result<(SpikeTensor, SpikeTensor), SessionError>, f64) {
        let timing = self.node.timing;
        let flops = self.flops;
        timing.time(flops, || self.step(frame))
    }
}

fn step_timing(
    node: &EdgeNode,
    edge_s: f64,
    feature: &[u8],
    f_sent: f64,
    f_delivered: f64,
    reply: &Delivery,
    simulated: bool,
) -> StepTiming {
    match reply.sent_at {
        Some(l_sent) if simulated => StepTiming {
            edge_compute_s: edge_s,
            uplink_s: f_delivered - f_sent,
            cloud_compute_s: (l_sent - f_delivered).max(0.0),
            downlink_s: reply.delivered_at - l_sent,
        },
        _ => {
            // Wall-clock round trip; attribute transmission by the channel model.
            let up = node.uplink.transmission_time(8 * feature.len() as u64);
            let down = node.downlink.transmission_time(8 * reply.bytes.len() as u64);
            let rtt = reply.delivered_at - f_sent;
            StepTiming {
                edge_compute_s: edge_s,
                uplink_s: up,
                cloud_compute_s: (rtt - up - down).max(0.0),
                downlink_s: down,
            }
        }
    }
}

/// Cloud-side configuration.
#[derive(Clone, Copy)]
pub struct CloudNode<'a> {
    pub net: &'a NetworkGraph,
    pub boundary: usize,
    pub codec: Option<&'a Bottleneck>,
    pub digest: [u8; DIGEST_LEN],
    pub timing: ComputeTiming,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CloudSessionSummary {
    pub session_id: u32,
    pub timesteps: usize,
    /// Class the edge reported in EXIT.
    pub edge_prediction: usize,
    /// Argmax of the cloud's own final decision logits.
    pub cloud_prediction: usize,
    pub final_logits: Vec<f32>,
}

/// Cloud state of one live session.
pub struct CloudSession<'a> {
    node: &'a CloudNode<'a>,
    fsm: SessionState,
    states: NetState,
    codec_state: Option<CodecState>,
    record: LogitsRecord,
    flops: u64,
}

/// What handling one message produced.
#[derive(Debug)]
pub enum CloudStep {
    Continue,
    Finished(CloudSessionSummary),
}

impl<'a> CloudSession<'a> {
    pub fn new(node: &'a CloudNode<'a>) -> Self {
        let mut flops: u64 = node.net.layer_flops(node.boundary..node.net.layers().len()).iter().sum();
        if let Some(c) = node.codec {
            flops += c.decoder_flops();
        }
        Self {
            node,
            fsm: SessionState::cloud(node.digest),
            states: node.net.new_state(),
            codec_state: node.codec.map(|c| c.new_state()),
            record: LogitsRecord::new(),
            flops,
        }
    }

    pub fn state(&self) -> &SessionState {
        &self.fsm
    }

    fn expected_shape(&self) -> &crate::tensor::Shape {
        match self.node.codec {
            Some(c) => c.code_shape(),
            None => self.node.net.shape_before(self.node.boundary),
        }
    }

    fn compute(&mut self, x: &SpikeTensor) -> Result<Vec<f32>, SessionError> {
        let node = self.node;
        let input = match (node.codec, self.codec_state.as_mut()) {
            (Some(c), Some(st)) => c.decode(st, x)?,
            _ => x.clone(),
        };
        let out = node.net.forward_timestep(
            &mut self.states,
            Activation::Spike(input),
            node.boundary..node.net.layers().len(),
        )?;
        let logits = out.into_dense().into_data();
        self.record.push(&logits)?;
        Ok(self.record.decision_logits())
    }

    /// Handle one delivered message, replying on `transport` as needed.
    /// On error an ERROR has already been sent when appropriate.
    pub fn handle(&mut self, d: &Delivery, transport: &mut dyn Transport) -> Result<CloudStep, SessionError> {
        let r = self.handle_inner(d, transport);
        if let Err(e) = &r {
            if !matches!(e, SessionError::Remote { .. }) {
                send_error(transport, self.fsm.session_id(), e);
            }
        }
        r
    }

    fn handle_inner(&mut self, d: &Delivery, transport: &mut dyn Transport) -> Result<CloudStep, SessionError> {
        let (h, msg) = wire::decode(&d.bytes)?;
        match msg {
            Message::Hello { digest } => {
                self.fsm.on_recv(&h, Some(&digest))?;
                Ok(CloudStep::Continue)
            }
            Message::Feature { spikes } => {
                self.fsm.on_recv(&h, None)?;
                let want_compressed = self.node.codec.is_some();
                if h.compressed() != want_compressed {
                    return Err(SessionError::Protocol(format!(
                        "FEATURE compressed={} but session expects compressed={want_compressed}",
                        h.compressed()
                    )));
                }
                if spikes.shape() != self.expected_shape() {
                    return Err(SessionError::Shape(format!(
                        "FEATURE shape {} does not match negotiated {}",
                        spikes.shape(),
                        self.expected_shape()
                    )));
                }
                let timing = self.node.timing;
                let (logits, dt) = timing.time(self.flops, || self.compute(&spikes));
                let logits = logits?;
                transport.advance(dt);
                send(transport, &mut self.fsm, &Message::Logits { logits }, h.timestep, 0)?;
                Ok(CloudStep::Continue)
            }
            Message::Exit { prediction } => {
                self.fsm.on_recv(&h, None)?;
                let final_logits = self.record.decision_logits();
                let (_, cloud_prediction) = assess(&final_logits)?;
                let summary = CloudSessionSummary {
                    session_id: h.session_id,
                    timesteps: self.record.timesteps(),
                    edge_prediction: prediction as usize,
                    cloud_prediction,
                    final_logits,
                };
                self.states.reset();
                if let Some(c) = self.codec_state.as_mut() {
                    c.reset();
                }
                self.record.clear();
                Ok(CloudStep::Finished(summary))
            }
            Message::Error { code, message } => {
                self.fsm.on_recv(&h, None)?;
                Err(SessionError::Remote { code, message })
            }
            Message::Logits { .. } => {
                self.fsm.on_recv(&h, None)?;
                unreachable!("the cloud state machine never accepts LOGITS")
            }
        }
    }
}

/// Serve exactly one session from `transport`. `Ok(None)` if the peer closed
/// the connection before opening a session.
pub fn cloud_run_session(
    node: &CloudNode,
    transport: &mut dyn Transport,
) -> Result<Option<CloudSessionSummary>, SessionError> {
    let mut s = CloudSession::new(node);
    loop {
        let d = match transport.recv() {
            Ok(d) => d,
            Err(TransportError::Closed) if s.state().phase() == super::session::Phase::Idle => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        if let CloudStep::Finished(sum) = s.handle(&d, transport)? {
            return Ok(Some(sum));
        }
    }
}

/// Outcome of a connection: one entry per session that ended.
#[derive(Debug, Default)]
pub struct ServeStats {
    pub completed: Vec<CloudSessionSummary>,
    pub failed: Vec<(u32, SessionError)>,
}

/// Serve sessions until the peer closes the connection. Sessions may
/// interleave by id; a failed session is reported and any of its messages
/// still in flight are dropped.
pub fn serve_connection(
    node: &CloudNode,
    transport: &mut dyn Transport,
    mut on_session_end: impl FnMut(u32, &Result<CloudSessionSummary, SessionError>),
) -> Result<ServeStats, TransportError> {
    let mut live: BTreeMap<u32, CloudSession> = BTreeMap::new();
    let mut dead: BTreeSet<u32> = BTreeSet::new();
    let mut stats = ServeStats::default();
    loop {
        let d = match transport.recv() {
            Ok(d) => d,
            Err(TransportError::Closed) => return Ok(stats),
            Err(e) => return Err(e),
        };
        let header = match Header::parse(&d.bytes) {
            Ok(h) => h,
            Err(e) => {
                let err = SessionError::Wire(e);
                send_error(transport, 0, &err);
                on_session_end(0, &Err(err.clone()));
                stats.failed.push((0, err));
                continue;
            }
        };
        let id = header.session_id;
        if dead.contains(&id) && header.msg_type != MsgType::Hello {
            continue;
        }
        if !live.contains_key(&id) {
            if header.msg_type != MsgType::Hello {
                let err = SessionError::Protocol(format!("{:?} for unknown session {id}", header.msg_type));
                send_error(transport, id, &err);
                on_session_end(id, &Err(err.clone()));
                stats.failed.push((id, err));
                dead.insert(id);
                continue;
            }
            dead.remove(&id);
            live.insert(id, CloudSession::new(node));
        }
        let s = live.get_mut(&id).expect("inserted");
        match s.handle(&d, transport) {
            Ok(CloudStep::Continue) => {}
            Ok(CloudStep::Finished(sum)) => {
                live.remove(&id);
                let r = Ok(sum);
                on_session_end(id, &r);
                stats.completed.push(r.unwrap());
            }
            Err(SessionError::Transport(e)) => return Err(e),
            Err(e) => {
                live.remove(&id);
                dead.insert(id);
                let r = Err(e);
                on_session_end(id, &r);
                stats.failed.push((id, r.unwrap_err()));
            }
        }
    }
}

/// Single-process run of the whole network with the same exit rule.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalOutcome {
    pub prediction: usize,
    pub t_exit: usize,
    pub confidence: f64,
    pub decision_logits: Vec<f32>,
    pub confidences: Vec<f64>,
    /// Per layer, input activity summed over the timesteps run.
    pub layer_activity: Vec<f64>,
    pub compute_s: f64,
}

pub fn run_local(
    net: &NetworkGraph,
    frames: &FrameSource,
    rule: &ExitRule,
    timing: ComputeTiming,
) -> Result<LocalOutcome, SessionError> {
    let n = net.layers().len();
    let flops: u64 = net.layer_flops(0..n).iter().sum();
    let mut states = net.new_state();
    let mut record = LogitsRecord::new();
    let mut activity = vec![0.0; n];
    let mut confidences = Vec::new();
    let mut compute_s = 0.0;
    for t in 1..=rule.t_max() {
        let frame = frames.frame(t)?;
        let (out, dt) = timing.time(flops, || {
            net.forward_observed(&mut states, Activation::Spike(frame), 0..n, |i, a| {
                activity[i] += a.activity()
            })
        });
        compute_s += dt;
        record.push(&out?.into_dense().into_data())?;
        let logits = record.decision_logits();
        let (cs, pred) = assess(&logits)?;
        confidences.push(cs);
        let d = rule.decide(cs, t)?;
        if d != Decision::Continue {
            return Ok(LocalOutcome {
                prediction: pred,
                t_exit: t,
                confidence: cs,
                decision_logits: logits,
                confidences,
                layer_activity: activity,
                compute_s,
            });
        }
    }
    unreachable!("the exit rule always stops at t_max")
}
