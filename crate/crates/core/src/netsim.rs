//! Message transports: a deterministic simulated link and a TCP stream.
//!
//! Both deliver whole protocol messages reliably and in order. The simulated
//! link keeps a virtual clock per endpoint: sending a message of `n` bytes
//! blocks the sender for `transmission_time(8n)` and stamps the message with
//! its delivery instant; the receiver's clock jumps forward to that instant.
//! Compute time is charged explicitly with [`Transport::advance`].

use std::io::{ErrorKind, Read, Write};
use std::net::TcpStream;
use std::sync::mpsc::{channel, Receiver, Sender, TryRecvError};
use std::time::Instant;

use thiserror::Error;

use crate::protocol::wire::{payload_len_field, HEADER_LEN};
use crate::rng::SeededRng;

/// Throughput of the reference link, bits per second.
pub const DEFAULT_THROUGHPUT_BPS: f64 = 18.9e6;

/// Largest payload a stream reader will buffer.
pub const MAX_PAYLOAD: usize = 64 << 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("transport closed")]
    Closed,
    #[error("framing: {0}")]
    Framing(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("invalid channel: {0}")]
    Channel(String),
}

impl From<std::io::Error> for TransportError {
    fn from(e: std::io::Error) -> Self {
        TransportError::Io(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub seed: u64,
    /// Serialization time is stretched by up to this fraction.
    pub fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelModel {
    pub throughput_bps: f64,
    pub propagation_delay_s: f64,
    pub jitter: Option<Jitter>,
}

impl Default for ChannelModel {
    fn default() -> Self {
        Self {
            throughput_bps: DEFAULT_THROUGHPUT_BPS,
            propagation_delay_s: 0.0,
            jitter: None,
        }
    }
}

impl ChannelModel {
    pub fn new(throughput_bps: f64, propagation_delay_s: f64) -> Result<Self, TransportError> {
        let ch = Self {
            throughput_bps,
            propagation_delay_s,
            jitter: None,
        };
        ch.validate()?;
        Ok(ch)
    }

    pub fn with_jitter(mut self, seed: u64, fraction: f64) -> Result<Self, TransportError> {
        self.jitter = Some(Jitter { seed, fraction });
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), TransportError> {
        if !(self.throughput_bps.is_finite() && self.throughput_bps > 0.0) {
            return Err(TransportError::Channel(format!(
                "throughput must be positive, got {}",
                self.throughput_bps
            )));
        }
        if !(self.propagation_delay_s.is_finite() && self.propagation_delay_s >= 0.0) {
            return Err(TransportError::Channel(format!(
                "delay must be non-negative, got {}",
                self.propagation_delay_s
            )));
        }
        if let Some(j) = self.jitter {
            if !(0.0..1.0).contains(&j.fraction) {
                return Err(TransportError::Channel(format!(
                    "jitter fraction must be in [0, 1), got {}",
                    j.fraction
                )));
            }
        }
        Ok(())
    }

    /// Seconds to push `bits` through the link, without jitter.
    pub fn transmission_time(&self, bits: u64) -> f64 {
        bits as f64 / self.throughput_bps + self.propagation_delay_s
    }

    /// Transmission time with jitter drawn from a stream keyed by `key`, so a
    /// given message always gets the same delay.
    pub fn transmission_time_keyed(&self, bits: u64, key: u64) -> f64 {
        let serial = bits as f64 / self.throughput_bps;
        let stretch = match self.jitter {
            Some(j) if j.fraction > 0.0 => 1.0 + j.fraction * SeededRng::derive(j.seed, key).next_f64(),
            _ => 1.0,
        };
        serial * stretch + self.propagation_delay_s
    }
}

/// Free function form of [`ChannelModel::transmission_time`].
pub fn transmission_time(bits: u64, ch: &ChannelModel) -> f64 {
    ch.transmission_time(bits)
}

/// One received message.
#[derive(Clone, Debug, PartialEq)]
pub struct Delivery {
    pub bytes: Vec<u8>,
    /// Sender's clock when the message left, when known (simulated link only).
    pub sent_at: Option<f64>,
    /// Receiver's clock once the whole message has arrived.
    pub delivered_at: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub messages_sent: u64,
    pub bytes_sent: u64,
    pub messages_received: u64,
    pub bytes_received: u64,
}

impl Counters {
    fn on_send(&mut self, n: usize) {
        self.messages_sent += 1;
        self.bytes_sent += n as u64;
    }

    fn on_recv(&mut self, n: usize) {
        self.messages_received += 1;
        self.bytes_received += n as u64;
    }
}

pub trait Transport: Send {
    /// Send one whole message; returns the instant it is fully delivered
    /// (simulated) or written (stream).
    fn send(&mut self, msg: &[u8]) -> Result<f64, TransportError>;
    /// Block for the next message.
    fn recv(&mut self) -> Result<Delivery, TransportError>;
    /// Charge local compute time.
    fn advance(&mut self, dt: f64);
    fn now(&self) -> f64;
    /// Start a new timeline at zero.
    fn reset_clock(&mut self);
    fn counters(&self) -> Counters;
    /// Whether timestamps are virtual.
    fn is_simulated(&self) -> bool;
}

struct Packet {
    bytes: Vec<u8>,
    sent_at: f64,
    delivered_at: f64,
}

/// One end of a simulated duplex link.
pub struct SimEndpoint {
    tx: Sender<Packet>,
    rx: Receiver<Packet>,
    channel: ChannelModel,
    clock: f64,
    counters: Counters,
}

/// Connected endpoints; `uplink` shapes traffic from `a` to `b`.
pub fn sim_pair(uplink: ChannelModel, downlink: ChannelModel) -> (SimEndpoint, SimEndpoint) {
    let (tx_a, rx_b) = channel();
    let (tx_b, rx_a) = channel();
    let a = SimEndpoint {
        tx: tx_a,
        rx: rx_a,
        channel: uplink,
        clock: 0.0,
        counters: Counters::default(),
    };
    let b = SimEndpoint {
        tx: tx_b,
        rx: rx_b,
        channel: downlink,
        clock: 0.0,
        counters: Counters::default(),
    };
    (a, b)
}

impl SimEndpoint {
    /// Next message if one is already queued.
    pub fn try_recv(&mut self) -> Result<Option<Delivery>, TransportError> {
        match self.rx.try_recv() {
            Ok(p) => Ok(Some(self.accept(p))),
            Err(TryRecvError::Empty) => Ok(None),
            Err(TryRecvError::Disconnected) => Err(TransportError::Closed),
        }
    }

    fn accept(&mut self, p: Packet) -> Delivery {
        self.clock = self.clock.max(p.delivered_at);
        self.counters.on_recv(p.bytes.len());
        Delivery {
            bytes: p.bytes,
            sent_at: Some(p.sent_at),
            delivered_at: self.clock,
        }
    }
}

impl Transport for SimEndpoint {
    fn send(&mut self, msg: &[u8]) -> Result<f64, TransportError> {
        let key = crc32fast::hash(msg) as u64 | (msg.len() as u64) << 32;
        let sent_at = self.clock;
        let delivered_at = sent_at + self.channel.transmission_time_keyed(8 * msg.len() as u64, key);
        self.tx
            .send(Packet {
                bytes: msg.to_vec(),
                sent_at,
                delivered_at,
            })
            .map_err(|_| TransportError::Closed)?;
        self.clock = delivered_at;
        self.counters.on_send(msg.len());
        Ok(delivered_at)
    }

    fn recv(&mut self) -> Result<Delivery, TransportError> {
        let p = self.rx.recv().map_err(|_| TransportError::Closed)?;
        Ok(self.accept(p))
    }

    fn advance(&mut self, dt: f64) {
        self.clock += dt.max(0.0);
    }

    fn now(&self) -> f64 {
        self.clock
    }

    fn reset_clock(&mut self) {
        self.clock = 0.0;
    }

    fn counters(&self) -> Counters {
        self.counters
    }

    fn is_simulated(&self) -> bool {
        true
    }
}

/// Messages framed over a byte stream by their own header length field.
pub struct StreamTransport<S> {
    stream: S,
    epoch: Instant,
    counters: Counters,
}

impl StreamTransport<TcpStream> {
    pub fn connect(addr: &str) -> Result<Self, TransportError> {
        let s = TcpStream::connect(addr)?;
        s.set_nodelay(true)?;
        Ok(Self::new(s))
    }

    pub fn from_tcp(s: TcpStream) -> Result<Self, TransportError> {
        s.set_nodelay(true)?;
        Ok(Self::new(s))
    }
}

impl<S: Read + Write + Send> StreamTransport<S> {
    pub fn new(stream: S) -> Self {
        Self {
            stream,
            epoch: Instant::now(),
            counters: Counters::default(),
        }
    }

    pub fn into_inner(self) -> S {
        self.stream
    }
}

/// Fill `buf`; `Ok(false)` on EOF before the first byte.
fn read_full<S: Read>(s: &mut S, buf: &mut [u8]) -> Result<bool, TransportError> {
    let mut got = 0;
    while got < buf.len() {
        match s.read(&mut buf[got..]) {
            Ok(0) if got == 0 => return Ok(false),
            Ok(0) => {
                return Err(TransportError::Framing(format!(
                    "stream ended after {got} of {} bytes",
                    buf.len()
                )))
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

impl<S: Read + Write + Send> Transport for StreamTransport<S> {
    fn send(&mut self, msg: &[u8]) -> Result<f64, TransportError> {
        match self.stream.write_all(msg).and_then(|_| self.stream.flush()) {
            Ok(()) => {}
            Err(e) if matches!(e.kind(), ErrorKind::BrokenPipe | ErrorKind::ConnectionReset) => {
                return Err(TransportError::Closed)
            }
            Err(e) => return Err(e.into()),
        }
        self.counters.on_send(msg.len());
        Ok(self.now())
    }

    fn recv(&mut self) -> Result<Delivery, TransportError> {
        let mut bytes = vec![0u8; HEADER_LEN];
        if !read_full(&mut self.stream, &mut bytes)? {
            return Err(TransportError::Closed);
        }
        let len = payload_len_field(&bytes) as usize;
        if len > MAX_PAYLOAD {
            return Err(TransportError::Framing(format!("payload length {len} exceeds limit")));
        }
        bytes.resize(HEADER_LEN + len, 0);
        if len > 0 && !read_full(&mut self.stream, &mut bytes[HEADER_LEN..])? {
            return Err(TransportError::Framing("stream ended after header".into()));
        }
        self.counters.on_recv(bytes.len());
        Ok(Delivery {
            bytes,
            sent_at: None,
            delivered_at: self.now(),
        })
    }

    /// Real time passes on its own.
    fn advance(&mut self, _dt: f64) {}

    fn now(&self) -> f64 {
        self.epoch.elapsed().as_secs_f64()
    }

    fn reset_clock(&mut self) {
        self.epoch = Instant::now();
    }

    fn counters(&self) -> Counters {
        self.counters
    }

    fn is_simulated(&self) -> bool {
        false
    }
}
