//! Weight container and deterministic initialization.
//!
//! Container layout (all integers big-endian):
//!
//! ```text
//! "NCWTS001"                      8 bytes
//! entry count                     u32
//! per entry:
//!   name length                   u32
//!   name                          UTF-8
//!   dtype                         u8 (0 = f32)
//!   rank                          u32
//!   extents                       u32 x rank
//!   values                        f32 x product(extents), IEEE-754
//! CRC-32 (IEEE) of all preceding bytes   u32
//! ```
//!
//! Network tensors are named `layer.<index>.<slot>`; codec tensors use the
//! reserved `bottleneck.` prefix.

use std::collections::HashSet;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::SeededRng;
use crate::snn::{LayerSpec, NetworkGraph, SnnError};

pub const MAGIC: &[u8; 8] = b"NCWTS001";
pub const DTYPE_F32: u8 = 0;

/// Gain applied to batch-norm scale at init. Untrained He-scaled weights
/// driven by sparse spikes leave deep layers silent; this keeps firing rates
/// in a useful range.
pub const BN_INIT_GAIN: f32 = 4.0;

/// Weight gain for hidden linear layers, which feed a LIF without a
/// batch-norm in between.
pub const HIDDEN_LINEAR_INIT_GAIN: f32 = BN_INIT_GAIN;

/// Extra gain for the final classifier so untrained logits are spread enough
/// for the confidence score to vary across samples.
pub const CLASSIFIER_INIT_GAIN: f32 = 8.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelIoError {
    #[error("bad container magic")]
    BadMagic,
    #[error("container truncated at offset {0}")]
    Truncated(usize),
    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("duplicate entry name {0}")]
    DuplicateName(String),
    #[error("unsupported dtype tag {0}")]
    UnknownDtype(u8),
    #[error("entry name is not UTF-8")]
    InvalidName,
    #[error("{0} trailing bytes after last entry")]
    TrailingBytes(usize),
    #[error("entry {name}: {values} values for extents {dims:?}")]
    ValueCount {
        name: String,
        dims: Vec<usize>,
        values: usize,
    },
    #[error("missing entry {0}")]
    Missing(String),
    #[error("entry {name}: extents {got:?}, layer expects {expected:?}")]
    ExtentMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Snn(#[from] SnnError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl Entry {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, values: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            dims,
            values,
        }
    }
}

pub fn save(entries: &[Entry]) -> Result<Vec<u8>, ModelIoError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_be_bytes());
    for e in entries {
        if !seen.insert(e.name.as_str()) {
            return Err(ModelIoError::DuplicateName(e.name.clone()));
        }
        if e.dims.iter().product::<usize>() != e.values.len() {
            return Err(ModelIoError::ValueCount {
                name: e.name.clone(),
                dims: e.dims.clone(),
                values: e.values.len(),
            });
        }
        out.extend_from_slice(&(e.name.len() as u32).to_be_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(e.dims.len() as u32).to_be_bytes());
        for &d in &e.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        for &v in &e.values {
            out.extend_from_slice(&v.to_be_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_be_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelIoError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(ModelIoError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelIoError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load(bytes: &[u8]) -> Result<Vec<Entry>, ModelIoError> {
    if bytes.len() < MAGIC.len() || &bytes[..8] != MAGIC {
        return Err(ModelIoError::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(ModelIoError::Truncated(bytes.len()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_be_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(ModelIoError::Crc { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    let mut seen = HashSet::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| ModelIoError::InvalidName)?
            .to_string();
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(ModelIoError::UnknownDtype(dtype));
        }
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or(ModelIoError::Truncated(r.pos))?)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_be_bytes(c.try_into().unwrap()))
            .collect();
        if !seen.insert(name.clone()) {
            return Err(ModelIoError::DuplicateName(name));
        }
        entries.push(Entry { name, dims, values });
    }
    if r.pos != body.len() {
        return Err(ModelIoError::TrailingBytes(body.len() - r.pos));
    }
    Ok(entries)
}

/// CRC stored in the last four bytes of a container.
pub fn container_crc(bytes: &[u8]) -> Option<u32> {
    let tail = bytes.get(bytes.len().checked_sub(4)?..)?;
    Some(u32::from_be_bytes(tail.try_into().ok()?))
}

pub fn layer_entry_name(layer: usize, slot: &str) -> String {
    format!("layer.{layer}.{slot}")
}

/// He-uniform draw: U(-b, b) with b = sqrt(6 / fan_in), i.e. variance 2 / fan_in.
pub(crate) fn he_uniform(rng: &mut SeededRng, n: usize, fan_in: usize, gain: f32) -> Vec<f32> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt() as f32 * gain;
    (0..n).map(|_| (rng.next_f32() * 2.0 - 1.0) * bound).collect()
}

/// Initial values for one parameter slot of `layer`, drawn from `rng`.
pub(crate) fn init_slot(
    layer: &LayerSpec,
    slot: &str,
    n: usize,
    rng: &mut SeededRng,
    weight_gain: f32,
) -> Vec<f32> {
    match slot {
        "weight" => he_uniform(rng, n, layer.fan_in(), weight_gain),
        "bias" | "beta" | "mean" => vec![0.0; n],
        "gamma" => vec![BN_INIT_GAIN; n],
        "var" => vec![1.0; n],
        _ => unreachable!("unknown slot {slot}"),
    }
}

/// Seeded He-style initialization of every network parameter.
///
/// Each layer draws from its own stream `SeededRng::derive(seed, index)`, so
/// the values of one layer don't depend on the others.
pub fn seeded_init(net: &NetworkGraph, seed: u64) -> Vec<Entry> {
    let last_linear = net
        .layers()
        .iter()
        .rposition(|l| matches!(l, LayerSpec::Linear(_)));
    let mut entries = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        let mut rng = SeededRng::derive(seed, i as u64);
        let gain = match layer {
            LayerSpec::Linear(_) if Some(i) == last_linear => CLASSIFIER_INIT_GAIN,
            LayerSpec::Linear(_) => HIDDEN_LINEAR_INIT_GAIN,
            _ => 1.0,
        };
        for (slot, dims) in layer.param_slots() {
            let n = dims.iter().product();
            let values = init_slot(layer, slot, n, &mut rng, gain);
            entries.push(Entry::new(layer_entry_name(i, slot), dims, values));
        }
    }
    entries
}

/// Copy `entries` into the graph's layers. Entries not naming a layer slot
/// (codec tensors, for instance) are ignored.
pub fn apply_entries(net: &mut NetworkGraph, entries: &[Entry]) -> Result<(), ModelIoError> {
    for (i, layer) in net.layers_mut().iter_mut().enumerate() {
        for (slot, dims) in layer.param_slots() {
            let name = layer_entry_name(i, slot);
            let e = entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| ModelIoError::Missing(name.clone()))?;
            if e.dims != dims {
                return Err(ModelIoError::ExtentMismatch {
                    name,
                    expected: dims,
                    got: e.dims.clone(),
                });
            }
            *layer.param_mut(slot).expect("slot exists") = e.values.clone();
        }
        if let LayerSpec::BatchNorm(b) = layer {
            b.validate()?;
        }
    }
    Ok(())
}

/// Export the graph's current parameters as entries.
pub fn export_entries(net: &NetworkGraph) -> Vec<Entry> {
    let mut out = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        for (slot, dims) in layer.param_slots() {
            let values = layer.param(slot).expect("slot exists").to_vec();
            out.push(Entry::new(layer_entry_name(i, slot), dims, values));
        }
    }
    out
}

/// Digest both nodes must agree on before a session starts: SHA-256 over the
/// canonical topology text, the session description (split, codec) and the
/// weight container CRC.
pub fn config_digest(topology_text: &str, session: &str, container_crc: u32) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"topology\n");
    h.update(topology_text.as_bytes());
    h.update(b"\nsession\n");
    h.update(session.as_bytes());
    h.update(b"\ncrc\n");
    h.update(container_crc.to_be_bytes());
    h.finalize().into()
}
