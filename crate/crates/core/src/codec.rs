//! Spike bottleneck at the split point.
//!
//! Edge side: `Z = LIF(BN(Conv(X)))`, shrinking (C,H,W) to a much smaller
//! (C',H',W') spike code. Cloud side: `X' = LIF(BN(ConvTranspose(Z)))`,
//! restoring the original shape. Both LIF layers keep their own membrane
//! state across the timesteps of one sample. Reconstruction is lossy.

use thiserror::Error;

use crate::model_io::{self, Entry, ModelIoError};
use crate::par::Execution;
use crate::rng::SeededRng;
use crate::snn::{
    layer_forward, lif_step, Activation, BatchNorm, Conv2d, ConvTranspose2d, LayerSpec, LifParams,
    LifState, SnnError,
};
use crate::tensor::{Shape, SpikeTensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("invalid bottleneck config: {0}")]
    Config(String),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: Shape, actual: Shape },
    #[error("compression ratio undefined for a zero-bit code")]
    ZeroCode,
    #[error(transparent)]
    Snn(#[from] SnnError),
    #[error(transparent)]
    Weights(#[from] ModelIoError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckConfig {
    pub in_shape: Shape,
    pub code_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub lif: LifParams,
}

impl BottleneckConfig {
    /// Kernel = stride = 4 (or the full extent when smaller) and 4 code channels.
    pub fn default_for(in_shape: &Shape) -> Result<Self, CodecError> {
        let (_, h, w) = chw(in_shape)?;
        let k = 4.min(h).min(w);
        Self::new(in_shape.clone(), 4, k, k, 0).map_err(|e| {
            CodecError::Config(format!("no default bottleneck for {in_shape}: {e}"))
        })
    }

    pub fn new(
        in_shape: Shape,
        code_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self, CodecError> {
        let cfg = Self {
            in_shape,
            code_channels,
            kernel,
            stride,
            padding,
            lif: LifParams::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn encoder(&self) -> Conv2d {
        let (c, _, _) = self.in_shape.chw().unwrap();
        Conv2d::new(c, self.code_channels, self.kernel, self.stride, self.padding, false)
    }

    fn decoder(&self) -> ConvTranspose2d {
        let (c, _, _) = self.in_shape.chw().unwrap();
        ConvTranspose2d::new(self.code_channels, c, self.kernel, self.stride, self.padding, false)
    }

    pub fn code_shape(&self) -> Result<Shape, CodecError> {
        Ok(LayerSpec::Conv2d(self.encoder()).output_shape(&self.in_shape)?)
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        chw(&self.in_shape)?;
        if self.code_channels == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(CodecError::Config("channels, kernel and stride must be positive".into()));
        }
        self.lif.validate()?;
        let code = self.code_shape()?;
        if code.numel() >= self.in_shape.numel() {
            return Err(CodecError::Config(format!(
                "code {code} is not smaller than input {}",
                self.in_shape
            )));
        }
        let back = LayerSpec::ConvTranspose2d(self.decoder()).output_shape(&code)?;
        if back != self.in_shape {
            return Err(CodecError::Config(format!(
                "decoder maps {code} to {back}, not {}",
                self.in_shape
            )));
        }
        Ok(())
    }

    /// Stable one-line description, part of the session digest.
    pub fn describe(&self) -> String {
        format!(
            "bottleneck in={} c={} k={} s={} p={} tau={} vth={} vreset={}",
            self.in_shape,
            self.code_channels,
            self.kernel,
            self.stride,
            self.padding,
            self.lif.tau,
            self.lif.v_th,
            self.lif.v_reset
        )
    }
}

fn chw(s: &Shape) -> Result<(usize, usize, usize), CodecError> {
    s.chw()
        .filter(|_| s.rank() == 3)
        .ok_or_else(|| CodecError::Config(format!("bottleneck input must be (C,H,W), got {s}")))
}

/// Encoder/decoder weights plus batch-norm statistics.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    cfg: BottleneckConfig,
    code_shape: Shape,
    enc: LayerSpec,
    enc_bn: LayerSpec,
    dec: LayerSpec,
    dec_bn: LayerSpec,
    exec: Execution,
}

/// Per-sample membrane state of the two codec LIF layers.
#[derive(Clone, Debug, PartialEq)]
pub struct CodecState {
    pub encoder: LifState,
    pub decoder: LifState,
}

impl CodecState {
    pub fn reset(&mut self) {
        self.encoder.reset();
        self.decoder.reset();
    }
}

const SLOTS: [&str; 4] = ["enc", "enc_bn", "dec", "dec_bn"];

impl Bottleneck {
    /// Codec with zero conv weights and identity normalization.
    pub fn zeroed(cfg: BottleneckConfig) -> Result<Self, CodecError> {
        cfg.validate()?;
        let (c, _, _) = cfg.in_shape.chw().unwrap();
        Ok(Self {
            code_shape: cfg.code_shape()?,
            enc: LayerSpec::Conv2d(cfg.encoder()),
            enc_bn: LayerSpec::BatchNorm(BatchNorm::identity(cfg.code_channels)),
            dec: LayerSpec::ConvTranspose2d(cfg.decoder()),
            dec_bn: LayerSpec::BatchNorm(BatchNorm::identity(c)),
            cfg,
            exec: Execution::default(),
        })
    }

    /// He-style seeded weights, drawn from streams separate from the network's.
    pub fn seeded(cfg: BottleneckConfig, seed: u64) -> Result<Self, CodecError> {
        let mut b = Self::zeroed(cfg)?;
        let entries = b.seeded_entries(seed);
        b.apply_entries(&entries)?;
        Ok(b)
    }

    fn parts(&self) -> [&LayerSpec; 4] {
        [&self.enc, &self.enc_bn, &self.dec, &self.dec_bn]
    }

    fn parts_mut(&mut self) -> [&mut LayerSpec; 4] {
        [&mut self.enc, &mut self.enc_bn, &mut self.dec, &mut self.dec_bn]
    }

    pub fn seeded_entries(&self, seed: u64) -> Vec<Entry> {
        let mut out = Vec::new();
        for (k, (part, name)) in self.parts().into_iter().zip(SLOTS).enumerate() {
            let mut rng = SeededRng::derive_path(seed, &[0xB077_1E, k as u64]);
            for (slot, dims) in part.param_slots() {
                let n = dims.iter().product();
                let values = model_io::init_slot(part, slot, n, &mut rng, 1.0);
                out.push(Entry::new(format!("bottleneck.{name}.{slot}"), dims, values));
            }
        }
        out
    }

    pub fn entries(&self) -> Vec<Entry> {
        let mut out = Vec::new();
        for (part, name) in self.parts().into_iter().zip(SLOTS) {
            for (slot, dims) in part.param_slots() {
                let values = part.param(slot).unwrap().to_vec();
                out.push(Entry::new(format!("bottleneck.{name}.{slot}"), dims, values));
            }
        }
        out
    }

    /// Load the reserved `bottleneck.*` tensors.
    pub fn apply_entries(&mut self, entries: &[Entry]) -> Result<(), CodecError> {
        for (part, name) in self.parts_mut().into_iter().zip(SLOTS) {
            for (slot, dims) in part.param_slots() {
                let full = format!("bottleneck.{name}.{slot}");
                let e = entries
                    .iter()
                    .find(|e| e.name == full)
                    .ok_or_else(|| ModelIoError::Missing(full.clone()))?;
                if e.dims != dims {
                    return Err(ModelIoError::ExtentMismatch {
                        name: full,
                        expected: dims,
                        got: e.dims.clone(),
                    }
                    .into());
                }
                *part.param_mut(slot).unwrap() = e.values.clone();
            }
            if let LayerSpec::BatchNorm(b) = part {
                b.validate()?;
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &BottleneckConfig {
        &self.cfg
    }

    pub fn code_shape(&self) -> &Shape {
        &self.code_shape
    }

    pub fn set_execution(&mut self, exec: Execution) {
        self.exec = exec;
    }

    pub fn new_state(&self) -> CodecState {
        CodecState {
            encoder: LifState::new(self.code_shape.clone(), self.cfg.lif),
            decoder: LifState::new(self.cfg.in_shape.clone(), self.cfg.lif),
        }
    }

    pub fn encoder_flops(&self) -> u64 {
        self.encoder_layer_flops().iter().sum()
    }

    pub fn decoder_flops(&self) -> u64 {
        self.dec.flops(&self.code_shape) + self.dec_bn.flops(&self.cfg.in_shape)
    }

    /// FLOPs of the two encoder arithmetic stages (conv, BN), in order.
    pub fn encoder_layer_flops(&self) -> [u64; 2] {
        [
            self.enc.flops(&self.cfg.in_shape),
            self.enc_bn.flops(&self.code_shape),
        ]
    }

    pub fn encode(&self, state: &mut CodecState, x: &SpikeTensor) -> Result<SpikeTensor, CodecError> {
        Ok(self.encode_observed(state, x)?.0)
    }

    /// Encode and also return the input activity of the conv and BN stages.
    pub fn encode_observed(
        &self,
        state: &mut CodecState,
        x: &SpikeTensor,
    ) -> Result<(SpikeTensor, [f64; 2]), CodecError> {
        if x.shape() != &self.cfg.in_shape {
            return Err(CodecError::ShapeMismatch {
                expected: self.cfg.in_shape.clone(),
                actual: x.shape().clone(),
            });
        }
        let input = Activation::Spike(x.clone());
        let a = layer_forward(&self.enc, &input, self.exec)?;
        let activity = [input.activity(), a.activity()];
        let a = layer_forward(&self.enc_bn, &a, self.exec)?;
        Ok((lif_step(&mut state.encoder, &a.into_dense())?, activity))
    }

    pub fn decode(&self, state: &mut CodecState, z: &SpikeTensor) -> Result<SpikeTensor, CodecError> {
        if z.shape() != &self.code_shape {
            return Err(CodecError::ShapeMismatch {
                expected: self.code_shape.clone(),
                actual: z.shape().clone(),
            });
        }
        let a = layer_forward(&self.dec, &Activation::Spike(z.clone()), self.exec)?;
        let a = layer_forward(&self.dec_bn, &a, self.exec)?;
        Ok(lif_step(&mut state.decoder, &a.into_dense())?)
    }

    /// Pre-activation of the decoder for a code, for sanity checks.
    pub fn decoder_preactivation(&self, z: &SpikeTensor) -> Result<Vec<f32>, CodecError> {
        let a = layer_forward(&self.dec, &Activation::Spike(z.clone()), self.exec)?;
        Ok(layer_forward(&self.dec_bn, &a, self.exec)?.into_dense().into_data())
    }
}

/// Logical bits for `timesteps_sent` spike tensors of `shape`, before byte padding.
pub fn payload_bits(shape: &Shape, timesteps_sent: usize) -> u64 {
    shape.numel() as u64 * timesteps_sent as u64
}

pub fn compression_ratio(raw_bits: u64, coded_bits: u64) -> Result<f64, CodecError> {
    if coded_bits == 0 {
        return Err(CodecError::ZeroCode);
    }
    Ok(raw_bits as f64 / coded_bits as f64)
}
