//! Forward-only spiking network engine.

pub mod encoding;
pub mod graph;
pub mod layer;
pub mod lif;
pub mod topology;

use thiserror::Error;

use crate::tensor::{Shape, TensorError};

pub use encoding::{event_bin, rate_encode, rate_encode_image, Event, EventStream, FrameSource, SampleInput, StaticImage};
pub use graph::{reset_state, NetState, NetworkGraph};
pub use layer::{layer_forward, Activation, BatchNorm, Conv2d, ConvTranspose2d, LayerSpec, Linear};
pub use lif::{lif_step, LifParams, LifState};
pub use topology::{builtin, builtin_text, parse_topology, to_text, BUILTIN_TOPOLOGIES};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SnnError {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: Shape, actual: Shape },
    #[error("non-finite value at element {0}")]
    NonFinite(usize),
    #[error("no neuron state for layer {0}")]
    MissingState(usize),
    #[error("invalid layer range {start}..{end} for {layers} layers")]
    InvalidRange {
        start: usize,
        end: usize,
        layers: usize,
    },
    #[error("unknown split point {0}")]
    UnknownSplit(String),
    #[error("invalid neuron parameters: {0}")]
    InvalidParams(String),
    #[error("topology: {0}")]
    Topology(String),
    #[error("weights: {0}")]
    Weights(String),
    #[error("input: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
