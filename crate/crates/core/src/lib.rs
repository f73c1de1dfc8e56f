//! Split edge/cloud inference for spiking neural networks.
//!
//! The network runs its first layers on an edge node and the rest on a cloud
//! node. Spike features cross the link once per timestep, optionally squeezed
//! through a spike-domain bottleneck, and the edge stops early once the
//! returned logits are confident enough.

pub mod codec;
pub mod exit;
pub mod harness;
pub mod model_io;
pub mod par;
pub mod rng;
pub mod snn;
pub mod tensor;
pub mod metrics;
pub mod netsim;
pub mod protocol;
