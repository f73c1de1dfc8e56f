//! Edge/cloud wire protocol.

pub mod node;
pub mod session;
pub mod wire;

pub use node::{
    cloud_run_session, edge_run_sample, run_local, serve_connection, CloudNode, CloudSession,
    CloudSessionSummary, CloudStep, ComputeTiming, EdgeNode, EdgeOutcome, LocalOutcome, ServeStats,
    StepTiming,
};
pub use session::{Phase, Role, SessionError, SessionState};
pub use wire::{decode, decode_message, encode, encode_message, ErrorCode, Header, Message, MsgType, WireError};
