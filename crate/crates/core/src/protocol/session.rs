//! Per-session state machines.
//!
//! A session is one inference: `HELLO (FEATURE LOGITS)* EXIT`. The edge
//! opens with HELLO carrying its configuration digest and, without waiting
//! for an acknowledgement, sends the first FEATURE. A cloud whose digest
//! differs answers with ERROR instead of LOGITS. Either side may send ERROR
//! at any point, which ends the session.

use thiserror::Error;

use crate::codec::CodecError;
use crate::exit::ExitError;
use crate::netsim::TransportError;
use crate::snn::SnnError;

use super::wire::{ErrorCode, Header, MsgType, WireError, DIGEST_LEN};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("handshake rejected: {0}")]
    Handshake(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    /// A FEATURE whose shape differs from the negotiated split.
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("peer reported {code:?}: {message}")]
    Remote { code: ErrorCode, message: String },
    #[error("compute: {0}")]
    Compute(String),
}

impl From<SnnError> for SessionError {
    fn from(e: SnnError) -> Self {
        SessionError::Compute(e.to_string())
    }
}

impl From<CodecError> for SessionError {
    fn from(e: CodecError) -> Self {
        SessionError::Compute(e.to_string())
    }
}

impl From<ExitError> for SessionError {
    fn from(e: ExitError) -> Self {
        SessionError::Compute(e.to_string())
    }
}

impl SessionError {
    /// Error code to report to the peer, if this error warrants telling it.
    pub fn wire_code(&self) -> Option<ErrorCode> {
        match self {
            SessionError::Handshake(_) => Some(ErrorCode::Handshake),
            SessionError::Protocol(_) | SessionError::Wire(_) => Some(ErrorCode::Protocol),
            SessionError::Shape(_) => Some(ErrorCode::Shape),
            SessionError::Compute(_) => Some(ErrorCode::Internal),
            SessionError::Remote { .. } | SessionError::Transport(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Edge,
    Cloud,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Nothing exchanged yet.
    Idle,
    /// Edge: free to send the next FEATURE or EXIT.
    Ready,
    AwaitLogits,
    AwaitFeature,
    /// Cloud: FEATURE received, LOGITS owed.
    Replying,
    Done,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionState {
    role: Role,
    phase: Phase,
    session_id: u32,
    /// Last timestep sent (edge) or received (cloud).
    timestep: u8,
    t_max: Option<u8>,
    digest: [u8; DIGEST_LEN],
    aborted: bool,
}

impl SessionState {
    pub fn edge(session_id: u32, t_max: usize, digest: [u8; DIGEST_LEN]) -> Result<Self, SessionError> {
        let t_max = u8::try_from(t_max)
            .ok()
            .filter(|&t| t >= 1)
            .ok_or_else(|| SessionError::Protocol(format!("t_max {t_max} outside 1..=255")))?;
        Ok(Self {
            role: Role::Edge,
            phase: Phase::Idle,
            session_id,
            timestep: 0,
            t_max: Some(t_max),
            digest,
            aborted: false,
        })
    }

    /// The session id is taken from the opening HELLO.
    pub fn cloud(digest: [u8; DIGEST_LEN]) -> Self {
        Self {
            role: Role::Cloud,
            phase: Phase::Idle,
            session_id: 0,
            timestep: 0,
            t_max: None,
            digest,
            aborted: false,
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn session_id(&self) -> u32 {
        self.session_id
    }

    pub fn timestep(&self) -> u8 {
        self.timestep
    }

    pub fn digest(&self) -> &[u8; DIGEST_LEN] {
        &self.digest
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    pub fn aborted(&self) -> bool {
        self.aborted
    }

    fn violation(&self, what: &str, h: &Header) -> SessionError {
        SessionError::Protocol(format!(
            "{:?} {what} {:?} (t={}) in phase {:?} at t={}",
            self.role, h.msg_type, h.timestep, self.phase, self.timestep
        ))
    }

    fn check_id(&self, h: &Header) -> Result<(), SessionError> {
        if self.phase != Phase::Idle && h.session_id != self.session_id {
            return Err(SessionError::Protocol(format!(
                "message for session {} on session {}",
                h.session_id, self.session_id
            )));
        }
        Ok(())
    }

    /// Validate and record an outgoing message.
    pub fn on_send(&mut self, h: &Header) -> Result<(), SessionError> {
        self.check_id(h)?;
        if self.phase == Phase::Done {
            return Err(self.violation("sending", h));
        }
        if h.msg_type == MsgType::Error {
            self.phase = Phase::Done;
            self.aborted = true;
            return Ok(());
        }
        let next = match (self.role, self.phase, h.msg_type) {
            (Role::Edge, Phase::Idle, MsgType::Hello) if h.session_id == self.session_id => Phase::Ready,
            (Role::Edge, Phase::Ready, MsgType::Feature)
                if h.timestep == self.timestep + 1 && Some(h.timestep) <= self.t_max =>
            {
                self.timestep = h.timestep;
                Phase::AwaitLogits
            }
            (Role::Edge, Phase::Ready, MsgType::Exit) if self.timestep >= 1 && h.timestep == self.timestep => {
                Phase::Done
            }
            (Role::Cloud, Phase::Replying, MsgType::Logits) if h.timestep == self.timestep => Phase::AwaitFeature,
            _ => return Err(self.violation("sending", h)),
        };
        self.phase = next;
        Ok(())
    }

    /// Validate and record an incoming message. `digest` is the HELLO payload,
    /// if this is a HELLO.
    pub fn on_recv(&mut self, h: &Header, digest: Option<&[u8; DIGEST_LEN]>) -> Result<(), SessionError> {
        self.check_id(h)?;
        if self.phase == Phase::Done {
            return Err(self.violation("received", h));
        }
        if h.msg_type == MsgType::Error {
            self.phase = Phase::Done;
            self.aborted = true;
            return Ok(());
        }
        let next = match (self.role, self.phase, h.msg_type) {
            (Role::Cloud, Phase::Idle, MsgType::Hello) => {
                self.session_id = h.session_id;
                if digest != Some(&self.digest) {
                    self.phase = Phase::Done;
                    self.aborted = true;
                    return Err(SessionError::Handshake(format!(
                        "configuration digest mismatch for session {}",
                        h.session_id
                    )));
                }
                Phase::AwaitFeature
            }
            (Role::Cloud, Phase::AwaitFeature, MsgType::Feature) if h.timestep == self.timestep.wrapping_add(1) => {
                self.timestep = h.timestep;
                Phase::Replying
            }
            (Role::Cloud, Phase::AwaitFeature, MsgType::Exit) if self.timestep >= 1 && h.timestep == self.timestep => {
                Phase::Done
            }
            (Role::Edge, Phase::AwaitLogits, MsgType::Logits) if h.timestep == self.timestep => Phase::Ready,
            _ => {
                self.phase = Phase::Done;
                self.aborted = true;
                return Err(self.violation("received", h));
            }
        };
        self.phase = next;
        Ok(())
    }
}
