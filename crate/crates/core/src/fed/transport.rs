//! Actors, audited messages and the in-memory bus the protocol runs over.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Actor {
    User(u32),
    Server,
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::User(id) => write!(f, "user:{id}"),
            Actor::Server => f.write_str("server"),
        }
    }
}

/// Which protocol round a message belongs to. Modes are 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RoundTag {
    Centralize,
    Init { mode: usize },
    LocalOpt { iter: usize, mode: usize },
    Scatter { iter: usize },
    /// Prognostic-model fitting over masked sufficient statistics.
    Regression { phase: u8 },
}

impl fmt::Display for RoundTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RoundTag::Centralize => f.write_str("centralize"),
            RoundTag::Init { mode } => write!(f, "init({mode})"),
            RoundTag::LocalOpt { iter, mode } => write!(f, "localopt({iter},{mode})"),
            RoundTag::Scatter { iter } => write!(f, "scatter({iter})"),
            RoundTag::Regression { phase } => write!(f, "regression({phase})"),
        }
    }
}

impl RoundTag {
    /// Stable numeric key used to derive per-round mask streams.
    pub fn stream_key(self) -> u64 {
        match self {
            RoundTag::Centralize => 1,
            RoundTag::Init { mode } => (2 << 56) | mode as u64,
            RoundTag::LocalOpt { iter, mode } => (3 << 56) | ((iter as u64) << 24) | mode as u64,
            RoundTag::Scatter { iter } => (4 << 56) | iter as u64,
            RoundTag::Regression { phase } => (5 << 56) | phase as u64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PayloadKind {
    MaskTensor,
    MaskedMean,
    SingularState,
    TruncatedFactor,
    ScalarScatter,
    MaskedStatistic,
    ModelParameters,
}

impl PayloadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PayloadKind::MaskTensor => "mask-tensor",
            PayloadKind::MaskedMean => "masked-mean",
            PayloadKind::SingularState => "singular-state",
            PayloadKind::TruncatedFactor => "truncated-factor",
            PayloadKind::ScalarScatter => "scalar-scatter",
            PayloadKind::MaskedStatistic => "masked-statistic",
            PayloadKind::ModelParameters => "model-parameters",
        }
    }

    /// The only kinds a federated MPCA run may carry.
    pub const MPCA: [PayloadKind; 5] = [
        PayloadKind::MaskTensor,
        PayloadKind::MaskedMean,
        PayloadKind::SingularState,
        PayloadKind::TruncatedFactor,
        PayloadKind::ScalarScatter,
    ];
}

impl fmt::Display for PayloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMessage {
    pub sender: Actor,
    pub receiver: Actor,
    pub round: RoundTag,
    pub kind: PayloadKind,
    pub payload: Vec<u8>,
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One logged message; the payload itself is not retained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LogRecord {
    pub seq: u64,
    pub round: String,
    pub sender: String,
    pub receiver: String,
    pub kind: PayloadKind,
    pub bytes: usize,
    pub digest: String,
    /// Digests of each tensor the payload carries.
    pub parts: Vec<String>,
}

/// Point-to-point delivery between actors. Messages between a fixed
/// (sender, receiver) pair arrive in send order.
pub trait Transport {
    fn send(&mut self, msg: RoundMessage) -> Result<()>;
    fn recv(&mut self, from: Actor, to: Actor) -> Result<RoundMessage>;
}

/// Synchronous, deterministic FIFO bus that logs every message it carries.
#[derive(Debug, Default)]
pub struct InMemoryBus {
    queues: BTreeMap<(Actor, Actor), VecDeque<RoundMessage>>,
    log: Vec<LogRecord>,
}

impl InMemoryBus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn pending(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }

    /// JSON-lines export: one record per message, digests instead of payloads.
    pub fn export_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for rec in &self.log {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
        fs::write(path, out)?;
        Ok(())
    }
}

impl Transport for InMemoryBus {
    fn send(&mut self, msg: RoundMessage) -> Result<()> {
        if msg.sender == msg.receiver {
            return Err(Error::Protocol(format!("{} sent a message to itself", msg.sender)));
        }
        let parts = super::payload::part_digests(msg.kind, &msg.payload)?;
        self.log.push(LogRecord {
            seq: self.log.len() as u64,
            round: msg.round.to_string(),
            sender: msg.sender.to_string(),
            receiver: msg.receiver.to_string(),
            kind: msg.kind,
            bytes: msg.payload.len(),
            digest: digest(&msg.payload),
            parts,
        });
        self.queues
            .entry((msg.sender, msg.receiver))
            .or_default()
            .push_back(msg);
        Ok(())
    }

    fn recv(&mut self, from: Actor, to: Actor) -> Result<RoundMessage> {
        self.queues
            .get_mut(&(from, to))
            .and_then(VecDeque::pop_front)
            .ok_or_else(|| Error::Protocol(format!("{to} expected a message from {from}")))
    }
}
