//! Federated MPCA over a simulated multi-party protocol.
//!
//! Users hold raw tensors; a server coordinates. Local means are hidden with
//! pairwise masks, factors are built by passing an incremental SVD state
//! along a chain of users, and only aggregates and factors reach the server.

pub mod audit;
pub mod config;
pub mod masking;
pub mod participant;
pub mod payload;
pub mod protocol;
pub mod server;
pub mod transport;

pub use audit::{audit, AuditReport, Leak};
pub use config::{FedRunConfig, GeneratorSpec, UserSource, UserSpec};
pub use masking::MaskDistribution;
pub use participant::Participant;
pub use protocol::{
    check_federation, fed_centralize, fed_choose_ranks, fed_initialize, fed_local_opt_round, fed_mpca, fed_scatter_round,
    resolve_chain, secure_sum, ChainOutcome, FedConfig, FedOutcome,
};
pub use server::Server;
pub use transport::{Actor, InMemoryBus, LogRecord, PayloadKind, RoundMessage, RoundTag, Transport};

use crate::error::Result;
use crate::exec::ExecMode;
use crate::tensor::Tensor;

/// Users, server and bus bundled for a simulated run.
#[derive(Debug)]
pub struct Federation {
    pub users: Vec<Participant>,
    pub server: Server,
    pub bus: InMemoryBus,
}

impl Federation {
    pub fn new(users: Vec<(u32, Vec<Tensor>)>) -> Result<Self> {
        let users = users
            .into_iter()
            .map(|(id, samples)| Participant::new(id, samples))
            .collect::<Result<Vec<_>>>()?;
        check_federation(&users)?;
        Ok(Federation {
            users,
            server: Server::new(),
            bus: InMemoryBus::new(),
        })
    }

    pub fn with_exec(mut self, exec: ExecMode) -> Self {
        for u in &mut self.users {
            u.exec = exec;
        }
        self
    }

    pub fn run_mpca(&mut self, config: &FedConfig) -> Result<FedOutcome> {
        fed_mpca(&mut self.users, &mut self.server, &mut self.bus, config)
    }

    pub fn audit(&self, allowed: &[PayloadKind]) -> Result<AuditReport> {
        audit(self.bus.log(), &self.users, allowed)
    }
}
