//! The federated rounds: centralization, chained incremental SVD for
//! initialization and local optimization, and scatter aggregation.
//!
//! Every value that crosses a party boundary goes through the transport, so
//! the bus log is a complete record of what each party could have seen.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::linalg::{self, SingularState};
use crate::mpca::{self, MpcaConfig, MpcaModel, RankTarget, Tolerance};
use crate::tensor::{Matrix, ProjectionSet, Tensor};

use super::masking::{self, MaskDistribution};
use super::participant::Participant;
use super::payload;
use super::server::Server;
use super::transport::{Actor, PayloadKind, RoundMessage, RoundTag, Transport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub ranks: RankTarget,
    #[serde(default)]
    pub eta: Tolerance,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mask: MaskDistribution,
    /// Also mask the per-user scatter scalars.
    #[serde(default)]
    pub masked_scatter: bool,
    /// User ids in chain order; ascending ids when absent.
    #[serde(default)]
    pub chain_order: Option<Vec<u32>>,
    #[serde(default, skip_serializing)]
    pub exec: ExecMode,
}

fn default_max_iter() -> usize {
    mpca::DEFAULT_MAX_ITER
}

impl FedConfig {
    pub fn new(ranks: RankTarget) -> Self {
        FedConfig {
            ranks,
            eta: Tolerance::default(),
            max_iter: mpca::DEFAULT_MAX_ITER,
            seed: 0,
            mask: MaskDistribution::default(),
            masked_scatter: false,
            chain_order: None,
            exec: ExecMode::default(),
        }
    }

    pub fn from_mpca(config: &MpcaConfig, seed: u64) -> Self {
        FedConfig {
            eta: config.eta,
            max_iter: config.max_iter,
            seed,
            exec: config.exec,
            ..FedConfig::new(config.ranks.clone())
        }
    }

    pub fn mpca_config(&self) -> MpcaConfig {
        MpcaConfig {
            ranks: self.ranks.clone(),
            eta: self.eta,
            max_iter: self.max_iter,
            exec: self.exec,
        }
    }
}

/// What the last user of a chain produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutcome {
    pub factor: Matrix,
    /// Full singular spectrum of the pooled block, as seen by the last user.
    pub singular_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedOutcome {
    pub mean: Tensor,
    pub projection: ProjectionSet,
    /// Uncentered features per user, in participant order.
    pub features: Vec<(u32, Vec<Tensor>)>,
    pub scatter_history: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
    /// Per-mode singular values from initialization.
    pub init_singular_values: Vec<Vec<f64>>,
}

impl FedOutcome {
    pub fn model(&self) -> MpcaModel {
        MpcaModel {
            mean: self.mean.clone(),
            projection: self.projection.clone(),
            scatter_history: self.scatter_history.clone(),
            iterations_run: self.iterations_run,
            converged: self.converged,
        }
    }
}

/// Shared dims of a well-formed federation.
pub fn check_federation(users: &[Participant]) -> Result<Vec<usize>> {
    let first = users
        .first()
        .ok_or_else(|| Error::InvalidArgument("a federation needs at least one user".into()))?;
    let mut seen = BTreeSet::new();
    for u in users {
        if !seen.insert(u.id()) {
            return Err(Error::InvalidArgument(format!("duplicate user id {}", u.id())));
        }
        if u.dims() != first.dims() {
            return Err(Error::DimMismatch(format!(
                "user {} holds {:?} tensors, user {} holds {:?}",
                u.id(),
                u.dims(),
                first.id(),
                first.dims()
            )));
        }
    }
    Ok(first.dims().to_vec())
}

/// Participant indices in chain order.
pub fn resolve_chain(users: &[Participant], order: Option<&[u32]>) -> Result<Vec<usize>> {
    let index: BTreeMap<u32, usize> = users.iter().enumerate().map(|(i, u)| (u.id(), i)).collect();
    match order {
        None => Ok(index.values().copied().collect()),
        Some(ids) => {
            let mut out = Vec::with_capacity(ids.len());
            for id in ids {
                out.push(*index.get(id).ok_or_else(|| {
                    Error::InvalidArgument(format!("chain order names unknown user {id}"))
                })?);
            }
            let distinct: BTreeSet<_> = out.iter().collect();
            if out.len() != users.len() || distinct.len() != users.len() {
                return Err(Error::InvalidArgument(
                    "chain order must list every user exactly once".into(),
                ));
            }
            Ok(out)
        }
    }
}

fn send<T: Transport + ?Sized>(
    bus: &mut T,
    sender: Actor,
    receiver: Actor,
    round: RoundTag,
    kind: PayloadKind,
    payload: Vec<u8>,
) -> Result<()> {
    bus.send(RoundMessage {
        sender,
        receiver,
        round,
        kind,
        payload,
    })
}

fn expect<T: Transport + ?Sized>(
    bus: &mut T,
    from: Actor,
    to: Actor,
    round: RoundTag,
    kind: PayloadKind,
) -> Result<Vec<u8>> {
    let msg = bus.recv(from, to)?;
    if msg.round != round || msg.kind != kind {
        return Err(Error::Protocol(format!(
            "{to} expected {kind} for {round} from {from}, got {} for {}",
            msg.kind, msg.round
        )));
    }
    Ok(msg.payload)
}

/// Mask exchange: every user sends `S_{d,d'}` to every peer, then forms
/// `R_{d,d'}`. Returns each user's perturbations keyed by peer.
fn exchange_masks<T: Transport + ?Sized>(
    ids: &[u32],
    bus: &mut T,
    round: RoundTag,
    seed: u64,
    dist: &MaskDistribution,
    dims: &[usize],
) -> Result<Vec<BTreeMap<u32, Tensor>>> {
    let stream = round.stream_key();
    let mut sent: Vec<BTreeMap<u32, Tensor>> = Vec::with_capacity(ids.len());
    for &d in ids {
        let mut mine = BTreeMap::new();
        for &peer in ids.iter().filter(|&&p| p != d) {
            let s = masking::pair_mask(seed, stream, d, peer, dims, dist)?;
            send(bus, Actor::User(d), Actor::User(peer), round, PayloadKind::MaskTensor, payload::encode_tensor(&s))?;
            mine.insert(peer, s);
        }
        sent.push(mine);
    }
    let mut out = Vec::with_capacity(ids.len());
    for (&d, mine) in ids.iter().zip(sent) {
        let mut r = BTreeMap::new();
        for (peer, s) in mine {
            let bytes = expect(bus, Actor::User(peer), Actor::User(d), round, PayloadKind::MaskTensor)?;
            let received = payload::decode_tensor(&bytes)?;
            if received.dims() != dims {
                return Err(Error::Protocol(format!("user {d} received a mask of wrong shape")));
            }
            r.insert(peer, masking::perturbation(&s, &received)?);
        }
        out.push(r);
    }
    Ok(out)
}

fn total_perturbation(r: &BTreeMap<u32, Tensor>, dims: &[usize]) -> Result<Tensor> {
    let mut acc = Tensor::zeros(dims)?;
    for t in r.values() {
        acc.add_assign_scaled(t, 1.0)?;
    }
    Ok(acc)
}

/// Masked summation of per-user vectors; the server learns only the total.
fn masked_sum<T: Transport + ?Sized>(
    contributions: &[(u32, Vec<f64>)],
    bus: &mut T,
    round: RoundTag,
    kind: PayloadKind,
    seed: u64,
    dist: &MaskDistribution,
) -> Result<Vec<f64>> {
    let len = contributions.first().map_or(0, |c| c.1.len());
    if len == 0 || contributions.iter().any(|c| c.1.len() != len) {
        return Err(Error::InvalidArgument("masked sum needs equal-length, non-empty vectors".into()));
    }
    let ids: Vec<u32> = contributions.iter().map(|c| c.0).collect();
    let perts = exchange_masks(&ids, bus, round, seed, dist, &[len])?;
    for ((id, values), r) in contributions.iter().zip(&perts) {
        let mut masked = Tensor::new(vec![len], values.clone())?;
        masked.add_assign_scaled(&total_perturbation(r, &[len])?, 1.0)?;
        send(bus, Actor::User(*id), Actor::Server, round, kind, payload::encode_vector(masked.data()))?;
    }
    let mut total = vec![0.0; len];
    for id in &ids {
        let v = payload::decode_vector(&expect(bus, Actor::User(*id), Actor::Server, round, kind)?)?;
        if v.len() != len {
            return Err(Error::Protocol(format!("user {id} sent a statistic of wrong length")));
        }
        total.iter_mut().zip(&v).for_each(|(t, x)| *t += x);
    }
    Ok(total)
}

/// Server-side total of per-user statistic vectors under pairwise masking.
pub fn secure_sum<T: Transport + ?Sized>(
    contributions: &[(u32, Vec<f64>)],
    bus: &mut T,
    round: RoundTag,
    seed: u64,
    dist: &MaskDistribution,
) -> Result<Vec<f64>> {
    masked_sum(contributions, bus, round, PayloadKind::MaskedStatistic, seed, dist)
}

/// Computes the pooled mean without any party seeing another's local mean,
/// then has every user center its samples with it.
pub fn fed_centralize<T: Transport + ?Sized>(
    users: &mut [Participant],
    server: &mut Server,
    bus: &mut T,
    seed: u64,
    dist: &MaskDistribution,
) -> Result<Tensor> {
    let dims = check_federation(users)?;
    dist.validate()?;
    let round = RoundTag::Centralize;
    let ids: Vec<u32> = users.iter().map(Participant::id).collect();
    let perts = exchange_masks(&ids, bus, round, seed, dist, &dims)?;

    for (u, r) in users.iter_mut().zip(perts) {
        let mut masked = u.local_mean();
        masked.add_assign_scaled(&total_perturbation(&r, &dims)?, 1.0 / u.sample_count() as f64)?;
        u.perturbations = r;
        let bytes = payload::encode_masked_mean(u.sample_count(), &masked);
        send(bus, Actor::User(u.id()), Actor::Server, round, PayloadKind::MaskedMean, bytes)?;
    }

    let mut received = Vec::with_capacity(users.len());
    for &id in &ids {
        let bytes = expect(bus, Actor::User(id), Actor::Server, round, PayloadKind::MaskedMean)?;
        let (count, mean) = payload::decode_masked_mean(&bytes)?;
        if mean.dims() != dims.as_slice() || count == 0 {
            return Err(Error::Protocol(format!("user {id} sent a malformed masked mean")));
        }
        received.push((id, count, mean));
    }
    let total: usize = received.iter().map(|r| r.1).sum();
    let mut mean = Tensor::zeros(&dims)?;
    for (_, count, m) in &received {
        mean.add_assign_scaled(m, *count as f64 / total as f64)?;
    }
    server.counts = received.iter().map(|r| (r.0, r.1)).collect();
    server.global_mean = Some(mean.clone());
    server.factors = vec![None; dims.len()];
    server.scatter_history.clear();

    let bytes = payload::encode_tensor(&mean);
    for &id in &ids {
        send(bus, Actor::Server, Actor::User(id), round, PayloadKind::MaskedMean, bytes.clone())?;
    }
    for u in users.iter_mut() {
        let bytes = expect(bus, Actor::Server, Actor::User(u.id()), round, PayloadKind::MaskedMean)?;
        u.set_global_mean(payload::decode_tensor(&bytes)?)?;
        u.factors = vec![None; dims.len()];
    }
    Ok(mean)
}

enum RankRule<'a> {
    Target(&'a RankTarget),
    Keep(usize),
}

/// Passes the singular state along the chain, each user folding in its own
/// block; the last user truncates and the server broadcasts the factor.
fn run_chain<T: Transport + ?Sized>(
    users: &mut [Participant],
    server: &mut Server,
    bus: &mut T,
    round: RoundTag,
    mode: usize,
    projected: bool,
    rank: RankRule<'_>,
    chain_order: Option<&[u32]>,
) -> Result<ChainOutcome> {
    let dims = check_federation(users)?;
    if mode >= dims.len() {
        return Err(Error::ModeOutOfRange { mode, order: dims.len() });
    }
    let chain = resolve_chain(users, chain_order)?;
    let exec = users[0].exec;
    let blocks = exec::map_slice(exec, users, |u| u.local_block(mode, projected))
        .into_iter()
        .collect::<Result<Vec<Matrix>>>()?;

    let mut prev: Option<u32> = None;
    let mut last = None;
    for (pos, &i) in chain.iter().enumerate() {
        let id = users[i].id();
        let state = match prev {
            None => linalg::left_svd(&blocks[i])?,
            Some(p) => {
                let bytes = expect(bus, Actor::User(p), Actor::User(id), round, PayloadKind::SingularState)?;
                linalg::incremental_update(&payload::decode_singular_state(&bytes)?, &blocks[i])?
            }
        };
        match chain.get(pos + 1) {
            Some(&next) => {
                let bytes = payload::encode_singular_state(&state);
                send(bus, Actor::User(id), Actor::User(users[next].id()), round, PayloadKind::SingularState, bytes)?;
                prev = Some(id);
            }
            None => last = Some((id, state)),
        }
    }
    let (last_id, state): (u32, SingularState) = last.expect("chain is non-empty");
    let p = match rank {
        RankRule::Target(t) => mpca::resolve_rank(t, mode, &state),
        RankRule::Keep(p) => p,
    };
    let factor = linalg::truncate_left(&state, p)?;
    send(bus, Actor::User(last_id), Actor::Server, round, PayloadKind::TruncatedFactor, payload::encode_matrix(&factor))?;

    let factor = payload::decode_matrix(&expect(bus, Actor::User(last_id), Actor::Server, round, PayloadKind::TruncatedFactor)?)?;
    server.set_factor(mode, factor.clone());
    let bytes = payload::encode_matrix(&factor);
    for u in users.iter() {
        send(bus, Actor::Server, Actor::User(u.id()), round, PayloadKind::TruncatedFactor, bytes.clone())?;
    }
    for u in users.iter_mut() {
        let bytes = expect(bus, Actor::Server, Actor::User(u.id()), round, PayloadKind::TruncatedFactor)?;
        u.factors[mode] = Some(payload::decode_matrix(&bytes)?);
    }
    Ok(ChainOutcome {
        factor,
        singular_values: state.singular_values().to_vec(),
    })
}

/// Initial mode-`mode` factor from the centered unfoldings of all users.
pub fn fed_initialize<T: Transport + ?Sized>(
    users: &mut [Participant],
    server: &mut Server,
    bus: &mut T,
    mode: usize,
    target: &RankTarget,
    chain_order: Option<&[u32]>,
) -> Result<ChainOutcome> {
    run_chain(users, server, bus, RoundTag::Init { mode }, mode, false, RankRule::Target(target), chain_order)
}

/// One local-optimization update of mode `mode` at outer iteration `iter`,
/// keeping the rank that initialization chose.
pub fn fed_local_opt_round<T: Transport + ?Sized>(
    users: &mut [Participant],
    server: &mut Server,
    bus: &mut T,
    iter: usize,
    mode: usize,
    chain_order: Option<&[u32]>,
) -> Result<ChainOutcome> {
    let p = server
        .factor(mode)
        .map(Matrix::ncols)
        .ok_or_else(|| Error::Protocol(format!("mode {mode} has not been initialized")))?;
    run_chain(users, server, bus, RoundTag::LocalOpt { iter, mode }, mode, true, RankRule::Keep(p), chain_order)
}

/// Aggregates `Ψ` from per-user partial scatters and appends it to the
/// server's history.
pub fn fed_scatter_round<T: Transport + ?Sized>(
    users: &mut [Participant],
    server: &mut Server,
    bus: &mut T,
    iter: usize,
    masking: Option<(u64, &MaskDistribution)>,
) -> Result<f64> {
    let round = RoundTag::Scatter { iter };
    let exec = users.first().map_or(ExecMode::default(), |u| u.exec);
    let locals = exec::map_slice(exec, users, |u| u.local_scatter().map(|s| (u.id(), vec![s])))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let total = match masking {
        Some((seed, dist)) => masked_sum(&locals, bus, round, PayloadKind::ScalarScatter, seed, dist)?[0],
        None => {
            for (id, s) in &locals {
                send(bus, Actor::User(*id), Actor::Server, round, PayloadKind::ScalarScatter, payload::encode_scalar(s[0]))?;
            }
            let mut total = 0.0;
            for (id, _) in &locals {
                total += payload::decode_scalar(&expect(bus, Actor::User(*id), Actor::Server, round, PayloadKind::ScalarScatter)?)?;
            }
            total
        }
    };
    server.scatter_history.push(total);
    Ok(total)
}

/// Ranks keeping a fraction `q` of each mode's pooled variation, learned
/// through a centralization round and one initialization chain per mode.
pub fn fed_choose_ranks<T: Transport + ?Sized>(
    users: &mut [Participant],
    server: &mut Server,
    bus: &mut T,
    q: f64,
    config: &FedConfig,
) -> Result<Vec<usize>> {
    mpca::validate_variation(q)?;
    let dims = check_federation(users)?;
    for u in users.iter_mut() {
        u.exec = config.exec;
    }
    fed_centralize(users, server, bus, config.seed, &config.mask)?;
    let target = RankTarget::Variation(q);
    (0..dims.len())
        .map(|n| {
            fed_initialize(users, server, bus, n, &target, config.chain_order.as_deref())
                .map(|out| out.factor.ncols())
        })
        .collect()
}

/// Full federated MPCA: centralization, per-mode initialization, then
/// alternating local-optimization cycles until the scatter gain drops to
/// `eta` or `max_iter` cycles have run.
pub fn fed_mpca<T: Transport + ?Sized>(
    users: &mut [Participant],
    server: &mut Server,
    bus: &mut T,
    config: &FedConfig,
) -> Result<FedOutcome> {
    let dims = check_federation(users)?;
    config.mpca_config().validate(&dims)?;
    let total: usize = users.iter().map(Participant::sample_count).sum();
    if total < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples in total, got {total}")));
    }
    config.mask.validate()?;
    for u in users.iter_mut() {
        u.exec = config.exec;
    }
    let chain = config.chain_order.as_deref();
    let scatter_mask = config.masked_scatter.then_some((config.seed, &config.mask));

    let mean = fed_centralize(users, server, bus, config.seed, &config.mask)?;
    let mut init_singular_values = Vec::with_capacity(dims.len());
    for n in 0..dims.len() {
        init_singular_values.push(fed_initialize(users, server, bus, n, &config.ranks, chain)?.singular_values);
    }
    let psi0 = fed_scatter_round(users, server, bus, 0, scatter_mask)?;
    let eta = config.eta.resolve(psi0);

    let mut prev = psi0;
    let mut converged = false;
    let mut iterations = 0;
    for k in 1..=config.max_iter {
        iterations = k;
        for n in 0..dims.len() {
            fed_local_opt_round(users, server, bus, k, n, chain)?;
        }
        let psi = fed_scatter_round(users, server, bus, k, scatter_mask)?;
        if psi - prev <= eta {
            converged = true;
            break;
        }
        prev = psi;
    }

    let features = users
        .iter()
        .map(|u| u.features().map(|f| (u.id(), f)))
        .collect::<Result<Vec<_>>>()?;
    Ok(FedOutcome {
        mean,
        projection: server.projection()?,
        features,
        scatter_history: server.scatter_history.clone(),
        iterations_run: iterations,
        converged,
        init_singular_values,
    })
}
