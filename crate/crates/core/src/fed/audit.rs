//! Post-hoc privacy audit of a message log.
//!
//! A run is clean when every message has an allowed kind and no tensor inside
//! any payload is byte-identical to a user's raw sample, centered sample,
//! unmasked local mean or local concatenated unfolding.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::mpca;
use crate::tensor::{self, Tensor};
use crate::tnsr;

use super::participant::Participant;
use super::transport::{digest, LogRecord, PayloadKind};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Leak {
    pub seq: u64,
    pub owner: u32,
    pub what: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub messages: usize,
    pub disallowed: Vec<(u64, PayloadKind)>,
    pub leaks: Vec<Leak>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.disallowed.is_empty() && self.leaks.is_empty()
    }
}

fn sensitive_digests(users: &[Participant]) -> Result<BTreeMap<String, (u32, String)>> {
    let mut out = BTreeMap::new();
    let mut add = |t: &Tensor, owner: u32, what: String| {
        out.entry(digest(&tnsr::encode(t))).or_insert((owner, what));
    };
    for u in users {
        let id = u.id();
        let mean = u.local_mean();
        add(&mean, id, "local mean".into());
        let centered = match u.global_mean() {
            Some(g) => Some(mpca::center(u.samples(), g)?),
            None => None,
        };
        for (m, x) in u.samples().iter().enumerate() {
            add(x, id, format!("sample {m}"));
            if let Some(c) = &centered {
                add(&c[m], id, format!("centered sample {m}"));
            }
        }
        for n in 0..u.dims().len() {
            let raw = mpca::unfolding_block(u.samples(), None, n, u.exec)?;
            add(&Tensor::from_matrix(&raw), id, format!("mode-{n} unfolding"));
            if let Some(c) = &centered {
                let block = mpca::unfolding_block(c, None, n, u.exec)?;
                add(&Tensor::from_matrix(&block), id, format!("centered mode-{n} unfolding"));
            }
            for x in u.samples() {
                let single = tensor::mode_n_matricize(x, n)?;
                add(&Tensor::from_matrix(&single), id, format!("mode-{n} sample unfolding"));
            }
        }
    }
    Ok(out)
}

/// Checks `log` against the allowed kinds and the users' private data.
pub fn audit(log: &[LogRecord], users: &[Participant], allowed: &[PayloadKind]) -> Result<AuditReport> {
    let sensitive = sensitive_digests(users)?;
    let mut report = AuditReport {
        messages: log.len(),
        ..AuditReport::default()
    };
    for rec in log {
        if !allowed.contains(&rec.kind) {
            report.disallowed.push((rec.seq, rec.kind));
        }
        for part in rec.parts.iter().chain(std::iter::once(&rec.digest)) {
            if let Some((owner, what)) = sensitive.get(part) {
                report.leaks.push(Leak {
                    seq: rec.seq,
                    owner: *owner,
                    what: what.clone(),
                });
            }
        }
    }
    Ok(report)
}
