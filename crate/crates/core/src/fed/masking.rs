//! Pairwise additive masks.
//!
//! User `d` draws `S_{d,d'}` for every peer and keeps
//! `R_{d,d'} = S_{d,d'} − S_{d',d}`. Since `R_{d',d} = −R_{d,d'}` bit for bit,
//! the perturbations cancel in any aggregate taken pair by pair.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::keyed_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskDistribution {
    Uniform { low: f64, high: f64 },
    Normal { sd: f64 },
}

impl Default for MaskDistribution {
    fn default() -> Self {
        MaskDistribution::Uniform { low: 0.0, high: 1.0 }
    }
}

impl MaskDistribution {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            MaskDistribution::Uniform { low, high } => low.is_finite() && high.is_finite() && low < high,
            MaskDistribution::Normal { sd } => sd.is_finite() && sd > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("bad mask distribution {self:?}")))
        }
    }

    fn fill(&self, rng: &mut ChaCha20Rng, out: &mut [f64]) -> Result<()> {
        match *self {
            MaskDistribution::Uniform { low, high } => {
                let dist = Uniform::new(low, high)
                    .map_err(|e| Error::InvalidArgument(format!("mask distribution: {e}")))?;
                out.iter_mut().for_each(|v| *v = dist.sample(rng));
            }
            MaskDistribution::Normal { sd } => {
                let dist = Normal::new(0.0, sd)
                    .map_err(|e| Error::InvalidArgument(format!("mask distribution: {e}")))?;
                out.iter_mut().for_each(|v| *v = dist.sample(rng));
            }
        }
        Ok(())
    }
}

/// `S_{from,to}` for one round; the stream depends on the unordered pair and
/// the direction, so both ends could regenerate it but nobody else can
/// without the seed.
pub fn pair_mask(
    seed: u64,
    stream: u64,
    from: u32,
    to: u32,
    dims: &[usize],
    dist: &MaskDistribution,
) -> Result<Tensor> {
    let (lo, hi) = (from.min(to), from.max(to));
    let direction = u64::from(from > to);
    let mut rng = keyed_rng(&[seed, stream, u64::from(lo), u64::from(hi), direction]);
    // burn one draw so streams differing only in length stay unrelated
    let _: u64 = rng.random();
    let mut t = Tensor::zeros(dims)?;
    dist.fill(&mut rng, t.data_mut())?;
    Ok(t)
}

/// `R_{d,d'} = S_{d,d'} − S_{d',d}`.
pub fn perturbation(sent: &Tensor, received: &Tensor) -> Result<Tensor> {
    sent.sub(received)
}

/// Whether `Σ_d Σ_{d'≠d} R_{d,d'}`, grouped by unordered pair, is exactly zero.
pub fn perturbations_cancel(perturbations: &[(u32, u32, Tensor)]) -> bool {
    perturbations.iter().all(|(d, e, r)| {
        perturbations
            .iter()
            .find(|(a, b, _)| a == e && b == d)
            .is_some_and(|(_, _, back)| {
                r.data().iter().zip(back.data()).all(|(x, y)| x + y == 0.0)
            })
    })
}
