//! JSON run configuration for standalone protocol runs.

use std::fs;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::mpca::{self, RankTarget, Tolerance};
use crate::rng::keyed_rng;
use crate::tensor::Tensor;
use crate::tnsr;

use super::masking::MaskDistribution;
use super::protocol::FedConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub dims: Vec<usize>,
    pub count: usize,
    pub seed: u64,
    #[serde(default)]
    pub mean: f64,
    #[serde(default = "one")]
    pub sd: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum UserSource {
    Files { sample_files: Vec<PathBuf> },
    Generator { generator: GeneratorSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSpec {
    pub id: u32,
    #[serde(flatten)]
    pub source: UserSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedRunConfig {
    pub users: Vec<UserSpec>,
    #[serde(default)]
    pub ranks: Option<Vec<usize>>,
    #[serde(default)]
    pub variation: Option<f64>,
    #[serde(default)]
    pub eta: Tolerance,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mask_distribution: MaskDistribution,
    #[serde(default)]
    pub masked_scatter: bool,
    #[serde(default)]
    pub chain_order: Option<Vec<u32>>,
}

fn default_max_iter() -> usize {
    mpca::DEFAULT_MAX_ITER
}

/// Variation target used when a config names neither ranks nor variation.
pub const DEFAULT_VARIATION: f64 = 0.97;

impl FedRunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn rank_target(&self) -> Result<RankTarget> {
        match (&self.ranks, self.variation) {
            (Some(_), Some(_)) => Err(Error::Config("give either ranks or variation, not both".into())),
            (Some(r), None) => Ok(RankTarget::Fixed(r.clone())),
            (None, Some(q)) => Ok(RankTarget::Variation(q)),
            (None, None) => Ok(RankTarget::Variation(DEFAULT_VARIATION)),
        }
    }

    pub fn fed_config(&self, exec: ExecMode) -> Result<FedConfig> {
        if self.users.is_empty() {
            return Err(Error::Config("run config lists no users".into()));
        }
        Ok(FedConfig {
            ranks: self.rank_target()?,
            eta: self.eta,
            max_iter: self.max_iter,
            seed: self.seed,
            mask: self.mask_distribution,
            masked_scatter: self.masked_scatter,
            chain_order: self.chain_order.clone(),
            exec,
        })
    }

    /// Loads or generates each user's samples; relative paths resolve
    /// against `base`.
    pub fn load_users(&self, base: &Path) -> Result<Vec<(u32, Vec<Tensor>)>> {
        self.users
            .iter()
            .map(|u| {
                let samples = match &u.source {
                    UserSource::Files { sample_files } => sample_files
                        .iter()
                        .map(|f| tnsr::read_file(&base.join(f)))
                        .collect::<Result<Vec<_>>>()?,
                    UserSource::Generator { generator } => gaussian_samples(generator)?,
                };
                Ok((u.id, samples))
            })
            .collect()
    }
}

/// I.i.d. normal tensors, reproducible from the spec's seed.
pub fn gaussian_samples(spec: &GeneratorSpec) -> Result<Vec<Tensor>> {
    if spec.count == 0 || spec.dims.is_empty() || spec.dims.contains(&0) {
        return Err(Error::Config(format!("generator needs a positive count and dims, got {spec:?}")));
    }
    let normal = Normal::new(spec.mean, spec.sd)
        .map_err(|e| Error::Config(format!("generator distribution: {e}")))?;
    let mut rng = keyed_rng(&[spec.seed, 0x0067_656e]);
    (0..spec.count)
        .map(|_| {
            let mut t = Tensor::zeros(&spec.dims)?;
            t.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            Ok(t)
        })
        .collect()
}
