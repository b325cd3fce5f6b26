//! A data owner. Raw samples never leave this struct; only the values the
//! protocol functions explicitly encode do.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::mpca;
use crate::tensor::{self, Matrix, ProjectionSet, Tensor};

#[derive(Debug, Clone)]
pub struct Participant {
    id: u32,
    samples: Vec<Tensor>,
    dims: Vec<usize>,
    pub(crate) exec: ExecMode,
    pub(crate) global_mean: Option<Tensor>,
    pub(crate) centered: Option<Vec<Tensor>>,
    pub(crate) factors: Vec<Option<Matrix>>,
    /// `R_{id,d'}` from the latest centralization, keyed by peer.
    pub(crate) perturbations: BTreeMap<u32, Tensor>,
}

impl Participant {
    pub fn new(id: u32, samples: Vec<Tensor>) -> Result<Self> {
        let dims = mpca::validate_samples(&samples, 1)?;
        let order = dims.len();
        Ok(Participant {
            id,
            samples,
            dims,
            exec: ExecMode::default(),
            global_mean: None,
            centered: None,
            factors: vec![None; order],
            perturbations: BTreeMap::new(),
        })
    }

    pub fn with_exec(mut self, exec: ExecMode) -> Self {
        self.exec = exec;
        self
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn samples(&self) -> &[Tensor] {
        &self.samples
    }

    pub fn local_mean(&self) -> Tensor {
        tensor::mean_tensor(&self.samples).expect("validated non-empty and consistent")
    }

    pub fn global_mean(&self) -> Option<&Tensor> {
        self.global_mean.as_ref()
    }

    pub fn perturbations(&self) -> &BTreeMap<u32, Tensor> {
        &self.perturbations
    }

    /// The participant's copy of the broadcast factors, once every mode has one.
    pub fn projection(&self) -> Result<ProjectionSet> {
        let factors = self
            .factors
            .iter()
            .enumerate()
            .map(|(n, f)| {
                f.clone()
                    .ok_or_else(|| Error::Protocol(format!("user {} has no factor for mode {n}", self.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        ProjectionSet::new(factors)
    }

    pub(crate) fn centered(&self) -> Result<&[Tensor]> {
        self.centered
            .as_deref()
            .ok_or_else(|| Error::Protocol(format!("user {} has not been centralized", self.id)))
    }

    pub(crate) fn set_global_mean(&mut self, mean: Tensor) -> Result<()> {
        if mean.dims() != self.dims.as_slice() {
            return Err(Error::Protocol(format!("user {} received a mean of wrong shape", self.id)));
        }
        self.centered = Some(mpca::center(&self.samples, &mean)?);
        self.global_mean = Some(mean);
        Ok(())
    }

    /// Local block for the mode-`mode` SVD: plain centered unfoldings at
    /// initialization, partially projected ones afterwards.
    pub(crate) fn local_block(&self, mode: usize, projected: bool) -> Result<Matrix> {
        let centered = self.centered()?;
        if projected {
            let p = self.projection()?;
            mpca::unfolding_block(centered, Some(&p), mode, self.exec)
        } else {
            mpca::unfolding_block(centered, None, mode, self.exec)
        }
    }

    pub(crate) fn local_scatter(&self) -> Result<f64> {
        mpca::scatter(self.centered()?, &self.projection()?, self.exec)
    }

    /// `X_m ×_1 U_1ᵀ … ×_N U_Nᵀ` for every local sample, uncentered.
    pub fn features(&self) -> Result<Vec<Tensor>> {
        let p = self.projection()?;
        crate::exec::map_slice(self.exec, &self.samples, |x| tensor::multi_mode_project(x, &p, true))
            .into_iter()
            .collect()
    }
}
