//! The coordinating server. It only ever holds aggregates and broadcast factors.

use crate::error::{Error, Result};
use crate::tensor::{Matrix, ProjectionSet, Tensor};

#[derive(Debug, Clone, Default)]
pub struct Server {
    pub(crate) counts: Vec<(u32, usize)>,
    pub(crate) global_mean: Option<Tensor>,
    pub(crate) factors: Vec<Option<Matrix>>,
    pub(crate) scatter_history: Vec<f64>,
}

impl Server {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sample counts reported with the masked means.
    pub fn counts(&self) -> &[(u32, usize)] {
        &self.counts
    }

    pub fn total_count(&self) -> usize {
        self.counts.iter().map(|c| c.1).sum()
    }

    pub fn global_mean(&self) -> Option<&Tensor> {
        self.global_mean.as_ref()
    }

    pub fn scatter_history(&self) -> &[f64] {
        &self.scatter_history
    }

    pub fn factor(&self, mode: usize) -> Option<&Matrix> {
        self.factors.get(mode).and_then(Option::as_ref)
    }

    pub fn projection(&self) -> Result<ProjectionSet> {
        let factors = self
            .factors
            .iter()
            .enumerate()
            .map(|(n, f)| f.clone().ok_or_else(|| Error::Protocol(format!("server has no factor for mode {n}"))))
            .collect::<Result<Vec<_>>>()?;
        ProjectionSet::new(factors)
    }

    pub(crate) fn set_factor(&mut self, mode: usize, factor: Matrix) {
        if self.factors.len() <= mode {
            self.factors.resize(mode + 1, None);
        }
        self.factors[mode] = Some(factor);
    }
}
