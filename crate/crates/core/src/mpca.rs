//! Centralized multilinear PCA.
//!
//! Every eigen-problem of the classic algorithm is solved through the
//! equivalent left SVD of a concatenated unfolding: initialization uses
//! `[X̃_1(n), …, X̃_M(n)]` and each local-optimization update uses
//! `[X̃_1(n)Φ, …, X̃_M(n)Φ]` with `Φ` the Kronecker chain of the other factors.
//! The covariance-type matrices are never formed, so this module and the
//! federated protocol share their numerical kernels.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::linalg::{self, SingularState};
use crate::tensor::{self, Matrix, ProjectionSet, Tensor};
use crate::tnsr;

/// How many components each mode keeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankTarget {
    /// Explicit `(P_1..P_N)`.
    Fixed(Vec<usize>),
    /// Smallest `P_n` keeping at least this fraction of mode-n variation.
    Variation(f64),
}

/// Convergence threshold on the scatter increase between outer iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tolerance {
    /// Multiple of the initial scatter `Ψ_0`.
    Relative(f64),
    Absolute(f64),
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance::Relative(1e-6)
    }
}

impl Tolerance {
    pub fn resolve(self, psi0: f64) -> f64 {
        match self {
            Tolerance::Relative(r) => r * psi0,
            Tolerance::Absolute(a) => a,
        }
    }
}

pub const DEFAULT_MAX_ITER: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcaConfig {
    pub ranks: RankTarget,
    #[serde(default)]
    pub eta: Tolerance,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default, skip_serializing)]
    pub exec: ExecMode,
}

fn default_max_iter() -> usize {
    DEFAULT_MAX_ITER
}

impl MpcaConfig {
    pub fn new(ranks: RankTarget) -> Self {
        MpcaConfig {
            ranks,
            eta: Tolerance::default(),
            max_iter: DEFAULT_MAX_ITER,
            exec: ExecMode::default(),
        }
    }

    pub fn with_exec(mut self, exec: ExecMode) -> Self {
        self.exec = exec;
        self
    }

    pub fn validate(&self, dims: &[usize]) -> Result<()> {
        match &self.ranks {
            RankTarget::Fixed(p) => validate_ranks(p, dims)?,
            RankTarget::Variation(q) => validate_variation(*q)?,
        }
        match self.eta {
            Tolerance::Relative(v) | Tolerance::Absolute(v) if !(v >= 0.0 && v.is_finite()) => {
                Err(Error::InvalidArgument(format!("eta must be finite and nonnegative, got {v}")))
            }
            _ => Ok(()),
        }
    }
}

pub(crate) fn validate_ranks(ranks: &[usize], dims: &[usize]) -> Result<()> {
    if ranks.len() != dims.len() {
        return Err(Error::InvalidArgument(format!(
            "{} ranks given for an order-{} tensor",
            ranks.len(),
            dims.len()
        )));
    }
    for (n, (&p, &i)) in ranks.iter().zip(dims).enumerate() {
        if p == 0 || p > i {
            return Err(Error::InvalidArgument(format!(
                "rank {p} for mode {n} must lie in 1..={i}"
            )));
        }
    }
    Ok(())
}

pub(crate) fn validate_variation(q: f64) -> Result<()> {
    if q > 0.0 && q <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("variation target must lie in (0, 1], got {q}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcaModel {
    pub mean: Tensor,
    pub projection: ProjectionSet,
    /// `Ψ_{Y_0}, Ψ_{Y_1}, …`
    pub scatter_history: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
}

/// Checks a sample set and returns the shared dims.
pub fn validate_samples(samples: &[Tensor], min_count: usize) -> Result<Vec<usize>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("no samples".into()))?;
    if samples.len() < min_count {
        return Err(Error::InvalidArgument(format!(
            "need at least {min_count} samples, got {}",
            samples.len()
        )));
    }
    let dims = first.dims().to_vec();
    for (i, s) in samples.iter().enumerate() {
        if s.dims() != dims.as_slice() {
            return Err(Error::DimMismatch(format!(
                "sample {i} has dims {:?}, expected {dims:?}",
                s.dims()
            )));
        }
        if !s.is_finite() {
            return Err(Error::NonFinite("sample tensor"));
        }
    }
    Ok(dims)
}

pub fn center(samples: &[Tensor], mean: &Tensor) -> Result<Vec<Tensor>> {
    samples.iter().map(|s| s.sub(mean)).collect()
}

/// `[X_1(n)·Φ, …, X_M(n)·Φ]`, or the plain unfoldings when `projection` is `None`.
pub fn unfolding_block(
    samples: &[Tensor],
    projection: Option<&ProjectionSet>,
    mode: usize,
    exec: ExecMode,
) -> Result<Matrix> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("no samples to unfold".into()))?;
    let parts: Vec<Matrix> = exec::map_slice(exec, samples, |x| match projection {
        Some(p) => tensor::partial_projection_unfolding(x, p, mode),
        None => tensor::mode_n_matricize(x, mode),
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let rows = match projection {
        Some(p) => p.factor(mode).nrows(),
        None => first.dims().get(mode).copied().unwrap_or(0),
    };
    let width: usize = parts.iter().map(|p| p.ncols()).sum();
    let mut block = Matrix::zeros(rows, width);
    let mut col = 0;
    for p in &parts {
        block.view_mut((0, col), p.shape()).copy_from(p);
        col += p.ncols();
    }
    Ok(block)
}

/// Smallest `P` whose leading squared singular values reach `q` of the total.
pub fn rank_for_variation(singular_values: &[f64], q: f64) -> usize {
    let energy: Vec<f64> = singular_values.iter().map(|s| s * s).collect();
    let total: f64 = energy.iter().sum();
    if total <= 0.0 {
        return 1;
    }
    // absorb summation-order rounding so q = 1 lands on the numerical rank
    let target = q * total * (1.0 - 1e-12);
    let mut acc = 0.0;
    for (i, e) in energy.iter().enumerate() {
        acc += e;
        if acc >= target {
            return i + 1;
        }
    }
    energy.len()
}

/// Per-mode ranks retaining a fraction `q` of the centered variation.
pub fn choose_ranks(samples: &[Tensor], q: f64) -> Result<Vec<usize>> {
    choose_ranks_with(samples, q, ExecMode::default())
}

pub fn choose_ranks_with(samples: &[Tensor], q: f64, exec: ExecMode) -> Result<Vec<usize>> {
    validate_variation(q)?;
    let dims = validate_samples(samples, 2)?;
    let mean = tensor::mean_tensor(samples)?;
    let centered = center(samples, &mean)?;
    (0..dims.len())
        .map(|n| {
            let state = linalg::left_svd(&unfolding_block(&centered, None, n, exec)?)?;
            Ok(rank_for_variation(state.singular_values(), q))
        })
        .collect()
}

/// Resolves a mode's rank from its fresh singular values.
pub(crate) fn resolve_rank(target: &RankTarget, mode: usize, state: &SingularState) -> usize {
    match target {
        RankTarget::Fixed(p) => p[mode],
        RankTarget::Variation(q) => rank_for_variation(state.singular_values(), *q),
    }
}

/// `Σ_m ‖X̃_m ×_1 U_1ᵀ … ×_N U_Nᵀ‖²_F`, summed in sample order.
pub fn scatter(centered: &[Tensor], projection: &ProjectionSet, exec: ExecMode) -> Result<f64> {
    let norms = exec::map_slice(exec, centered, |x| {
        tensor::multi_mode_project(x, projection, true).map(|y| tensor::squared_norm(&y))
    });
    let mut total = 0.0;
    for n in norms {
        total += n?;
    }
    Ok(total)
}

pub fn mpca_fit(samples: &[Tensor], config: &MpcaConfig) -> Result<MpcaModel> {
    let dims = validate_samples(samples, 2)?;
    config.validate(&dims)?;
    let exec = config.exec;
    let order = dims.len();

    let mean = tensor::mean_tensor(samples)?;
    let centered = center(samples, &mean)?;

    let mut factors = Vec::with_capacity(order);
    for n in 0..order {
        let state = linalg::left_svd(&unfolding_block(&centered, None, n, exec)?)?;
        let p = resolve_rank(&config.ranks, n, &state);
        factors.push(linalg::truncate_left(&state, p)?);
    }
    let mut projection = ProjectionSet::new(factors)?;
    let ranks = projection.ranks();

    let psi0 = scatter(&centered, &projection, exec)?;
    let eta = config.eta.resolve(psi0);
    let mut history = vec![psi0];
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..config.max_iter {
        iterations += 1;
        for n in 0..order {
            let block = unfolding_block(&centered, Some(&projection), n, exec)?;
            let state = linalg::left_svd(&block)?;
            projection.set_factor(n, linalg::truncate_left(&state, ranks[n])?)?;
        }
        let psi = scatter(&centered, &projection, exec)?;
        let prev = *history.last().expect("history starts non-empty");
        history.push(psi);
        if psi - prev <= eta {
            converged = true;
            break;
        }
    }

    Ok(MpcaModel {
        mean,
        projection,
        scatter_history: history,
        iterations_run: iterations,
        converged,
    })
}

/// Low-dimensional features `X_m ×_1 U_1ᵀ … ×_N U_Nᵀ`; with `center` the model
/// mean is subtracted first.
pub fn project_features(samples: &[Tensor], model: &MpcaModel, center: bool) -> Result<Vec<Tensor>> {
    project_features_with(samples, model, center, ExecMode::default())
}

pub fn project_features_with(
    samples: &[Tensor],
    model: &MpcaModel,
    center: bool,
    exec: ExecMode,
) -> Result<Vec<Tensor>> {
    exec::map_slice(exec, samples, |x| {
        if center {
            tensor::multi_mode_project(&x.sub(&model.mean)?, &model.projection, true)
        } else {
            tensor::multi_mode_project(x, &model.projection, true)
        }
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    dims: Vec<usize>,
    ranks: Vec<usize>,
    iterations_run: usize,
    converged: bool,
    scatter_history: Vec<f64>,
    mean_file: String,
    factor_files: Vec<String>,
}

impl MpcaModel {
    /// Writes `manifest.json`, `mean.tnsr` and `factor_<n>.tnsr` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let factor_files: Vec<String> = (0..self.projection.order())
            .map(|n| format!("factor_{}.tnsr", n + 1))
            .collect();
        let manifest = ModelManifest {
            dims: self.mean.dims().to_vec(),
            ranks: self.projection.ranks(),
            iterations_run: self.iterations_run,
            converged: self.converged,
            scatter_history: self.scatter_history.clone(),
            mean_file: "mean.tnsr".into(),
            factor_files: factor_files.clone(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        tnsr::write_file(&dir.join(&manifest.mean_file), &self.mean)?;
        for (f, u) in factor_files.iter().zip(self.projection.factors()) {
            tnsr::write_matrix(&dir.join(f), u)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: ModelManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let mean = tnsr::read_file(&dir.join(&manifest.mean_file))?;
        let factors = manifest
            .factor_files
            .iter()
            .map(|f| tnsr::read_matrix(&dir.join(f)))
            .collect::<Result<Vec<_>>>()?;
        let projection = ProjectionSet::new(factors)?;
        if projection.input_dims() != mean.dims() || projection.ranks() != manifest.ranks {
            return Err(Error::Config(format!(
                "model in {} is inconsistent with its manifest",
                dir.display()
            )));
        }
        Ok(MpcaModel {
            mean,
            projection,
            scatter_history: manifest.scatter_history,
            iterations_run: manifest.iterations_run,
            converged: manifest.converged,
        })
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.projection.ranks()
    }

    pub fn dims(&self) -> &[usize] {
        self.mean.dims()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_samples(count: usize, dims: &[usize], seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0)).unwrap())
            .collect()
    }

    fn top_eigvecs(sym: &Matrix, p: usize) -> Matrix {
        let eig = SymmetricEigen::new(sym.clone());
        let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        Matrix::from_columns(&idx[..p].iter().map(|&i| eig.eigenvectors.column(i)).collect::<Vec<_>>())
    }

    #[test]
    fn identical_samples_are_degenerate_but_deterministic() {
        let x = random_samples(1, &[3, 2, 2], 1).pop().unwrap();
        let samples = vec![x.clone(), x.clone(), x];
        let cfg = MpcaConfig::new(RankTarget::Fixed(vec![2, 1, 1]));
        let a = mpca_fit(&samples, &cfg).unwrap();
        let b = mpca_fit(&samples, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.scatter_history, vec![0.0, 0.0]);
        assert!(a.converged);
        assert_eq!(a.iterations_run, 1);
        assert!(a.projection.orthonormality_error() < 1e-12);
    }

    #[test]
    fn vectors_reduce_to_classic_pca() {
        let samples = random_samples(40, &[6], 2);
        let model = mpca_fit(&samples, &MpcaConfig::new(RankTarget::Fixed(vec![3]))).unwrap();
        let mean = tensor::mean_tensor(&samples).unwrap();
        let mut cov = Matrix::zeros(6, 6);
        for s in &samples {
            let c = nalgebra::DVector::from_column_slice(s.sub(&mean).unwrap().data());
            cov += &c * c.transpose();
        }
        let expected = top_eigvecs(&cov, 3);
        let got = model.projection.factor(0);
        assert!(linalg::max_abs_diff_up_to_sign(got, &expected) < 1e-9);
    }

    #[test]
    fn random_tensors_monotone_and_orthonormal() {
        let samples = random_samples(60, &[8, 8, 5], 3);
        let model = mpca_fit(&samples, &MpcaConfig::new(RankTarget::Fixed(vec![3, 3, 2]))).unwrap();
        let psi0 = model.scatter_history[0];
        for w in model.scatter_history.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * psi0, "{:?}", model.scatter_history);
        }
        assert!(model.projection.orthonormality_error() < 1e-10);
        assert_eq!(model.ranks(), vec![3, 3, 2]);
        let total: f64 = samples
            .iter()
            .map(|s| tensor::squared_norm(&s.sub(&model.mean).unwrap()))
            .sum();
        assert!(*model.scatter_history.last().unwrap() <= total);
    }

    #[test]
    fn full_rank_keeps_all_energy() {
        let samples = random_samples(10, &[3, 4, 2], 4);
        let model = mpca_fit(&samples, &MpcaConfig::new(RankTarget::Fixed(vec![3, 4, 2]))).unwrap();
        let total: f64 = samples
            .iter()
            .map(|s| tensor::squared_norm(&s.sub(&model.mean).unwrap()))
            .sum();
        for psi in &model.scatter_history {
            assert!((psi - total).abs() <= 1e-10 * total);
        }
    }

    #[test]
    fn rank_selection_arithmetic() {
        // eigenvalue shares 0.9, 0.08, 0.02
        let s = [0.9f64.sqrt(), 0.08f64.sqrt(), 0.02f64.sqrt()];
        assert_eq!(rank_for_variation(&s, 0.97), 2);
        assert_eq!(rank_for_variation(&s, 0.9), 1);
        assert_eq!(rank_for_variation(&s, 1.0), 3);
        assert_eq!(rank_for_variation(&[2.0, 1e-20, 0.0], 1.0), 1);
    }

    #[test]
    fn full_variation_gives_unfolding_rank() {
        // rank-2 structure in mode 0, full elsewhere
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = Matrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0));
        let samples: Vec<Tensor> = (0..12)
            .map(|_| {
                let core = Tensor::from_fn(&[2, 3], |_| rng.random_range(-1.0..1.0)).unwrap();
                tensor::mode_n_product(&core, &u, 0).unwrap()
            })
            .collect();
        let ranks = choose_ranks(&samples, 1.0).unwrap();
        assert_eq!(ranks, vec![2, 3]);
        assert!(choose_ranks(&samples, 0.0).is_err());
        assert!(choose_ranks(&samples, 1.5).is_err());
    }

    #[test]
    fn features_of_identity_model_and_zero_tensor() {
        let samples = random_samples(5, &[2, 3], 6);
        let model = MpcaModel {
            mean: tensor::mean_tensor(&samples).unwrap(),
            projection: ProjectionSet::identity(&[2, 3]),
            scatter_history: vec![],
            iterations_run: 0,
            converged: true,
        };
        assert_eq!(project_features(&samples, &model, false).unwrap(), samples);
        let zero = Tensor::zeros(&[2, 3]).unwrap();
        let f = project_features(&[zero.clone()], &model, false).unwrap();
        assert_eq!(f[0], zero);
    }

    #[test]
    fn centered_features_have_zero_mean() {
        let samples = random_samples(20, &[4, 3, 2], 7);
        let model = mpca_fit(&samples, &MpcaConfig::new(RankTarget::Fixed(vec![2, 2, 1]))).unwrap();
        let feats = project_features(&samples, &model, true).unwrap();
        let m = tensor::mean_tensor(&feats).unwrap();
        assert!(m.data().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn svd_route_matches_eigendecomposition() {
        let samples = random_samples(15, &[4, 3, 3], 8);
        let mean = tensor::mean_tensor(&samples).unwrap();
        let centered = center(&samples, &mean).unwrap();
        let model = mpca_fit(&samples, &MpcaConfig::new(RankTarget::Fixed(vec![2, 2, 2]))).unwrap();
        for n in 0..3 {
            let mut phi_star = Matrix::zeros(samples[0].dims()[n], samples[0].dims()[n]);
            for x in &centered {
                let xn = tensor::mode_n_matricize(x, n).unwrap();
                phi_star += &xn * xn.transpose();
            }
            let eig = top_eigvecs(&phi_star, 2);
            let svd = linalg::truncate_left(
                &linalg::left_svd(&unfolding_block(&centered, None, n, ExecMode::Sequential).unwrap())
                    .unwrap(),
                2,
            )
            .unwrap();
            assert!((linalg::projector(&eig) - linalg::projector(&svd)).norm() < 1e-9);

            let kron = tensor::phi_kron(&model.projection, n).unwrap();
            let mut phi = Matrix::zeros(phi_star.nrows(), phi_star.ncols());
            for x in &centered {
                let xn = tensor::mode_n_matricize(x, n).unwrap();
                let t = &xn * &kron;
                phi += &t * t.transpose();
            }
            let eig = top_eigvecs(&phi, 2);
            let block = unfolding_block(&centered, Some(&model.projection), n, ExecMode::Sequential).unwrap();
            let svd = linalg::truncate_left(&linalg::left_svd(&block).unwrap(), 2).unwrap();
            assert!((linalg::projector(&eig) - linalg::projector(&svd)).norm() < 1e-9);
        }
    }

    #[test]
    fn input_errors() {
        let cfg = MpcaConfig::new(RankTarget::Fixed(vec![1, 1]));
        assert!(mpca_fit(&[], &cfg).is_err());
        let a = random_samples(2, &[2, 2], 9);
        let b = random_samples(1, &[2, 3], 9);
        assert!(mpca_fit(&[a[0].clone(), b[0].clone()], &cfg).is_err());
        let mut bad = a.clone();
        bad[1].data_mut()[0] = f64::INFINITY;
        assert!(matches!(mpca_fit(&bad, &cfg), Err(Error::NonFinite(_))));
        assert!(mpca_fit(&a, &MpcaConfig::new(RankTarget::Fixed(vec![3, 1]))).is_err());
    }

    #[test]
    fn exec_modes_agree_bitwise() {
        let samples = random_samples(12, &[5, 4, 3], 10);
        let base = MpcaConfig::new(RankTarget::Variation(0.9));
        let a = mpca_fit(&samples, &base.clone().with_exec(ExecMode::Sequential)).unwrap();
        let b = mpca_fit(&samples, &base.with_exec(ExecMode::Parallel)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn save_load_round_trip() {
        let samples = random_samples(8, &[3, 3, 2], 11);
        let model = mpca_fit(&samples, &MpcaConfig::new(RankTarget::Fixed(vec![2, 2, 1]))).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        assert_eq!(MpcaModel::load(dir.path()).unwrap(), model);
    }
}
