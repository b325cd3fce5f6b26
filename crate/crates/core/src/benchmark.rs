//! Replicated prognostics benchmark: federated MPCA against a pooled
//! ("combined") model and one model per user, scored by relative TTF error
//! on a held-out test set.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::{self, SimConfig};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::fed::{self, FedConfig, Federation, InMemoryBus, MaskDistribution, PayloadKind};
use crate::mpca::{self, MpcaConfig, RankTarget, Tolerance};
use crate::prognostics::{self, AssetRecord, Family, ProgModel, RegressionParty};
use crate::rng::keyed_rng;
use crate::tensor::{self, ProjectionSet, Tensor};

const SPLIT_STREAM: u64 = 0x5_9117;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Fmpca,
    Combined,
    /// 1-based user index within the training split.
    User(usize),
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Fmpca => f.write_str("fmpca"),
            Method::Combined => f.write_str("combined"),
            Method::User(k) => write!(f, "user_{k}"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fmpca" => Ok(Method::Fmpca),
            "combined" => Ok(Method::Combined),
            _ => s
                .strip_prefix("user_")
                .and_then(|k| k.parse().ok())
                .filter(|&k| k >= 1)
                .map(Method::User)
                .ok_or_else(|| Error::Config(format!("unknown method {s:?}"))),
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub folds: usize,
    pub candidates: Vec<f64>,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            folds: 10,
            candidates: vec![0.9, 0.95, 0.97, 0.99],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    /// Existing dataset directory; when absent, `sim` is generated.
    pub dataset: Option<PathBuf>,
    pub sim: SimConfig,
    /// Training assets per user.
    pub train_split: Vec<usize>,
    pub test_count: usize,
    pub replications: usize,
    /// Variation target for rank selection without cross-validation.
    pub variation: f64,
    pub cv: Option<CvConfig>,
    pub eta: Tolerance,
    pub max_iter: usize,
    pub family: Family,
    /// Methods to run; empty means all.
    pub methods: Vec<Method>,
    pub seed: u64,
    pub mask: MaskDistribution,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            dataset: None,
            sim: SimConfig::desk(125, 0),
            train_split: vec![50, 30, 20],
            test_count: 25,
            replications: 10,
            variation: 0.97,
            cv: None,
            eta: Tolerance::default(),
            max_iter: mpca::DEFAULT_MAX_ITER,
            family: Family::Lognormal,
            methods: Vec::new(),
            seed: 0,
            mask: MaskDistribution::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn methods(&self) -> Vec<Method> {
        if self.methods.is_empty() {
            let mut all = vec![Method::Fmpca, Method::Combined];
            all.extend((1..=self.train_split.len()).map(Method::User));
            all
        } else {
            self.methods.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.train_split.is_empty() || self.train_split.contains(&0) {
            return bad(format!("training split must list positive sizes, got {:?}", self.train_split));
        }
        if self.test_count == 0 || self.replications == 0 {
            return bad("test count and replications must be positive".into());
        }
        mpca::validate_variation(self.variation).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(cv) = &self.cv {
            if cv.folds < 2 || cv.candidates.is_empty() {
                return bad("cross-validation needs at least 2 folds and one candidate".into());
            }
            for &q in &cv.candidates {
                mpca::validate_variation(q).map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        for m in self.methods() {
            if let Method::User(k) = m {
                if k > self.train_split.len() {
                    return bad(format!("method {m} names a user beyond the split"));
                }
            }
        }
        if self.family == Family::Sev && self.methods().contains(&Method::Fmpca) {
            return bad("the federated method supports normal and lognormal families only".into());
        }
        if self.dataset.is_none() {
            self.sim.validate()?;
        }
        Ok(())
    }

    pub fn rank_selection(&self) -> String {
        match &self.cv {
            Some(cv) => format!(
                "{}-fold cross-validation over variation targets {:?}",
                cv.folds, cv.candidates
            ),
            None => format!("fixed variation target q = {} (cross-validation disabled)", self.variation),
        }
    }
}

/// Assets from `cfg.dataset` (relative to `base`) or freshly generated.
pub fn benchmark_assets(cfg: &BenchmarkConfig, base: &Path, exec: ExecMode) -> Result<Vec<AssetRecord>> {
    match &cfg.dataset {
        Some(dir) => prognostics::load_manifest(&base.join(dir)),
        None => Ok(datagen::generate_dataset(&cfg.sim, exec)?
            .assets
            .into_iter()
            .map(|a| AssetRecord {
                id: a.id.to_string(),
                tensor: a.tensor,
                ttf: a.ttf,
            })
            .collect()),
    }
}

/// Lowers the largest rank (first on ties) until `Π P_n ≤ max_product`.
pub fn cap_ranks(ranks: &[usize], max_product: usize) -> Vec<usize> {
    let mut r = ranks.to_vec();
    while r.iter().product::<usize>() > max_product.max(1) {
        let (i, _) = r
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty ranks");
        if r[i] == 1 {
            break;
        }
        r[i] -= 1;
    }
    r
}

/// Type-7 sample quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let h = (n - 1) as f64 * p;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorRow {
    pub replication: usize,
    pub method: Method,
    pub asset_id: String,
    pub true_ttf: f64,
    pub predicted_ttf: f64,
    pub error: f64,
    pub ranks: String,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let (q1, q3) = (quantile(&v, 0.25), quantile(&v, 0.75));
        Summary {
            median: quantile(&v, 0.5),
            q1,
            q3,
            iqr: q3 - q1,
            n: v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationRow {
    pub replication: usize,
    pub method: Method,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub n: usize,
    /// Largest relative gap between fmpca and combined predictions.
    pub max_rel_diff_vs_combined: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: Method,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub n: usize,
}

/// Diagnostics of one final fit (cross-validation fits are not traced).
#[derive(Debug, Clone, PartialEq)]
pub struct FitTrace {
    pub replication: usize,
    pub method: Method,
    pub scatter_history: Vec<f64>,
    /// Privacy audit of every protocol run behind a federated fit.
    pub audit_clean: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub rank_selection: String,
    pub errors: Vec<ErrorRow>,
    pub replications: Vec<ReplicationRow>,
    pub summary: Vec<SummaryRow>,
    pub traces: Vec<FitTrace>,
}

impl BenchmarkReport {
    /// Per-replication median error of `method`, in replication order.
    pub fn medians(&self, method: Method) -> Vec<f64> {
        self.replications.iter().filter(|r| r.method == method).map(|r| r.median).collect()
    }

    pub fn max_rel_diffs(&self) -> Vec<f64> {
        self.replications.iter().filter_map(|r| r.max_rel_diff_vs_combined).collect()
    }

    /// `errors.csv`, `replications.csv` and `summary.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_csv(&dir.join("errors.csv"), None, &self.errors)?;
        write_csv(&dir.join("replications.csv"), None, &self.replications)?;
        let header = format!("# rank selection: {}\n", self.rank_selection);
        write_csv(&dir.join("summary.csv"), Some(&header), &self.summary)
    }
}

fn write_csv<T: Serialize>(path: &Path, preamble: Option<&str>, rows: &[T]) -> Result<()> {
    let mut out = preamble.unwrap_or_default().as_bytes().to_vec();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// One fitted method's view of the test set.
#[derive(Debug, Clone, PartialEq)]
struct MethodFit {
    ranks: Vec<usize>,
    converged: bool,
    predictions: Vec<f64>,
    scatter_history: Vec<f64>,
    audit_clean: Option<bool>,
}

fn ranks_label(r: &[usize]) -> String {
    r.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn predict_all(model: &ProgModel, projection: &ProjectionSet, test: &[&Tensor]) -> Result<Vec<f64>> {
    test.iter()
        .map(|x| {
            let y = tensor::multi_mode_project(x, projection, true)?;
            Ok(prognostics::predict_ttf(model, &y)?.point)
        })
        .collect()
}

fn fit_central(
    cfg: &BenchmarkConfig,
    train: &[&AssetRecord],
    test: &[&Tensor],
    q: f64,
    exec: ExecMode,
) -> Result<MethodFit> {
    let tensors: Vec<Tensor> = train.iter().map(|a| a.tensor.clone()).collect();
    let ttfs: Vec<f64> = train.iter().map(|a| a.ttf).collect();
    let ranks = cap_ranks(&mpca::choose_ranks_with(&tensors, q, exec)?, tensors.len().saturating_sub(2));
    let config = MpcaConfig {
        ranks: RankTarget::Fixed(ranks.clone()),
        eta: cfg.eta,
        max_iter: cfg.max_iter,
        exec,
    };
    let model = mpca::mpca_fit(&tensors, &config)?;
    let features = mpca::project_features_with(&tensors, &model, false, exec)?;
    let prog = prognostics::lls_fit(&features, &ttfs, cfg.family)?;
    Ok(MethodFit {
        ranks,
        converged: model.converged,
        predictions: predict_all(&prog, &model.projection, test)?,
        scatter_history: model.scatter_history,
        audit_clean: None,
    })
}

fn fit_federated(
    cfg: &BenchmarkConfig,
    users: &[Vec<&AssetRecord>],
    test: &[&Tensor],
    q: f64,
    seed: u64,
    exec: ExecMode,
) -> Result<MethodFit> {
    let data: Vec<(u32, Vec<Tensor>)> = users
        .iter()
        .enumerate()
        .map(|(d, u)| (d as u32 + 1, u.iter().map(|a| a.tensor.clone()).collect()))
        .collect();
    let total: usize = users.iter().map(Vec::len).sum();
    let mut fed_cfg = FedConfig {
        eta: cfg.eta,
        max_iter: cfg.max_iter,
        seed,
        mask: cfg.mask,
        exec,
        ..FedConfig::new(RankTarget::Variation(q))
    };
    let mut probe = Federation::new(data.clone())?;
    let chosen = fed::fed_choose_ranks(&mut probe.users, &mut probe.server, &mut probe.bus, q, &fed_cfg)?;
    let ranks = cap_ranks(&chosen, total.saturating_sub(2));
    fed_cfg.ranks = RankTarget::Fixed(ranks.clone());
    let mut federation = Federation::new(data)?;
    let outcome = federation.run_mpca(&fed_cfg)?;
    let audit_clean =
        probe.audit(&PayloadKind::MPCA)?.is_clean() && federation.audit(&PayloadKind::MPCA)?.is_clean();

    let parties: Vec<RegressionParty> = outcome
        .features
        .iter()
        .zip(users)
        .map(|((id, feats), u)| RegressionParty {
            id: *id,
            features: feats.clone(),
            ttfs: u.iter().map(|a| a.ttf).collect(),
        })
        .collect();
    let prog = prognostics::fed_lls_fit(&parties, cfg.family, &mut InMemoryBus::new(), seed, &cfg.mask)?;
    Ok(MethodFit {
        ranks,
        converged: outcome.converged,
        predictions: predict_all(&prog, &outcome.projection, test)?,
        scatter_history: outcome.scatter_history,
        audit_clean: Some(audit_clean),
    })
}

fn median_error(predictions: &[f64], truth: &[f64]) -> Result<f64> {
    let errors = predictions
        .iter()
        .zip(truth)
        .map(|(p, t)| prognostics::prediction_error(*p, *t))
        .collect::<Result<Vec<_>>>()?;
    Ok(Summary::of(&errors).median)
}

/// Chooses the variation target with the lowest mean held-out median error.
/// `fit` receives per-user training subsets and the held-out assets.
fn cross_validate<F>(cv: &CvConfig, users: &[Vec<&AssetRecord>], mut fit: F) -> Result<f64>
where
    F: FnMut(&[Vec<&AssetRecord>], &[&Tensor], f64) -> Result<Vec<f64>>,
{
    // folds over the pooled training order, each user keeping its own members
    let pooled: Vec<(usize, usize)> = users
        .iter()
        .enumerate()
        .flat_map(|(d, u)| (0..u.len()).map(move |i| (d, i)))
        .collect();
    let mut best: Option<(f64, f64)> = None;
    for &q in &cv.candidates {
        let mut scores = Vec::with_capacity(cv.folds);
        for fold in 0..cv.folds {
            let mut train: Vec<Vec<&AssetRecord>> = vec![Vec::new(); users.len()];
            let mut held: Vec<&AssetRecord> = Vec::new();
            for (pos, &(d, i)) in pooled.iter().enumerate() {
                if pos % cv.folds == fold {
                    held.push(users[d][i]);
                } else {
                    train[d].push(users[d][i]);
                }
            }
            if held.is_empty() {
                continue;
            }
            let tensors: Vec<&Tensor> = held.iter().map(|a| &a.tensor).collect();
            let truth: Vec<f64> = held.iter().map(|a| a.ttf).collect();
            let score = match fit(&train, &tensors, q) {
                Ok(pred) => median_error(&pred, &truth)?,
                Err(e) if e.is_config() => return Err(e),
                Err(_) => f64::INFINITY,
            };
            scores.push(score);
        }
        let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
        if best.is_none_or(|(_, s)| mean < s) {
            best = Some((q, mean));
        }
    }
    match best {
        Some((q, s)) if s.is_finite() => Ok(q),
        _ => Err(Error::Numerical("no cross-validation candidate could be fitted".into())),
    }
}

fn run_method(
    cfg: &BenchmarkConfig,
    method: Method,
    users: &[Vec<&AssetRecord>],
    test: &[&Tensor],
    seed: u64,
    exec: ExecMode,
) -> Result<MethodFit> {
    match method {
        Method::Fmpca => {
            let q = match &cfg.cv {
                Some(cv) => cross_validate(cv, users, |tr, te, q| {
                    let tr: Vec<Vec<&AssetRecord>> = tr.iter().filter(|u| !u.is_empty()).cloned().collect();
                    fit_federated(cfg, &tr, te, q, seed, exec).map(|f| f.predictions)
                })?,
                None => cfg.variation,
            };
            fit_federated(cfg, users, test, q, seed, exec)
        }
        Method::Combined => {
            let pooled: Vec<&AssetRecord> = users.iter().flatten().copied().collect();
            central_with_cv(cfg, &[pooled], test, exec)
        }
        Method::User(k) => central_with_cv(cfg, &users[k - 1..k], test, exec),
    }
}

fn central_with_cv(
    cfg: &BenchmarkConfig,
    users: &[Vec<&AssetRecord>],
    test: &[&Tensor],
    exec: ExecMode,
) -> Result<MethodFit> {
    let q = match &cfg.cv {
        Some(cv) => cross_validate(cv, users, |tr, te, q| {
            let pooled: Vec<&AssetRecord> = tr.iter().flatten().copied().collect();
            fit_central(cfg, &pooled, te, q, exec).map(|f| f.predictions)
        })?,
        None => cfg.variation,
    };
    let pooled: Vec<&AssetRecord> = users.iter().flatten().copied().collect();
    fit_central(cfg, &pooled, test, q, exec)
}

/// Error rows, the fmpca/combined gap and fit traces for one replication.
pub fn run_replication(
    cfg: &BenchmarkConfig,
    assets: &[AssetRecord],
    replication: usize,
    exec: ExecMode,
) -> Result<(Vec<ErrorRow>, Option<f64>, Vec<FitTrace>)> {
    let train_total: usize = cfg.train_split.iter().sum();
    let needed = train_total + cfg.test_count;
    if assets.len() < needed {
        return Err(Error::Config(format!(
            "benchmark needs {needed} assets, dataset has {}",
            assets.len()
        )));
    }
    let mut order: Vec<usize> = (0..assets.len()).collect();
    order.shuffle(&mut keyed_rng(&[cfg.seed, SPLIT_STREAM, replication as u64]));
    let mut start = 0;
    let users: Vec<Vec<&AssetRecord>> = cfg
        .train_split
        .iter()
        .map(|&n| {
            let u = order[start..start + n].iter().map(|&i| &assets[i]).collect();
            start += n;
            u
        })
        .collect();
    let test: Vec<&AssetRecord> = order[train_total..needed].iter().map(|&i| &assets[i]).collect();
    let test_tensors: Vec<&Tensor> = test.iter().map(|a| &a.tensor).collect();
    let seed = cfg.seed ^ (replication as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);

    let mut rows = Vec::new();
    let mut fits = Vec::new();
    for method in cfg.methods() {
        let fit = run_method(cfg, method, &users, &test_tensors, seed, exec)?;
        for (a, &p) in test.iter().zip(&fit.predictions) {
            rows.push(ErrorRow {
                replication,
                method,
                asset_id: a.id.clone(),
                true_ttf: a.ttf,
                predicted_ttf: p,
                error: prognostics::prediction_error(p, a.ttf)?,
                ranks: ranks_label(&fit.ranks),
                converged: fit.converged,
            });
        }
        fits.push((method, fit));
    }
    let find = |m: Method| fits.iter().find(|f| f.0 == m).map(|f| &f.1);
    let gap = match (find(Method::Fmpca), find(Method::Combined)) {
        (Some(f), Some(c)) => Some(
            f.predictions
                .iter()
                .zip(&c.predictions)
                .map(|(a, b)| (a - b).abs() / b.abs().max(f64::MIN_POSITIVE))
                .fold(0.0, f64::max),
        ),
        _ => None,
    };
    let traces = fits
        .into_iter()
        .map(|(method, fit)| FitTrace {
            replication,
            method,
            scatter_history: fit.scatter_history,
            audit_clean: fit.audit_clean,
        })
        .collect();
    Ok((rows, gap, traces))
}

pub fn run_benchmark(cfg: &BenchmarkConfig, assets: &[AssetRecord], exec: ExecMode) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let results = exec::try_map_range(exec, cfg.replications, |r| run_replication(cfg, assets, r, exec))?;
    let methods = cfg.methods();
    let mut errors = Vec::new();
    let mut replications = Vec::new();
    let mut traces = Vec::new();
    for (r, (rows, gap, t)) in results.into_iter().enumerate() {
        traces.extend(t);
        for &m in &methods {
            let e: Vec<f64> = rows.iter().filter(|row| row.method == m).map(|row| row.error).collect();
            let s = Summary::of(&e);
            replications.push(ReplicationRow {
                replication: r,
                method: m,
                median: s.median,
                q1: s.q1,
                q3: s.q3,
                iqr: s.iqr,
                n: s.n,
                max_rel_diff_vs_combined: if m == Method::Fmpca { gap } else { None },
            });
        }
        errors.extend(rows);
    }
    let summary = methods
        .iter()
        .map(|&m| {
            let e: Vec<f64> = errors.iter().filter(|row| row.method == m).map(|row| row.error).collect();
            let s = Summary::of(&e);
            SummaryRow {
                method: m,
                median: s.median,
                q1: s.q1,
                q3: s.q3,
                iqr: s.iqr,
                n: s.n,
            }
        })
        .collect();
    Ok(BenchmarkReport {
        rank_selection: cfg.rank_selection(),
        errors,
        replications,
        summary,
        traces,
    })
}
