//! (Log-)location-scale regression from tensor features to time-to-failure.
//!
//! The response is `z = ttf` (normal) or `z = log ttf` (lognormal, sev) and
//! `z = β0 + vec(Y)ᵀβ1 + σε`. For sev, `ε` has density `exp(ε − e^ε)`, which
//! makes the failure time Weibull.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fed::masking::MaskDistribution;
use crate::fed::transport::{Actor, PayloadKind, RoundMessage, RoundTag, Transport};
use crate::fed::{payload, secure_sum};
use crate::tensor::{Matrix, Tensor};
use crate::tnsr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Normal,
    Lognormal,
    Sev,
}

impl Family {
    fn response(self, ttf: f64) -> Result<f64> {
        if !ttf.is_finite() || ttf <= 0.0 {
            return Err(Error::InvalidArgument(format!("time to failure must be positive, got {ttf}")));
        }
        Ok(match self {
            Family::Normal => ttf,
            Family::Lognormal | Family::Sev => ttf.ln(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgModel {
    pub family: Family,
    pub beta0: f64,
    pub beta1: Vec<f64>,
    pub sigma: f64,
    pub feature_dims: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub location: f64,
    pub scale: f64,
    /// Median of the predicted failure-time distribution.
    pub point: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssetRecord {
    pub id: String,
    pub tensor: Tensor,
    pub ttf: f64,
}

impl ProgModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model: ProgModel = serde_json::from_str(&fs::read_to_string(path)?)?;
        let p: usize = model.feature_dims.iter().product();
        if model.beta1.len() != p || !(model.sigma >= 0.0) {
            return Err(Error::Format(format!("{}: inconsistent model", path.display())));
        }
        Ok(model)
    }

    pub fn location(&self, feature: &Tensor) -> Result<f64> {
        if feature.dims() != self.feature_dims.as_slice() {
            return Err(Error::DimMismatch(format!(
                "feature dims {:?}, model expects {:?}",
                feature.dims(),
                self.feature_dims
            )));
        }
        Ok(self.beta0 + dot(feature.data(), &self.beta1))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_features(features: &[Tensor], ttfs: &[f64]) -> Result<Vec<usize>> {
    if features.len() != ttfs.len() {
        return Err(Error::DimMismatch(format!("{} features but {} ttfs", features.len(), ttfs.len())));
    }
    let first = features
        .first()
        .ok_or_else(|| Error::InvalidArgument("no training samples".into()))?;
    if let Some(bad) = features.iter().find(|f| f.dims() != first.dims()) {
        return Err(Error::DimMismatch(format!("feature dims {:?} vs {:?}", bad.dims(), first.dims())));
    }
    if features.iter().any(|f| !f.is_finite()) {
        return Err(Error::NonFinite("features"));
    }
    Ok(first.dims().to_vec())
}

fn check_sample_count(m: usize, p: usize) -> Result<()> {
    if m < p + 2 {
        return Err(Error::RankDeficient(format!(
            "{m} samples cannot fit {p} feature coefficients plus intercept and scale"
        )));
    }
    Ok(())
}

const RANK_TOL: f64 = 1e-10;

/// Least squares `z ≈ β0 + Xβ1` through QR of the column-centered,
/// unit-norm-scaled design. Returns `(β0, β1)`.
fn least_squares(rows: &[&[f64]], z: &[f64]) -> Result<(f64, Vec<f64>)> {
    let m = rows.len();
    let p = rows[0].len();
    let mean_z = z.iter().sum::<f64>() / m as f64;
    if p == 0 {
        return Ok((mean_z, Vec::new()));
    }
    let mut col_mean = vec![0.0; p];
    for r in rows {
        col_mean.iter_mut().zip(*r).for_each(|(c, v)| *c += v);
    }
    col_mean.iter_mut().for_each(|c| *c /= m as f64);
    let mut x = DMatrix::from_fn(m, p, |i, j| rows[i][j] - col_mean[j]);
    let mut scale = vec![0.0; p];
    for (j, s) in scale.iter_mut().enumerate() {
        *s = x.column(j).norm();
        if *s == 0.0 {
            return Err(Error::RankDeficient(format!("feature {j} is constant")));
        }
        x.column_mut(j).scale_mut(1.0 / *s);
    }
    let qr = x.qr();
    let r = qr.r();
    let diag_max = (0..p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..p).any(|i| r[(i, i)].abs() <= RANK_TOL * diag_max) {
        return Err(Error::RankDeficient("design matrix is numerically rank deficient".into()));
    }
    let mut rhs = DVector::from_iterator(m, z.iter().map(|v| v - mean_z));
    qr.q_tr_mul(&mut rhs);
    let coef = r
        .solve_upper_triangular(&rhs.rows(0, p).into_owned())
        .ok_or_else(|| Error::RankDeficient("singular triangular factor".into()))?;
    let beta1: Vec<f64> = coef.iter().zip(&scale).map(|(c, s)| c / s).collect();
    let beta0 = mean_z - dot(&col_mean, &beta1);
    Ok((beta0, beta1))
}

fn rss(rows: &[&[f64]], z: &[f64], beta0: f64, beta1: &[f64]) -> f64 {
    rows.iter()
        .zip(z)
        .map(|(r, zi)| {
            let e = zi - beta0 - dot(r, beta1);
            e * e
        })
        .sum()
}

/// Fits the location-scale regression of `ttfs` on the vectorized features.
pub fn lls_fit(features: &[Tensor], ttfs: &[f64], family: Family) -> Result<ProgModel> {
    let dims = check_features(features, ttfs)?;
    let p: usize = dims.iter().product();
    check_sample_count(features.len(), p)?;
    let z = ttfs.iter().map(|&t| family.response(t)).collect::<Result<Vec<_>>>()?;
    let rows: Vec<&[f64]> = features.iter().map(Tensor::data).collect();
    let (beta0, beta1) = least_squares(&rows, &z)?;
    let sigma = (rss(&rows, &z, beta0, &beta1) / z.len() as f64).sqrt();
    let model = ProgModel {
        family,
        beta0,
        beta1,
        sigma,
        feature_dims: dims,
    };
    match family {
        Family::Sev => sev_refine(model, &rows, &z),
        _ => Ok(model),
    }
}

/// Euler–Mascheroni constant; `E[ε] = −γ` under the sev density.
const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Sev log-likelihood in `(β0, β1, log σ)`.
pub fn sev_log_likelihood(rows: &[&[f64]], z: &[f64], params: &[f64]) -> f64 {
    let (beta0, beta1, theta) = split_params(params);
    let sigma = theta.exp();
    rows.iter()
        .zip(z)
        .map(|(r, zi)| {
            let e = (zi - beta0 - dot(r, beta1)) / sigma;
            e - e.exp() - theta
        })
        .sum()
}

fn split_params(params: &[f64]) -> (f64, &[f64], f64) {
    let n = params.len();
    (params[0], &params[1..n - 1], params[n - 1])
}

/// Gradient of [`sev_log_likelihood`] and the Hessian, analytic.
pub fn sev_derivatives(rows: &[&[f64]], z: &[f64], params: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let (beta0, beta1, theta) = split_params(params);
    let sigma = theta.exp();
    let k = params.len();
    let mut g = DVector::zeros(k);
    let mut h = DMatrix::zeros(k, k);
    let mut x = vec![0.0; k - 1];
    for (r, zi) in rows.iter().zip(z) {
        x[0] = 1.0;
        x[1..].copy_from_slice(r);
        let e = (zi - beta0 - dot(r, beta1)) / sigma;
        let w = e.exp();
        for a in 0..k - 1 {
            g[a] += (w - 1.0) * x[a] / sigma;
            for b in 0..=a {
                h[(a, b)] -= w * x[a] * x[b] / (sigma * sigma);
            }
            h[(k - 1, a)] -= (w * e + w - 1.0) * x[a] / sigma;
        }
        g[k - 1] += (w - 1.0) * e - 1.0;
        h[(k - 1, k - 1)] -= w * e * e + w * e - e;
    }
    for a in 0..k {
        for b in 0..a {
            h[(b, a)] = h[(a, b)];
        }
    }
    (g, h)
}

/// Newton ascent on the sev likelihood, started from least squares.
fn sev_refine(start: ProgModel, rows: &[&[f64]], z: &[f64]) -> Result<ProgModel> {
    let scale = z.iter().map(|v| v.abs()).fold(1.0, f64::max);
    if start.sigma <= 1e-12 * scale {
        // exact fit: the likelihood is unbounded as σ → 0
        return Ok(ProgModel { sigma: 0.0, ..start });
    }
    let sigma0 = start.sigma * 6f64.sqrt() / std::f64::consts::PI;
    let mut params: Vec<f64> = std::iter::once(start.beta0 + EULER_GAMMA * sigma0)
        .chain(start.beta1.iter().copied())
        .chain(std::iter::once(sigma0.ln()))
        .collect();
    let mut ll = sev_log_likelihood(rows, z, &params);
    let k = params.len();
    for _ in 0..500 {
        let (g, h) = sev_derivatives(rows, z, &params);
        if g.amax() <= 1e-10 * (z.len() as f64) {
            break;
        }
        let neg_h = -h;
        let mut damping = 0.0;
        let step = loop {
            let mut a = neg_h.clone();
            for i in 0..k {
                a[(i, i)] += damping * neg_h[(i, i)].abs().max(1e-12);
            }
            if let Some(ch) = a.cholesky() {
                break ch.solve(&g);
            }
            damping = if damping == 0.0 { 1e-6 } else { damping * 10.0 };
            if damping > 1e12 {
                return Err(Error::Numerical("sev Hessian could not be regularized".into()));
            }
        };
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..60 {
            let trial: Vec<f64> = params.iter().zip(step.iter()).map(|(p, s)| p + t * s).collect();
            let trial_ll = sev_log_likelihood(rows, z, &trial);
            if trial_ll.is_finite() && trial_ll >= ll {
                params = trial;
                improved = trial_ll > ll;
                ll = trial_ll;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    let (beta0, beta1, theta) = split_params(&params);
    if !ll.is_finite() {
        return Err(Error::Numerical("sev fit diverged".into()));
    }
    Ok(ProgModel {
        beta0,
        beta1: beta1.to_vec(),
        sigma: theta.exp(),
        ..start
    })
}

pub fn predict_ttf(model: &ProgModel, feature: &Tensor) -> Result<Prediction> {
    let location = model.location(feature)?;
    let point = match model.family {
        Family::Normal => location,
        Family::Lognormal => location.exp(),
        Family::Sev => (location + model.sigma * 2f64.ln().ln()).exp(),
    };
    Ok(Prediction {
        location,
        scale: model.sigma,
        point,
    })
}

/// `|estimated − true| / true`.
pub fn prediction_error(estimated: f64, true_ttf: f64) -> Result<f64> {
    if !(true_ttf > 0.0) || !true_ttf.is_finite() {
        return Err(Error::InvalidArgument(format!("true time to failure must be positive, got {true_ttf}")));
    }
    Ok((estimated - true_ttf).abs() / true_ttf)
}

/// Keeps the first `i_t` frames (last mode) of every asset that has at
/// least that many; shorter assets are dropped.
pub fn truncate_training(assets: &[AssetRecord], i_t: usize) -> Result<Vec<AssetRecord>> {
    if i_t == 0 {
        return Err(Error::InvalidArgument("frame count must be at least 1".into()));
    }
    assets
        .iter()
        .filter(|a| a.tensor.dims().last().is_some_and(|&t| t >= i_t))
        .map(|a| {
            let mode = a.tensor.order() - 1;
            Ok(AssetRecord {
                tensor: a.tensor.truncate_mode(mode, i_t)?,
                ..a.clone()
            })
        })
        .collect()
}

#[derive(Debug, Deserialize)]
struct ManifestEntry {
    asset_id: String,
    tensor_file: String,
    ttf: f64,
}

/// Reads `manifest.csv` (`asset_id, tensor_file, ttf`, extra columns
/// ignored) and the tensors it names, relative to `dir`.
pub fn load_manifest(dir: &Path) -> Result<Vec<AssetRecord>> {
    let mut reader = csv::Reader::from_path(dir.join("manifest.csv"))?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let e: ManifestEntry = row?;
        if !(e.ttf > 0.0) || !e.ttf.is_finite() {
            return Err(Error::Config(format!("asset {} has nonpositive ttf {}", e.asset_id, e.ttf)));
        }
        out.push(AssetRecord {
            tensor: tnsr::read_file(&dir.join(&e.tensor_file))?,
            id: e.asset_id,
            ttf: e.ttf,
        });
    }
    Ok(out)
}

/// One data owner in the federated regression.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionParty {
    pub id: u32,
    pub features: Vec<Tensor>,
    pub ttfs: Vec<f64>,
}

fn upper_triangle(g: &Matrix) -> Vec<f64> {
    let p = g.nrows();
    let mut out = Vec::with_capacity(p * (p + 1) / 2);
    for j in 0..p {
        for i in 0..=j {
            out.push(g[(i, j)]);
        }
    }
    out
}

fn from_upper_triangle(v: &[f64], p: usize) -> Matrix {
    let mut g = Matrix::zeros(p, p);
    let mut k = 0;
    for j in 0..p {
        for i in 0..=j {
            g[(i, j)] = v[k];
            g[(j, i)] = v[k];
            k += 1;
        }
    }
    g
}

fn broadcast<T: Transport + ?Sized>(bus: &mut T, ids: &[u32], round: RoundTag, kind: PayloadKind, values: &[f64]) -> Result<Vec<Vec<f64>>> {
    let bytes = payload::encode_vector(values);
    for &id in ids {
        bus.send(RoundMessage {
            sender: Actor::Server,
            receiver: Actor::User(id),
            round,
            kind,
            payload: bytes.clone(),
        })?;
    }
    ids.iter()
        .map(|&id| {
            let msg = bus.recv(Actor::Server, Actor::User(id))?;
            if msg.kind != kind || msg.round != round {
                return Err(Error::Protocol(format!("user {id} expected {kind} for {round}")));
            }
            payload::decode_vector(&msg.payload)
        })
        .collect()
}

/// Federated regression over pairwise-masked sufficient statistics.
///
/// Round 0 aggregates counts, feature sums and response sums; round 1 the
/// Gram matrix and cross products centered at the pooled means; the server
/// solves the normal equations and broadcasts `β`; round 2 aggregates the
/// residual sum of squares for `σ̂`. Normal and lognormal families only.
pub fn fed_lls_fit<T: Transport + ?Sized>(
    parties: &[RegressionParty],
    family: Family,
    bus: &mut T,
    seed: u64,
    mask: &MaskDistribution,
) -> Result<ProgModel> {
    if family == Family::Sev {
        return Err(Error::InvalidArgument("federated fitting supports normal and lognormal only".into()));
    }
    let first = parties
        .first()
        .ok_or_else(|| Error::InvalidArgument("no regression parties".into()))?;
    let dims = check_features(&first.features, &first.ttfs)?;
    let mut responses = Vec::with_capacity(parties.len());
    for party in parties {
        if check_features(&party.features, &party.ttfs)? != dims {
            return Err(Error::DimMismatch(format!("party {} has different feature dims", party.id)));
        }
        responses.push(party.ttfs.iter().map(|&t| family.response(t)).collect::<Result<Vec<_>>>()?);
    }
    let p: usize = dims.iter().product();
    let ids: Vec<u32> = parties.iter().map(|q| q.id).collect();

    // round 0: counts and sums
    let round = RoundTag::Regression { phase: 0 };
    let stats: Vec<(u32, Vec<f64>)> = parties
        .iter()
        .zip(&responses)
        .map(|(q, z)| {
            let mut v = vec![0.0; p + 2];
            v[0] = q.features.len() as f64;
            for (f, zi) in q.features.iter().zip(z) {
                v[1..=p].iter_mut().zip(f.data()).for_each(|(s, x)| *s += x);
                v[p + 1] += zi;
            }
            (q.id, v)
        })
        .collect();
    let total = secure_sum(&stats, bus, round, seed, mask)?;
    let count = total[0].round();
    check_sample_count(count as usize, p)?;
    let means: Vec<f64> = total[1..].iter().map(|s| s / count).collect();
    let means = broadcast(bus, &ids, round, PayloadKind::MaskedStatistic, &means)?.swap_remove(0);
    let (x_mean, z_mean) = (&means[..p], means[p]);

    // round 1: centered Gram and cross products
    let round = RoundTag::Regression { phase: 1 };
    let stats: Vec<(u32, Vec<f64>)> = parties
        .iter()
        .zip(&responses)
        .map(|(q, z)| {
            let mut g = Matrix::zeros(p, p);
            let mut c = vec![0.0; p];
            for (f, zi) in q.features.iter().zip(z) {
                let d = DVector::from_iterator(p, f.data().iter().zip(x_mean).map(|(x, m)| x - m));
                g.ger(1.0, &d, &d, 1.0);
                c.iter_mut().zip(d.iter()).for_each(|(s, x)| *s += x * (zi - z_mean));
            }
            let mut v = upper_triangle(&g);
            v.extend(c);
            (q.id, v)
        })
        .collect();
    let total = secure_sum(&stats, bus, round, seed, mask)?;
    let tri = p * (p + 1) / 2;
    let gram = from_upper_triangle(&total[..tri], p);
    let beta1 = solve_normal_equations(&gram, &total[tri..])?;
    let beta0 = z_mean - dot(x_mean, &beta1);
    let mut coef = vec![beta0];
    coef.extend(&beta1);
    let coef = broadcast(bus, &ids, round, PayloadKind::ModelParameters, &coef)?.swap_remove(0);

    // round 2: residual sum of squares
    let round = RoundTag::Regression { phase: 2 };
    let stats: Vec<(u32, Vec<f64>)> = parties
        .iter()
        .zip(&responses)
        .map(|(q, z)| {
            let rows: Vec<&[f64]> = q.features.iter().map(Tensor::data).collect();
            (q.id, vec![rss(&rows, z, coef[0], &coef[1..])])
        })
        .collect();
    let total = secure_sum(&stats, bus, round, seed, mask)?;
    let sigma = (total[0].max(0.0) / count).sqrt();
    let mut params = coef.clone();
    params.push(sigma);
    broadcast(bus, &ids, round, PayloadKind::ModelParameters, &params)?;
    Ok(ProgModel {
        family,
        beta0: coef[0],
        beta1: coef[1..].to_vec(),
        sigma,
        feature_dims: dims,
    })
}

/// Solves `G β = c` through a Cholesky factor of the diagonally scaled `G`.
fn solve_normal_equations(gram: &Matrix, c: &[f64]) -> Result<Vec<f64>> {
    let p = gram.nrows();
    if p == 0 {
        return Ok(Vec::new());
    }
    let d: Vec<f64> = (0..p)
        .map(|i| {
            let g = gram[(i, i)];
            if g > 0.0 {
                Ok(1.0 / g.sqrt())
            } else {
                Err(Error::RankDeficient(format!("feature {i} is constant across the federation")))
            }
        })
        .collect::<Result<_>>()?;
    let scaled = Matrix::from_fn(p, p, |i, j| gram[(i, j)] * d[i] * d[j]);
    let ch = scaled
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("pooled design is rank deficient".into()))?;
    let l = ch.l();
    let diag_max = (0..p).map(|i| l[(i, i)]).fold(0.0, f64::max);
    if (0..p).any(|i| l[(i, i)] <= RANK_TOL * diag_max) {
        return Err(Error::RankDeficient("pooled design is numerically rank deficient".into()));
    }
    let rhs = DVector::from_iterator(p, c.iter().zip(&d).map(|(v, s)| v * s));
    let y = ch.solve(&rhs);
    Ok(y.iter().zip(&d).map(|(v, s)| v * s).collect())
}
