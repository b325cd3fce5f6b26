//! Synthetic degradation image streams from a 2-D heat-transfer process,
//! plus time-to-failure synthesis through a perturbed MPCA feature map.
//!
//! The plate `[0, L]²` starts at 0 with its edges held at the boundary
//! temperature. It is integrated with forward-time centered-space steps on a
//! padded `(n+2)×(n+2)` grid whose outer ring is the boundary; recorded
//! images are the `n×n` interior nodes `x = jL/(n+1)`. Frame `t` is the
//! field at time `t − 1` (one time unit per frame); each frame is split into
//! the fewest equal sub-steps that keep `α_max·Δt/Δx²` at or below the
//! target ratio.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::mpca::{self, MpcaConfig, RankTarget};
use crate::rng::keyed_rng;
use crate::tensor::{self, Matrix, ProjectionSet, Tensor};
use crate::tnsr;

/// Largest `α·Δt/Δx²` for which the explicit 2-D scheme is stable.
pub const STABILITY_LIMIT: f64 = 0.25;

const ASSET_STREAM: u64 = 0xa55e7;
const TTF_STREAM: u64 = 0x77f;

/// How the noise parameters are read.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseParam {
    #[default]
    Variance,
    StdDev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n: usize,
    pub length: f64,
    pub boundary: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub frames: usize,
    /// 1-based frame indices kept in each asset tensor.
    pub kept_frames: Vec<usize>,
    /// Time units between consecutive frames.
    pub frame_duration: f64,
    /// Upper bound on `α_max·Δt/Δx²`.
    pub target_ratio: f64,
    pub pixel_noise: f64,
    pub coef_noise: f64,
    pub ttf_noise: f64,
    pub factor_noise: f64,
    pub noise_param: NoiseParam,
    /// Variation kept per mode by the MPCA step of TTF synthesis.
    pub variation: f64,
    pub asset_count: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n: 21,
            length: 0.2,
            boundary: 30.0,
            alpha_min: 0.5e-4,
            alpha_max: 1e-4,
            frames: 150,
            kept_frames: (1..=10).map(|k| 15 * k).collect(),
            frame_duration: 1.0,
            target_ratio: 0.2,
            pixel_noise: 0.1,
            coef_noise: 0.01,
            ttf_noise: 0.1,
            factor_noise: 1.0,
            noise_param: NoiseParam::Variance,
            variation: 0.97,
            asset_count: 500,
            seed: 0,
        }
    }
}

impl SimConfig {
    /// 11×11×5 streams: every other kept frame of the default design.
    pub fn desk(asset_count: usize, seed: u64) -> Self {
        SimConfig {
            n: 11,
            kept_frames: (1..=5).map(|k| 30 * k).collect(),
            asset_count,
            seed,
            ..SimConfig::default()
        }
    }

    pub fn dx(&self) -> f64 {
        self.length / (self.n + 1) as f64
    }

    pub fn substeps_per_frame(&self) -> usize {
        let dt_max = self.target_ratio * self.dx() * self.dx() / self.alpha_max;
        ((self.frame_duration / dt_max).ceil() as usize).max(1)
    }

    pub fn dt(&self) -> f64 {
        self.frame_duration / self.substeps_per_frame() as f64
    }

    pub fn ratio(&self, alpha: f64) -> f64 {
        alpha * self.dt() / (self.dx() * self.dx())
    }

    pub fn frame_dims(&self) -> Vec<usize> {
        vec![self.n, self.n, self.kept_frames.len()]
    }

    fn sd(&self, value: f64) -> f64 {
        match self.noise_param {
            NoiseParam::Variance => value.sqrt(),
            NoiseParam::StdDev => value,
        }
    }

    pub fn pixel_sd(&self) -> f64 {
        self.sd(self.pixel_noise)
    }

    pub fn coef_sd(&self) -> f64 {
        self.sd(self.coef_noise)
    }

    pub fn ttf_sd(&self) -> f64 {
        self.sd(self.ttf_noise)
    }

    pub fn factor_sd(&self) -> f64 {
        self.sd(self.factor_noise)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n < 2 {
            return bad(format!("grid size must be at least 2, got {}", self.n));
        }
        if !(self.length > 0.0 && self.length.is_finite() && self.boundary.is_finite()) {
            return bad("domain length must be positive and the boundary finite".into());
        }
        if !(self.alpha_min > 0.0 && self.alpha_min <= self.alpha_max && self.alpha_max.is_finite()) {
            return bad(format!("bad alpha range ({}, {})", self.alpha_min, self.alpha_max));
        }
        if self.frames == 0 || !(self.frame_duration > 0.0 && self.frame_duration.is_finite()) {
            return bad("frame count and frame duration must be positive".into());
        }
        if self.kept_frames.is_empty()
            || self.kept_frames.iter().any(|&t| t == 0 || t > self.frames)
            || self.kept_frames.windows(2).any(|w| w[0] >= w[1])
        {
            return bad(format!(
                "kept frames must be strictly increasing within 1..={}, got {:?}",
                self.frames, self.kept_frames
            ));
        }
        if !(self.target_ratio > 0.0 && self.target_ratio <= STABILITY_LIMIT) {
            return bad(format!("target ratio must lie in (0, {STABILITY_LIMIT}], got {}", self.target_ratio));
        }
        for (name, v) in [
            ("pixel_noise", self.pixel_noise),
            ("coef_noise", self.coef_noise),
            ("ttf_noise", self.ttf_noise),
            ("factor_noise", self.factor_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        mpca::validate_variation(self.variation).map_err(|e| Error::Config(e.to_string()))?;
        if self.asset_count == 0 {
            return bad("asset count must be positive".into());
        }
        Ok(())
    }
}

/// Raw padded field `(n+2)×(n+2)×frames`; frame `t` (1-based) is the state
/// after `(t−1)·substeps_per_frame` steps.
pub fn simulate_heat(alpha: f64, cfg: &SimConfig) -> Result<Tensor> {
    cfg.validate()?;
    let ratio = cfg.ratio(alpha);
    if !(alpha > 0.0) || ratio > STABILITY_LIMIT {
        return Err(Error::Unstable {
            ratio,
            alpha,
            dt: cfg.dt(),
            dx: cfg.dx(),
        });
    }
    let side = cfg.n + 2;
    let plane = side * side;
    let mut u = vec![cfg.boundary; plane];
    for j in 1..=cfg.n {
        for i in 1..=cfg.n {
            u[i + side * j] = 0.0;
        }
    }
    let mut next = u.clone();
    let mut out = Vec::with_capacity(plane * cfg.frames);
    out.extend_from_slice(&u);
    let centre = 1.0 - 4.0 * ratio;
    let substeps = cfg.substeps_per_frame();
    for _ in 1..cfg.frames {
        for _ in 0..substeps {
            for j in 1..=cfg.n {
                for i in 1..=cfg.n {
                    let k = i + side * j;
                    let around = u[k - 1] + u[k + 1] + u[k - side] + u[k + side];
                    next[k] = centre * u[k] + ratio * around;
                }
            }
            std::mem::swap(&mut u, &mut next);
        }
        out.extend_from_slice(&u);
    }
    Tensor::new(vec![side, side, cfg.frames], out)
}

/// Interior `n×n` images at the given 1-based frames of a padded field.
pub fn interior_frames(field: &Tensor, kept: &[usize]) -> Result<Tensor> {
    let d = field.dims();
    if d.len() != 3 || d[0] != d[1] || d[0] < 3 {
        return Err(Error::DimMismatch(format!("not a padded square field: {d:?}")));
    }
    if let Some(&t) = kept.iter().find(|&&t| t == 0 || t > d[2]) {
        return Err(Error::InvalidArgument(format!("frame {t} outside 1..={}", d[2])));
    }
    let n = d[0] - 2;
    Tensor::from_fn(&[n, n, kept.len()], |idx| field.get(&[idx[0] + 1, idx[1] + 1, kept[idx[2]] - 1]))
}

/// Kept interior frames of one asset plus i.i.d. pixel noise.
pub fn make_asset_stream<R: Rng + ?Sized>(alpha: f64, cfg: &SimConfig, rng: &mut R) -> Result<Tensor> {
    let mut t = interior_frames(&simulate_heat(alpha, cfg)?, &cfg.kept_frames)?;
    let sd = cfg.pixel_sd();
    if sd > 0.0 {
        let noise = Normal::new(0.0, sd).map_err(|e| Error::Config(e.to_string()))?;
        t.data_mut().iter_mut().for_each(|v| *v += noise.sample(rng));
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticAsset {
    /// 1-based.
    pub id: usize,
    pub alpha: f64,
    pub tensor: Tensor,
    pub ttf: f64,
}

/// The hidden link that produced the failure times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtfGenerator {
    pub ranks: Vec<usize>,
    pub beta0: f64,
    pub beta1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SimConfig,
    pub assets: Vec<SyntheticAsset>,
    pub generator: TtfGenerator,
}

fn normal(sd: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, sd).map_err(|e| Error::Config(e.to_string()))
}

/// Simulates every asset, then draws TTFs from
/// `log z = β0 + vec(X̃ ×_1 Ũ_1ᵀ ×_2 Ũ_2ᵀ ×_3 Ũ_3ᵀ)ᵀβ1 + ε` where `X̃` is the
/// asset tensor centered by the pooled mean and `Ũ_n` are MPCA factors of
/// the whole image set with N(0, ·) entries added. Without centering the
/// common temperature level swamps the exponent.
pub fn generate_dataset(cfg: &SimConfig, exec: ExecMode) -> Result<Dataset> {
    cfg.validate()?;
    let streams = exec::try_map_range(exec, cfg.asset_count, |m| {
        let mut rng = keyed_rng(&[cfg.seed, ASSET_STREAM, m as u64]);
        let alpha = if cfg.alpha_min < cfg.alpha_max {
            rng.random_range(cfg.alpha_min..cfg.alpha_max)
        } else {
            cfg.alpha_min
        };
        make_asset_stream(alpha, cfg, &mut rng).map(|t| (alpha, t))
    })?;
    let tensors: Vec<Tensor> = streams.iter().map(|s| s.1.clone()).collect();

    let mut rng = keyed_rng(&[cfg.seed, TTF_STREAM]);
    let (mean, factors) = if tensors.len() >= 2 {
        let config = MpcaConfig::new(RankTarget::Variation(cfg.variation)).with_exec(exec);
        let model = mpca::mpca_fit(&tensors, &config)?;
        (model.mean, model.projection.factors().to_vec())
    } else {
        let ones = tensors[0].dims().iter().map(|&i| Matrix::identity(i, 1)).collect();
        (tensors[0].clone(), ones)
    };
    let factor_noise = normal(cfg.factor_sd())?;
    let perturbed: Vec<Matrix> = factors
        .iter()
        .map(|u| u.map(|v| v + factor_noise.sample(&mut rng)))
        .collect();
    let ranks: Vec<usize> = perturbed.iter().map(Matrix::ncols).collect();
    let feature_map = ProjectionSet::new(perturbed)?;

    let coef = normal(cfg.coef_sd())?;
    let beta0 = coef.sample(&mut rng);
    let beta1: Vec<f64> = (0..ranks.iter().product::<usize>()).map(|_| coef.sample(&mut rng)).collect();
    let eps = normal(cfg.ttf_sd())?;

    let assets = streams
        .into_iter()
        .enumerate()
        .map(|(m, (alpha, tensor))| {
            let y = tensor::multi_mode_project(&tensor.sub(&mean)?, &feature_map, true)?;
            let mut noise_rng = keyed_rng(&[cfg.seed, TTF_STREAM, m as u64]);
            let log_z = beta0 + dot(y.data(), &beta1) + eps.sample(&mut noise_rng);
            let ttf = log_z.exp();
            if !(ttf > 0.0 && ttf.is_finite()) {
                return Err(Error::Numerical(format!(
                    "asset {} has log TTF {log_z}, outside the representable range",
                    m + 1
                )));
            }
            Ok(SyntheticAsset { id: m + 1, alpha, tensor, ttf })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: cfg.clone(),
        assets,
        generator: TtfGenerator { ranks, beta0, beta1 },
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetConfigFile {
    sim: SimConfig,
    dx: f64,
    dt: f64,
    substeps_per_frame: usize,
    max_ratio: f64,
    generator: TtfGenerator,
}

#[derive(Debug, Serialize)]
struct ManifestRow<'a> {
    asset_id: usize,
    alpha: f64,
    ttf: f64,
    tensor_file: &'a str,
}

pub fn tensor_file_name(id: usize) -> String {
    format!("asset_{id:04}.tnsr")
}

/// `manifest.csv`, one TNSR file per asset and `config.json`.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("manifest.csv"))?;
    for a in &data.assets {
        let file = tensor_file_name(a.id);
        tnsr::write_file(&dir.join(&file), &a.tensor)?;
        w.serialize(ManifestRow {
            asset_id: a.id,
            alpha: a.alpha,
            ttf: a.ttf,
            tensor_file: &file,
        })?;
    }
    w.flush()?;
    let cfg = &data.config;
    let echo = DatasetConfigFile {
        sim: cfg.clone(),
        dx: cfg.dx(),
        dt: cfg.dt(),
        substeps_per_frame: cfg.substeps_per_frame(),
        max_ratio: cfg.ratio(cfg.alpha_max),
        generator: data.generator.clone(),
    };
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&echo)? + "\n")?;
    Ok(())
}
