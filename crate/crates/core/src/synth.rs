//! Cross-domain ratings generated from shared user latents.
//!
//! Each user has `θ_u ~ N(0, I_k)` and each item in either domain
//! `φ_v ~ N(0, I_k)`; a rating is `clip(3 + θ_u·φ_v/√k + ε, 0, 5)` with
//! `ε ~ N(0, σ²)`. Since the same `θ_u` drives both domains, source
//! behaviour is the only route to a user's target preferences.

use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{DomainDataset, DomainTag, Interaction, MAX_RATING, MIN_RATING};
use crate::error::{Error, Result};

/// Rating offset around which the bilinear score is centred.
pub const RATING_CENTER: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_src_items: usize,
    pub n_tgt_items: usize,
    pub latent_dim: usize,
    /// Ratings per user in each domain the user belongs to.
    pub ratings_per_user: usize,
    pub noise_std: f64,
    /// Fraction of users present in both domains; the rest alternate
    /// between source-only and target-only.
    pub overlap_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 500,
            n_src_items: 200,
            n_tgt_items: 200,
            latent_dim: 4,
            ratings_per_user: 20,
            noise_std: 0.5,
            overlap_fraction: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0
            || self.n_src_items == 0
            || self.n_tgt_items == 0
            || self.latent_dim == 0
            || self.ratings_per_user == 0
        {
            return Err(Error::Config("synthetic counts must be positive".into()));
        }
        if self.ratings_per_user > self.n_src_items.min(self.n_tgt_items) {
            return Err(Error::Config(format!(
                "ratings_per_user {} exceeds the item count",
                self.ratings_per_user
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        if !(self.overlap_fraction > 0.0 && self.overlap_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "overlap_fraction {} not in (0, 1]",
                self.overlap_fraction
            )));
        }
        Ok(())
    }

    pub fn n_overlap(&self) -> usize {
        ((self.overlap_fraction * self.n_users as f64).round() as usize).clamp(1, self.n_users)
    }
}

/// Latent factors behind a generated dataset. Diagnostics only.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub user_ids: Vec<String>,
    pub users: Vec<Vec<f64>>,
    pub src_items: Vec<Vec<f64>>,
    pub tgt_items: Vec<Vec<f64>>,
}

impl GroundTruth {
    /// Noise-free score `3 + θ·φ/√k`, unclipped.
    pub fn score(theta: &[f64], phi: &[f64]) -> f64 {
        let dot: f64 = theta.iter().zip(phi).map(|(a, b)| a * b).sum();
        RATING_CENTER + dot / (theta.len() as f64).sqrt()
    }

    /// `user_id,θ_1,…,θ_k` per line.
    pub fn write_user_latents(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (id, theta) in self.user_ids.iter().zip(&self.users) {
            write!(out, "{id}")?;
            for v in theta {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn clip(r: f64) -> f64 {
    r.clamp(MIN_RATING, MAX_RATING)
}

fn latent<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    (0..k).map(|_| StandardNormal.sample(rng)).collect()
}

/// Builds `(source, target, ground truth)`. Datasets are indexed with
/// `min_count = 1`, so counts match the config exactly.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(DomainDataset, DomainDataset, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.latent_dim;
    let users: Vec<Vec<f64>> = (0..cfg.n_users).map(|_| latent(&mut rng, k)).collect();
    let src_items: Vec<Vec<f64>> = (0..cfg.n_src_items).map(|_| latent(&mut rng, k)).collect();
    let tgt_items: Vec<Vec<f64>> = (0..cfg.n_tgt_items).map(|_| latent(&mut rng, k)).collect();
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;

    let user_ids: Vec<String> = (0..cfg.n_users).map(|u| format!("u{u:05}")).collect();
    let n_overlap = cfg.n_overlap();
    let mut src = Vec::new();
    let mut tgt = Vec::new();
    let mut clock = 0u64;
    for (u, theta) in users.iter().enumerate() {
        let (in_src, in_tgt) = if u < n_overlap {
            (true, true)
        } else {
            ((u - n_overlap) % 2 == 0, (u - n_overlap) % 2 == 1)
        };
        let domains = [
            (in_src, &src_items, "s", &mut src),
            (in_tgt, &tgt_items, "t", &mut tgt),
        ];
        for (present, items, prefix, out) in domains {
            if !present {
                continue;
            }
            for v in index::sample(&mut rng, items.len(), cfg.ratings_per_user).into_iter() {
                let r = clip(GroundTruth::score(theta, &items[v]) + noise.sample(&mut rng));
                out.push(Interaction::new(user_ids[u].clone(), format!("{prefix}{v:04}"), r, clock)?);
                clock += 1;
            }
        }
    }
    let source = DomainDataset::from_interactions(DomainTag::Source, src, 1)?;
    let target = DomainDataset::from_interactions(DomainTag::Target, tgt, 1)?;
    Ok((
        source,
        target,
        GroundTruth {
            user_ids,
            users,
            src_items,
            tgt_items,
        },
    ))
}

/// Irreducible error of the generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseOracle {
    /// `σ·√(2/π)`, ignoring clipping.
    pub analytic: f64,
    /// `E|clip(s + ε) − clip(s)|` at the generator's score distribution.
    pub monte_carlo: f64,
    pub std_error: f64,
    pub draws: usize,
}

pub const ORACLE_DRAWS: usize = 1_000_000;

/// MAE of a predictor that knows every latent. The clipped estimate
/// uses the median `clip(s)`, which is the MAE-optimal prediction.
pub fn oracle_noise_mae(cfg: &SynthConfig, draws: usize, seed: u64) -> NoiseOracle {
    let analytic = cfg.noise_std * (2.0 / std::f64::consts::PI).sqrt();
    if cfg.noise_std == 0.0 || draws == 0 {
        return NoiseOracle {
            analytic,
            monte_carlo: 0.0,
            std_error: 0.0,
            draws,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.latent_dim.max(1);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..draws {
        let theta = latent(&mut rng, k);
        let phi = latent(&mut rng, k);
        let s = GroundTruth::score(&theta, &phi);
        let e: f64 = StandardNormal.sample(&mut rng);
        let err = (clip(s + cfg.noise_std * e) - clip(s)).abs();
        sum += err;
        sum_sq += err * err;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    NoiseOracle {
        analytic,
        monte_carlo: mean,
        std_error: (var / n).sqrt(),
        draws,
    }
}
