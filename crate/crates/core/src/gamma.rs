//! Self-adaptive gamma correction driven by grayscale brightness statistics.
//!
//! The exponent for an image is
//! `g_min + (g_max - g_min) * mean / (mean + std + eps)`, clamped to
//! `[g_min, g_max]`, and is applied as `(v + eps)^gamma` to every pixel.
//! The power law is used literally, so `gamma > 1` darkens mid-tones.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Luma weights for R, G, B.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaConfig {
    pub g_min: f64,
    pub g_max: f64,
    pub epsilon: f64,
}

impl Default for GammaConfig {
    fn default() -> Self {
        Self {
            g_min: 0.5,
            g_max: 2.0,
            epsilon: 1e-6,
        }
    }
}

impl GammaConfig {
    pub fn new(g_min: f64, g_max: f64, epsilon: f64) -> Result<Self> {
        let cfg = Self { g_min, g_max, epsilon };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.g_min > 0.0 && self.g_min <= self.g_max && self.g_max.is_finite()) {
            return Err(Error::param(format!(
                "gamma bounds must satisfy 0 < g_min <= g_max, got [{}, {}]",
                self.g_min, self.g_max
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::param("gamma epsilon must be positive"));
        }
        Ok(())
    }
}

/// Exponent chosen for one image plus the statistics that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaStats {
    pub gamma: f64,
    pub gray_mean: f64,
    pub gray_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionResult {
    pub gamma: f64,
    pub gray_mean: f64,
    pub gray_std: f64,
    pub corrected: FeatureMap,
}

impl CorrectionResult {
    pub fn stats(&self) -> GammaStats {
        GammaStats {
            gamma: self.gamma,
            gray_mean: self.gray_mean,
            gray_std: self.gray_std,
        }
    }
}

fn check_unit_range(x: &FeatureMap, what: &str) -> Result<()> {
    if let Some(v) = x.data().iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InputDomain(format!("{what} value {v} outside [0, 1]")));
    }
    Ok(())
}

/// `(3, H, W)` RGB in `[0, 1]` to `(1, H, W)` luma.
pub fn rgb_to_gray(img: &FeatureMap) -> Result<FeatureMap> {
    let (c, h, w) = img.dims3()?;
    if c != 3 {
        return Err(Error::dim(format!("rgb_to_gray expects 3 channels, got {c}")));
    }
    check_unit_range(img, "pixel")?;
    let [wr, wg, wb] = LUMA_WEIGHTS;
    let (r, g, b) = (img.channel(0), img.channel(1), img.channel(2));
    let data = (0..h * w)
        .map(|p| (wr * r[p] + wg * g[p] + wb * b[p]).clamp(0.0, 1.0))
        .collect();
    FeatureMap::new(vec![1, h, w], data)
}

/// Population mean and standard deviation of the gray map, and the clamped exponent.
pub fn compute_gamma(gray: &FeatureMap, cfg: &GammaConfig) -> Result<GammaStats> {
    cfg.validate()?;
    check_unit_range(gray, "gray")?;
    let values = gray.data();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let ratio = mean / (mean + std + cfg.epsilon);
    let gamma = (cfg.g_min + (cfg.g_max - cfg.g_min) * ratio).clamp(cfg.g_min, cfg.g_max);
    Ok(GammaStats {
        gamma,
        gray_mean: mean,
        gray_std: std,
    })
}

/// `clamp((v + eps)^gamma, 0, 1)` per pixel.
pub fn apply_gamma(img: &FeatureMap, gamma: f64, epsilon: f64) -> Result<FeatureMap> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::param(format!("gamma must be positive, got {gamma}")));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::param("gamma epsilon must be non-negative"));
    }
    check_unit_range(img, "pixel")?;
    img.map("apply_gamma", |v| (v + epsilon).powf(gamma).clamp(0.0, 1.0))
}

/// Gray conversion, exponent selection, and power-law correction of one image.
pub fn correct(img: &FeatureMap, cfg: &GammaConfig) -> Result<CorrectionResult> {
    let gray = rgb_to_gray(img)?;
    let stats = compute_gamma(&gray, cfg)?;
    let corrected = apply_gamma(img, stats.gamma, cfg.epsilon)?;
    Ok(CorrectionResult {
        gamma: stats.gamma,
        gray_mean: stats.gray_mean,
        gray_std: stats.gray_std,
        corrected,
    })
}

/// Corrects each image of a batch with its own exponent.
pub fn correct_batch(images: &[FeatureMap], cfg: &GammaConfig) -> Result<Vec<CorrectionResult>> {
    images.par_iter().map(|img| correct(img, cfg)).collect()
}

/// Gamma correction for arbitrary feature maps (used when correcting before
/// every upsample rather than only on the network input).
///
/// The map is min-max normalized to `[0, 1]`, the exponent is computed from the
/// channel-mean map, applied, and the result is mapped back to the original range.
/// A constant map is returned unchanged.
pub fn correct_features(x: &FeatureMap, cfg: &GammaConfig) -> Result<(FeatureMap, GammaStats)> {
    let (c, h, w) = x.dims3()?;
    let (lo, hi) = (x.min_value(), x.max_value());
    let span = hi - lo;
    if span == 0.0 {
        let stats = GammaStats {
            gamma: cfg.g_max,
            gray_mean: 0.0,
            gray_std: 0.0,
        };
        return Ok((x.clone(), stats));
    }
    let unit = x.map("correct_features", |v| ((v - lo) / span).clamp(0.0, 1.0))?;
    let gray = FeatureMap::from_fn3(1, h, w, |_, i, j| {
        ((0..c).map(|ch| unit.at3(ch, i, j)).sum::<f64>() / c as f64).clamp(0.0, 1.0)
    });
    let stats = compute_gamma(&gray, cfg)?;
    let corrected = apply_gamma(&unit, stats.gamma, cfg.epsilon)?;
    Ok((corrected.map("correct_features", |v| lo + v * span)?, stats))
}
