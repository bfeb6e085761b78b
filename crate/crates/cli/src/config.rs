//! Layered configuration: command-line flag, then config file, then default.

use std::path::Path;

use detkit_core::carafe::KernelNorm;
use detkit_core::eval::{default_thresholds, ApMode};
use detkit_core::{CarafeConfig, FocalIouConfig, GammaConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GammaFile {
    pub g_min: Option<f64>,
    pub g_max: Option<f64>,
    pub epsilon: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CarafeFile {
    pub c_mid: Option<usize>,
    pub k_encoder: Option<usize>,
    pub k_up: Option<usize>,
    pub scale: Option<usize>,
    pub norm: Option<KernelNorm>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalFile {
    pub iou_thresh: Option<f64>,
    pub alpha_high: Option<f64>,
    pub alpha_low: Option<f64>,
    pub focusing_gamma: Option<f64>,
    pub pairs: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalFile {
    pub thresholds: Option<Vec<f64>>,
    pub ap_mode: Option<ApMode>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsmFile {
    pub n: Option<usize>,
    pub l: Option<usize>,
    pub systems: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthFile {
    pub images: Option<usize>,
    pub classes: Option<usize>,
    pub size: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoFile {
    pub size: Option<usize>,
    pub channels: Option<usize>,
    pub images: Option<usize>,
    pub gamma_per_upsample: Option<bool>,
}

/// Contents of a `--config` file. Every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub gamma: GammaFile,
    pub carafe: CarafeFile,
    pub focal: FocalFile,
    pub eval: EvalFile,
    pub ssm: SsmFile,
    pub synth: SynthFile,
    pub demo: DemoFile,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("invalid config {}: {e}", path.display())))
    }
}

/// Flag, else file, else default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

pub fn gamma_config(flags: (Option<f64>, Option<f64>, Option<f64>), file: &GammaFile) -> Result<GammaConfig, CliError> {
    let d = GammaConfig::default();
    let cfg = GammaConfig {
        g_min: pick(flags.0, file.g_min, d.g_min),
        g_max: pick(flags.1, file.g_max, d.g_max),
        epsilon: pick(flags.2, file.epsilon, d.epsilon),
    };
    cfg.validate()?;
    Ok(cfg)
}

#[allow(clippy::type_complexity)]
pub fn carafe_config(
    c_in: usize,
    flags: (
        Option<usize>,
        Option<usize>,
        Option<usize>,
        Option<usize>,
        Option<KernelNorm>,
    ),
    file: &CarafeFile,
) -> Result<CarafeConfig, CliError> {
    let d = CarafeConfig::for_channels(c_in);
    let cfg = CarafeConfig {
        c_mid: pick(flags.0, file.c_mid, d.c_mid),
        k_encoder: pick(flags.1, file.k_encoder, d.k_encoder),
        k_up: pick(flags.2, file.k_up, d.k_up),
        scale: pick(flags.3, file.scale, d.scale),
        norm: pick(flags.4, file.norm, d.norm),
    };
    cfg.validate(c_in)?;
    Ok(cfg)
}

pub fn focal_config(
    flags: (Option<f64>, Option<f64>, Option<f64>, Option<f64>),
    file: &FocalFile,
) -> Result<FocalIouConfig, CliError> {
    let d = FocalIouConfig::default();
    let cfg = FocalIouConfig {
        iou_thresh: pick(flags.0, file.iou_thresh, d.iou_thresh),
        alpha_high: pick(flags.1, file.alpha_high, d.alpha_high),
        alpha_low: pick(flags.2, file.alpha_low, d.alpha_low),
        focusing_gamma: pick(flags.3, file.focusing_gamma, d.focusing_gamma),
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub ap_mode: ApMode,
}

pub fn eval_config(flags: (Option<Vec<f64>>, Option<ApMode>), file: &EvalFile) -> Result<EvalConfig, CliError> {
    let thresholds = pick(flags.0, file.thresholds.clone(), default_thresholds());
    if thresholds.is_empty() || thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err(CliError::Input(format!(
            "thresholds {thresholds:?} must be a non-empty list in (0, 1]"
        )));
    }
    Ok(EvalConfig {
        thresholds,
        ap_mode: pick(flags.1, file.ap_mode, ApMode::AllPoint),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_layers() {
        let file = GammaFile {
            g_min: Some(0.7),
            g_max: Some(1.5),
            epsilon: None,
        };
        let cfg = gamma_config((None, Some(1.8), None), &file).unwrap();
        assert_eq!(
            cfg,
            GammaConfig {
                g_min: 0.7,
                g_max: 1.8,
                epsilon: 1e-6
            }
        );
        assert_eq!(
            gamma_config((None, None, None), &GammaFile::default()).unwrap(),
            GammaConfig::default()
        );
        assert!(gamma_config((Some(3.0), None, None), &GammaFile::default()).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<FileConfig>(r#"{"gamma": {"gmin": 1}}"#).is_err());
        let f: FileConfig = serde_json::from_str(r#"{"seed": 5, "eval": {"ap_mode": "coco101"}}"#).unwrap();
        assert_eq!(f.seed, Some(5));
        assert_eq!(f.eval.ap_mode, Some(ApMode::Coco101));
    }

    #[test]
    fn thresholds_checked() {
        assert!(eval_config((Some(vec![]), None), &EvalFile::default()).is_err());
        assert!(eval_config((Some(vec![0.0]), None), &EvalFile::default()).is_err());
        assert_eq!(
            eval_config((None, None), &EvalFile::default())
                .unwrap()
                .thresholds
                .len(),
            10
        );
    }
}
