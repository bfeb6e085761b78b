//! Numerical kernels for a gamma-corrected, state-space detection backbone:
//! feature-map primitives, adaptive gamma correction, CARAFE upsampling,
//! discretized state-space scans, backbone blocks, the Focal IoU loss, and a
//! detection evaluator with its dataset and report formats.

pub mod blocks;
pub mod carafe;
pub mod dataset;
pub mod dump;
pub mod error;
pub mod eval;
pub mod focal;
pub mod gamma;
pub mod report;
pub mod ssm;
pub mod tensor;
pub mod weights;

pub use carafe::CarafeConfig;
pub use error::{Error, Result};
pub use eval::{ApMode, Detection, GroundTruth, PrCurve};
pub use focal::{BBox, FocalIouConfig};
pub use gamma::GammaConfig;
pub use tensor::{ConvWeights, FeatureMap};
