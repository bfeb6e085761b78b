//! Content-aware reassembly upsampling.
//!
//! A 1x1 convolution compresses the input to `c_mid` channels, a
//! `k_encoder x k_encoder` convolution encodes `scale^2 * k_up^2` channels, pixel
//! shuffle lays these out as one `k_up x k_up` kernel per upsampled site, and a
//! softmax over each kernel makes it a convex combination. Every output value is
//! the kernel-weighted sum over the `k_up x k_up` window centred on its source
//! cell, with zero padding and one kernel shared by all channels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv2d, pixel_shuffle, softmax_axis, ConvWeights, FeatureMap};

/// How raw encoder logits become reassembly weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelNorm {
    #[default]
    Softmax,
    /// Use encoder outputs as-is (comparison mode, no convexity).
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CarafeConfig {
    pub c_mid: usize,
    pub k_encoder: usize,
    pub k_up: usize,
    pub scale: usize,
    #[serde(default)]
    pub norm: KernelNorm,
}

impl CarafeConfig {
    /// Typical settings for `c_in` input channels: `c_mid = max(c_in / 4, 1)`,
    /// `k_encoder = 3`, `k_up = 5`, `scale = 2`.
    pub fn for_channels(c_in: usize) -> Self {
        Self {
            c_mid: (c_in / 4).max(1),
            k_encoder: 3,
            k_up: 5,
            scale: 2,
            norm: KernelNorm::Softmax,
        }
    }

    pub fn validate(&self, c_in: usize) -> Result<()> {
        if self.k_up.is_multiple_of(2) || self.k_encoder.is_multiple_of(2) {
            return Err(Error::param(format!(
                "k_up ({}) and k_encoder ({}) must be odd",
                self.k_up, self.k_encoder
            )));
        }
        if self.c_mid == 0 || self.scale == 0 {
            return Err(Error::param("c_mid and scale must be positive"));
        }
        if self.c_mid > c_in {
            return Err(Error::param(format!("c_mid {} exceeds C_in {c_in}", self.c_mid)));
        }
        Ok(())
    }

    /// Channel count the content encoder must produce.
    pub fn encoder_channels(&self) -> usize {
        self.scale * self.scale * self.k_up * self.k_up
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CarafeWeights {
    pub compress: ConvWeights,
    pub encode: ConvWeights,
}

impl CarafeWeights {
    pub fn new(compress: ConvWeights, encode: ConvWeights, cfg: &CarafeConfig) -> Result<Self> {
        let w = Self { compress, encode };
        w.validate(cfg)?;
        Ok(w)
    }

    /// Seeded initialization: 1x1 compressor with bias, same-padded encoder.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, c_in: usize, cfg: &CarafeConfig) -> Self {
        let compress = ConvWeights::random(rng, cfg.c_mid, c_in, 1, 1, 0, 1, true);
        let encode = ConvWeights::random(
            rng,
            cfg.encoder_channels(),
            cfg.c_mid,
            cfg.k_encoder,
            1,
            cfg.k_encoder / 2,
            1,
            false,
        );
        Self { compress, encode }
    }

    pub fn validate(&self, cfg: &CarafeConfig) -> Result<()> {
        let c = &self.compress;
        if c.kernel_size() != 1 || c.out_channels() != cfg.c_mid || c.stride != 1 {
            return Err(Error::dim(format!(
                "compressor must be a stride-1 1x1 conv to {} channels",
                cfg.c_mid
            )));
        }
        let e = &self.encode;
        if e.out_channels() != cfg.encoder_channels() {
            return Err(Error::dim(format!(
                "encoder produces {} channels, scale^2 * k_up^2 = {}",
                e.out_channels(),
                cfg.encoder_channels()
            )));
        }
        if e.in_channels() != cfg.c_mid
            || e.kernel_size() != cfg.k_encoder
            || e.stride != 1
            || e.padding != cfg.k_encoder / 2
        {
            return Err(Error::dim(
                "encoder must be a same-padded stride-1 conv from c_mid channels",
            ));
        }
        Ok(())
    }
}

/// One `k_up x k_up` kernel per upsampled site, stored as `(k_up^2, rH, rW)`.
///
/// Kernel entry `(n, m)` (offsets in `-k_up/2..=k_up/2`) lives at channel
/// `(n + k_up/2) * k_up + (m + k_up/2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReassemblyField {
    pub kernels: FeatureMap,
    pub k_up: usize,
}

impl ReassemblyField {
    /// Largest deviation of any kernel sum from 1.
    pub fn max_normalization_error(&self) -> f64 {
        let (kk, h, w) = self.kernels.dims3().expect("field is rank 3");
        let mut worst = 0.0f64;
        for i in 0..h {
            for j in 0..w {
                let s: f64 = (0..kk).map(|k| self.kernels.at3(k, i, j)).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }
}

/// 1x1 channel compression with bias.
pub fn channel_compress(x: &FeatureMap, w: &CarafeWeights) -> Result<FeatureMap> {
    conv2d(x, &w.compress)
}

/// Encodes reassembly kernels from compressed features.
pub fn predict_kernels(x_comp: &FeatureMap, w: &CarafeWeights, cfg: &CarafeConfig) -> Result<ReassemblyField> {
    w.validate(cfg)?;
    let logits = conv2d(x_comp, &w.encode)?;
    let shuffled = pixel_shuffle(&logits, cfg.scale)?;
    let kernels = match cfg.norm {
        KernelNorm::Softmax => softmax_axis(&shuffled, 0)?,
        KernelNorm::Raw => shuffled,
    };
    Ok(ReassemblyField {
        kernels,
        k_up: cfg.k_up,
    })
}

/// Kernel-weighted sum over each output site's source window.
pub fn reassemble(x: &FeatureMap, field: &ReassemblyField, cfg: &CarafeConfig) -> Result<FeatureMap> {
    let (c, h, w) = x.dims3()?;
    let (kk, fh, fw) = field.kernels.dims3()?;
    let r = cfg.scale;
    if field.k_up != cfg.k_up || kk != cfg.k_up * cfg.k_up {
        return Err(Error::dim(format!(
            "field holds {kk} weights per site, config k_up = {}",
            cfg.k_up
        )));
    }
    if (fh, fw) != (h * r, w * r) {
        return Err(Error::dim(format!(
            "field is {fh}x{fw}, expected {}x{} for a {h}x{w} input at scale {r}",
            h * r,
            w * r
        )));
    }
    let k = cfg.k_up;
    let half = (k / 2) as isize;
    let mut out = vec![0.0; c * fh * fw];
    for oy in 0..fh {
        for ox in 0..fw {
            let (si, sj) = ((oy / r) as isize, (ox / r) as isize);
            for n in -half..=half {
                let ii = si + n;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for m in -half..=half {
                    let jj = sj + m;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let kidx = ((n + half) as usize) * k + (m + half) as usize;
                    let wt = field.kernels.at3(kidx, oy, ox);
                    for ch in 0..c {
                        out[(ch * fh + oy) * fw + ox] += wt * x.at3(ch, ii as usize, jj as usize);
                    }
                }
            }
        }
    }
    FeatureMap::new(vec![c, fh, fw], out).map_err(|_| Error::NonFinite("reassemble"))
}

/// Compress, predict kernels, reassemble.
pub fn carafe_forward(x: &FeatureMap, w: &CarafeWeights, cfg: &CarafeConfig) -> Result<FeatureMap> {
    let (c, _, _) = x.dims3()?;
    cfg.validate(c)?;
    let comp = channel_compress(x, w)?;
    let field = predict_kernels(&comp, w, cfg)?;
    reassemble(x, &field, cfg)
}
