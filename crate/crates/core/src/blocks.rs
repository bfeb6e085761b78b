//! Forward passes of the backbone blocks: stem, vision clue merge, local
//! spatial, residual gated, and the ODSS block that wires them around the
//! four-direction state-space scan.
//!
//! `+` is elementwise addition and `*` elementwise multiplication throughout.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ssm::Ss2dParams;
use crate::tensor::{
    activate, batch_norm_infer, conv2d, layer_norm, Activation, ConvWeights, FeatureMap, LayerNorm, NormStats,
};

/// Two stride-2 3x3 convolutions, each followed by batch norm and SiLU.
#[derive(Clone, Debug, PartialEq)]
pub struct StemWeights {
    pub conv1: ConvWeights,
    pub bn1: NormStats,
    pub conv2: ConvWeights,
    pub bn2: NormStats,
}

impl StemWeights {
    /// `c_in -> c_mid -> c_out`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, c_in: usize, c_mid: usize, c_out: usize) -> Self {
        Self {
            conv1: ConvWeights::random(rng, c_mid, c_in, 3, 2, 1, 1, false),
            bn1: NormStats::identity(c_mid),
            conv2: ConvWeights::random(rng, c_out, c_mid, 3, 2, 1, 1, false),
            bn2: NormStats::identity(c_out),
        }
    }
}

/// Pointwise projection of the four stacked 2x2 phases.
#[derive(Clone, Debug, PartialEq)]
pub struct ClueMergeWeights {
    pub proj: ConvWeights,
}

impl ClueMergeWeights {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, c_in: usize, c_out: usize) -> Self {
        Self {
            proj: ConvWeights::random(rng, c_out, 4 * c_in, 1, 1, 0, 1, true),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalSpatialWeights {
    /// Depthwise 3x3, same padding.
    pub dw: ConvWeights,
    pub bn: NormStats,
    pub pw1: ConvWeights,
    pub pw2: ConvWeights,
}

impl LocalSpatialWeights {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, c: usize, hidden: usize) -> Self {
        Self {
            dw: ConvWeights::random(rng, c, c, 3, 1, 1, c, true),
            bn: NormStats::identity(c),
            pw1: ConvWeights::random(rng, hidden, c, 1, 1, 0, 1, true),
            pw2: ConvWeights::random(rng, c, hidden, 1, 1, 0, 1, true),
        }
    }

    /// Zero inner weights: the block reduces to its residual path.
    pub fn zeros(c: usize, hidden: usize) -> Self {
        Self {
            dw: ConvWeights::zeros(c, c, 3, 1, 1, c, true),
            bn: NormStats::identity(c),
            pw1: ConvWeights::zeros(hidden, c, 1, 1, 0, 1, true),
            pw2: ConvWeights::zeros(c, hidden, 1, 1, 0, 1, true),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResGatedWeights {
    /// Gate branch.
    pub fc1: ConvWeights,
    /// Value branch, passed through the depthwise conv.
    pub fc2: ConvWeights,
    pub dw: ConvWeights,
    pub out: ConvWeights,
}

impl ResGatedWeights {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, c: usize, hidden: usize) -> Self {
        Self {
            fc1: ConvWeights::random(rng, hidden, c, 1, 1, 0, 1, true),
            fc2: ConvWeights::random(rng, hidden, c, 1, 1, 0, 1, true),
            dw: ConvWeights::random(rng, hidden, hidden, 3, 1, 1, hidden, true),
            out: ConvWeights::random(rng, c, hidden, 1, 1, 0, 1, true),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OdssWeights {
    pub entry: ConvWeights,
    pub entry_bn: NormStats,
    pub ls: LocalSpatialWeights,
    pub ln1: LayerNorm,
    pub ss2d: Ss2dParams,
    pub ln2: LayerNorm,
    pub rg: ResGatedWeights,
}

impl OdssWeights {
    /// `c` channels, `hidden` for the LS/RG expansions, `state` for the scans.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, c: usize, hidden: usize, state: usize) -> Self {
        Self {
            entry: ConvWeights::random(rng, c, c, 1, 1, 0, 1, true),
            entry_bn: NormStats::identity(c),
            ls: LocalSpatialWeights::random(rng, c, hidden),
            ln1: LayerNorm::identity(c),
            ss2d: Ss2dParams::random(rng, state),
            ln2: LayerNorm::identity(c),
            rg: ResGatedWeights::random(rng, c, hidden),
        }
    }
}

/// Stem: `(3, H, W) -> (C, H/4, W/4)`.
pub fn simple_stem(img: &FeatureMap, w: &StemWeights) -> Result<FeatureMap> {
    let (_, h, wd) = img.dims3()?;
    if h % 4 != 0 || wd % 4 != 0 {
        return Err(Error::dim(format!("stem input {h}x{wd} is not divisible by 4")));
    }
    for conv in [&w.conv1, &w.conv2] {
        if conv.stride != 2 || conv.kernel_size() != 3 || conv.padding != 1 {
            return Err(Error::dim("stem convolutions must be 3x3, stride 2, padding 1"));
        }
    }
    let x = activate(Activation::Silu, &batch_norm_infer(&conv2d(img, &w.conv1)?, &w.bn1)?)?;
    activate(Activation::Silu, &batch_norm_infer(&conv2d(&x, &w.conv2)?, &w.bn2)?)
}

/// Stacks the four 2x2 phases phase-major: channel `p * C + c` holds channel `c`
/// sampled at `(2i + p / 2, 2j + p % 2)`. For a single channel this is
/// [`crate::tensor::pixel_unshuffle`] with `r = 2`.
pub fn space_to_depth_phases(x: &FeatureMap) -> Result<FeatureMap> {
    let (c, h, w) = x.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!("clue merge input {h}x{w} has an odd side")));
    }
    Ok(FeatureMap::from_fn3(4 * c, h / 2, w / 2, |ch, i, j| {
        let (p, ci) = (ch / c, ch % c);
        x.at3(ci, 2 * i + p / 2, 2 * j + p % 2)
    }))
}

/// `(C, H, W) -> (C', H/2, W/2)`; no normalization.
pub fn vision_clue_merge(x: &FeatureMap, w: &ClueMergeWeights) -> Result<FeatureMap> {
    if w.proj.kernel_size() != 1 {
        return Err(Error::dim("clue merge projection must be pointwise"));
    }
    conv2d(&space_to_depth_phases(x)?, &w.proj)
}

/// `pw2(GELU(pw1(BN(DW(f))))) + f`.
pub fn local_spatial_block(f: &FeatureMap, w: &LocalSpatialWeights) -> Result<FeatureMap> {
    let mid = batch_norm_infer(&conv2d(f, &w.dw)?, &w.bn)?;
    let mixed = conv2d(&activate(Activation::Gelu, &conv2d(&mid, &w.pw1)?)?, &w.pw2)?;
    mixed.add(f)
}

/// Gated branch of the RG block: `out(fc1(x) * GELU(DW(fc2(x)) + fc2(x)))`.
pub fn rg_branch(x: &FeatureMap, w: &ResGatedWeights) -> Result<FeatureMap> {
    let gate = conv2d(x, &w.fc1)?;
    let value = conv2d(x, &w.fc2)?;
    let local = conv2d(&value, &w.dw)?.add(&value)?;
    let fused = gate.mul(&activate(Activation::Gelu, &local)?)?;
    conv2d(&fused, &w.out)
}

/// `rg_branch(x) + x`.
pub fn rg_block(x: &FeatureMap, w: &ResGatedWeights) -> Result<FeatureMap> {
    rg_branch(x, w)?.add(x)
}

/// Intermediate tensors of one ODSS forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct OdssTrace {
    /// `SiLU(BN(entry(z)))`.
    pub entry: FeatureMap,
    /// `SS2D(LN1(LS(entry))) + entry`.
    pub scanned: FeatureMap,
    /// `rg_branch(LN2(scanned)) + scanned`. The stage residual stands in for
    /// the RG block's own, so it is not applied twice.
    pub output: FeatureMap,
}

pub fn odss_block_trace(z: &FeatureMap, w: &OdssWeights) -> Result<OdssTrace> {
    let entry = activate(Activation::Silu, &batch_norm_infer(&conv2d(z, &w.entry)?, &w.entry_bn)?)?;
    let ls = local_spatial_block(&entry, &w.ls)?;
    let scanned = crate::ssm::ss2d_scan(&layer_norm(&ls, &w.ln1)?, &w.ss2d)?.add(&entry)?;
    let output = rg_branch(&layer_norm(&scanned, &w.ln2)?, &w.rg)?.add(&scanned)?;
    Ok(OdssTrace { entry, scanned, output })
}

pub fn odss_block(z: &FeatureMap, w: &OdssWeights) -> Result<FeatureMap> {
    Ok(odss_block_trace(z, w)?.output)
}
