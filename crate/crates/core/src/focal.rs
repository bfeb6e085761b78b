//! Box overlap and the quality-partitioned Focal IoU regression loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in corner form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let c = [self.x1, self.y1, self.x2, self.y2];
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::InputDomain(format!("box {c:?} has a non-finite coordinate")));
        }
        if self.x2 < self.x1 || self.y2 < self.y1 {
            return Err(Error::InputDomain(format!("box {c:?} has inverted coordinates")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_array(c: [f64; 4]) -> Result<Self> {
        Self::new(c[0], c[1], c[2], c[3])
    }
}

fn overlap(a: &BBox, b: &BBox) -> (f64, f64) {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    (iw, ih)
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let (iw, ih) = overlap(a, b);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    High,
    Low,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalIouConfig {
    pub iou_thresh: f64,
    pub alpha_high: f64,
    pub alpha_low: f64,
    pub focusing_gamma: f64,
}

impl Default for FocalIouConfig {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            alpha_high: 1.0,
            alpha_low: 0.25,
            focusing_gamma: 2.0,
        }
    }
}

impl FocalIouConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::param(format!("{name} = {v} is outside [0, 1]")))
            }
        };
        unit("iou_thresh", self.iou_thresh)?;
        unit("alpha_high", self.alpha_high)?;
        unit("alpha_low", self.alpha_low)?;
        if !(self.focusing_gamma >= 0.0 && self.focusing_gamma.is_finite()) {
            return Err(Error::param(format!(
                "focusing_gamma = {} must be finite and >= 0",
                self.focusing_gamma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleLoss {
    pub iou: f64,
    pub quality: Quality,
    pub alpha: f64,
    pub loss: f64,
}

/// High quality iff `iou_val >= iou_thresh`.
pub fn partition(iou_val: f64, cfg: &FocalIouConfig) -> (Quality, f64) {
    if iou_val >= cfg.iou_thresh {
        (Quality::High, cfg.alpha_high)
    } else {
        (Quality::Low, cfg.alpha_low)
    }
}

/// High: `1 - iou`. Low: `alpha_low * (1 - iou)^focusing_gamma`.
pub fn sample_loss(a: &BBox, b: &BBox, cfg: &FocalIouConfig) -> Result<SampleLoss> {
    let v = iou(a, b)?;
    let (quality, alpha) = partition(v, cfg);
    let loss = match quality {
        Quality::High => 1.0 - v,
        Quality::Low => alpha * (1.0 - v).powf(cfg.focusing_gamma),
    };
    Ok(SampleLoss {
        iou: v,
        quality,
        alpha,
        loss,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// Weighted term `alpha_i * (1 - iou_i)^e_i`, exponent 1 for high quality and
/// `focusing_gamma` for low quality.
pub fn weighted_term(iou_val: f64, cfg: &FocalIouConfig) -> f64 {
    match partition(iou_val, cfg) {
        (Quality::High, alpha) => alpha * (1.0 - iou_val),
        (Quality::Low, alpha) => alpha * (1.0 - iou_val).powf(cfg.focusing_gamma),
    }
}

/// Sum (or mean) of weighted terms in input order. Empty input gives 0.
pub fn batch_loss(pairs: &[(BBox, BBox)], cfg: &FocalIouConfig, reduction: Reduction) -> Result<f64> {
    let mut total = 0.0;
    for (a, b) in pairs {
        total += weighted_term(iou(a, b)?, cfg);
    }
    Ok(match reduction {
        Reduction::Mean if !pairs.is_empty() => total / pairs.len() as f64,
        _ => total,
    })
}

// Derivative of min/max against a fixed partner; ties take the mean of both sides.
fn d_min(v: f64, other: f64) -> f64 {
    if v < other {
        1.0
    } else if v > other {
        0.0
    } else {
        0.5
    }
}

fn d_max(v: f64, other: f64) -> f64 {
    if v > other {
        1.0
    } else if v < other {
        0.0
    } else {
        0.5
    }
}

/// Gradient of the IoU with respect to `(x1, y1, x2, y2)` of `a`.
pub fn iou_gradient(a: &BBox, b: &BBox) -> Result<[f64; 4]> {
    a.validate()?;
    b.validate()?;
    let (iw, ih) = overlap(a, b);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return Err(Error::UndefinedGradient(format!(
            "union of {:?} and {:?} has zero area",
            a.to_array(),
            b.to_array()
        )));
    }
    let raw_w = a.x2.min(b.x2) - a.x1.max(b.x1);
    let raw_h = a.y2.min(b.y2) - a.y1.max(b.y1);
    let mut d_inter = [0.0; 4];
    if raw_w > 0.0 && raw_h > 0.0 {
        d_inter = [
            -ih * d_max(a.x1, b.x1),
            -iw * d_max(a.y1, b.y1),
            ih * d_min(a.x2, b.x2),
            iw * d_min(a.y2, b.y2),
        ];
    }
    let (w, h) = (a.width(), a.height());
    let d_area = [-h, -w, h, w];
    let mut g = [0.0; 4];
    for k in 0..4 {
        g[k] = (d_inter[k] * (union + inter) - inter * d_area[k]) / (union * union);
    }
    Ok(g)
}

/// Gradient of [`sample_loss`] with respect to the coordinates of `a`. At
/// `iou == iou_thresh` the high-quality branch is used.
pub fn loss_gradient(a: &BBox, b: &BBox, cfg: &FocalIouConfig) -> Result<[f64; 4]> {
    let d_iou = iou_gradient(a, b)?;
    let v = iou(a, b)?;
    let factor = match partition(v, cfg) {
        (Quality::High, _) => -1.0,
        (Quality::Low, alpha) => {
            if cfg.focusing_gamma == 0.0 {
                0.0
            } else {
                -alpha * cfg.focusing_gamma * (1.0 - v).powf(cfg.focusing_gamma - 1.0)
            }
        }
    };
    Ok(d_iou.map(|d| factor * d))
}

/// Central differences of [`sample_loss`] in the coordinates of `a`.
pub fn numeric_gradient(a: &BBox, b: &BBox, cfg: &FocalIouConfig, h: f64) -> Result<[f64; 4]> {
    let base = a.to_array();
    let mut g = [0.0; 4];
    for (k, slot) in g.iter_mut().enumerate() {
        let (mut p, mut m) = (base, base);
        p[k] += h;
        m[k] -= h;
        let fp = sample_loss(&BBox::from_array(p)?, b, cfg)?.loss;
        let fm = sample_loss(&BBox::from_array(m)?, b, cfg)?.loss;
        *slot = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// `max|g - n| / max(max|g|, max|n|)`, or 0 when both vanish.
pub fn relative_error(g: &[f64; 4], n: &[f64; 4]) -> f64 {
    let scale = g.iter().chain(n).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale < 1e-12 {
        return 0.0;
    }
    g.iter().zip(n).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// Random box pair away from every kink: all coordinate gaps between the two
/// boxes, both box sides, and the distance of the IoU from the quality
/// threshold exceed `margin`.
pub fn random_general_position_pair<R: Rng + ?Sized>(rng: &mut R, cfg: &FocalIouConfig, margin: f64) -> (BBox, BBox) {
    loop {
        let side = |rng: &mut R| rng.random_range(0.5..5.0);
        let (x, y, w, h) = (
            rng.random_range(0.0..10.0),
            rng.random_range(0.0..10.0),
            side(rng),
            side(rng),
        );
        let a = BBox {
            x1: x,
            y1: y,
            x2: x + w,
            y2: y + h,
        };
        let (dx, dy) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let (bw, bh) = (side(rng), side(rng));
        let b = BBox {
            x1: x + dx,
            y1: y + dy,
            x2: x + dx + bw,
            y2: y + dy + bh,
        };
        let xs = [(a.x1, b.x1), (a.x1, b.x2), (a.x2, b.x1), (a.x2, b.x2)];
        let ys = [(a.y1, b.y1), (a.y1, b.y2), (a.y2, b.y1), (a.y2, b.y2)];
        if xs.iter().chain(&ys).any(|(p, q)| (p - q).abs() <= margin) {
            continue;
        }
        match iou(&a, &b) {
            Ok(v) if (v - cfg.iou_thresh).abs() > margin => return (a, b),
            _ => continue,
        }
    }
}
