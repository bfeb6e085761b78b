//! Detection scoring: greedy matching, precision-recall curves, AP and mAP.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::focal::{iou, BBox};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub class_id: usize,
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub class_id: usize,
    pub bbox: BBox,
}

/// Outcome of greedy matching. All vectors are in confidence order.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Input index of each detection, highest confidence first.
    pub order: Vec<usize>,
    pub tp: Vec<bool>,
    /// Ground-truth index claimed by each true positive.
    pub matched_gt: Vec<Option<usize>>,
    /// Best IoU against an unmatched ground truth at match time.
    pub best_iou: Vec<f64>,
    pub confidences: Vec<f64>,
}

impl MatchResult {
    /// TP flags indexed like the input detections.
    pub fn flags_in_input_order(&self) -> Vec<bool> {
        let mut out = vec![false; self.order.len()];
        for (rank, &i) in self.order.iter().enumerate() {
            out[i] = self.tp[rank];
        }
        out
    }

    pub fn pr_curve(&self, n_gt: usize) -> PrCurve {
        PrCurve {
            thresholds: self.confidences.clone(),
            ..pr_curve(&self.tp, n_gt)
        }
    }
}

/// Indices sorted by descending confidence; equal confidences keep input order.
pub fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    order
}

fn check_threshold(iou_t: f64) -> Result<()> {
    if iou_t > 0.0 && iou_t <= 1.0 {
        Ok(())
    } else {
        Err(Error::param(format!("IoU threshold {iou_t} is outside (0, 1]")))
    }
}

fn check_detection(d: &Detection) -> Result<()> {
    d.bbox.validate()?;
    if !(0.0..=1.0).contains(&d.confidence) {
        return Err(Error::InputDomain(format!(
            "detection confidence {} in image {} is outside [0, 1]",
            d.confidence, d.image_id
        )));
    }
    Ok(())
}

/// Greedy matching: each detection, by descending confidence, claims its
/// best-IoU unmatched ground truth in the same image (lowest index on ties)
/// and is a true positive iff that IoU reaches `iou_t`. Class scoping is the
/// caller's job.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_t: f64) -> Result<MatchResult> {
    check_threshold(iou_t)?;
    for d in dets {
        check_detection(d)?;
    }
    let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        g.bbox.validate()?;
        by_image.entry(g.image_id.as_str()).or_default().push(i);
    }
    let order = confidence_order(dets);
    let mut used = vec![false; gts.len()];
    let n = dets.len();
    let (mut tp, mut matched_gt, mut best_iou, mut confidences) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for &di in &order {
        let d = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for &gi in by_image.get(d.image_id.as_str()).map(Vec::as_slice).unwrap_or(&[]) {
            if used[gi] {
                continue;
            }
            let v = iou(&d.bbox, &gts[gi].bbox)?;
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        let hit = best.filter(|&(_, v)| v >= iou_t);
        if let Some((gi, _)) = hit {
            used[gi] = true;
        }
        tp.push(hit.is_some());
        matched_gt.push(hit.map(|(gi, _)| gi));
        best_iou.push(best.map_or(0.0, |(_, v)| v));
        confidences.push(d.confidence);
    }
    Ok(MatchResult {
        order,
        tp,
        matched_gt,
        best_iou,
        confidences,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// `(recall, precision)` after each detection in confidence order.
    pub points: Vec<(f64, f64)>,
    /// Confidence of the detection that produced each point, when known.
    pub thresholds: Vec<f64>,
    pub n_gt: usize,
}

impl PrCurve {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Cumulative precision and recall. With `n_gt == 0` recall is reported as 0.
pub fn pr_curve(flags: &[bool], n_gt: usize) -> PrCurve {
    let (mut tp, mut fp) = (0usize, 0usize);
    let points = flags
        .iter()
        .map(|&f| {
            if f {
                tp += 1;
            } else {
                fp += 1;
            }
            let recall = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
            (recall, tp as f64 / (tp + fp) as f64)
        })
        .collect();
    PrCurve {
        points,
        thresholds: Vec::new(),
        n_gt,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    #[default]
    AllPoint,
    Coco101,
}

/// Precision envelope: `env[i] = max(precision[j] for j >= i)`.
pub fn precision_envelope(curve: &PrCurve) -> Vec<f64> {
    let mut env: Vec<f64> = curve.points.iter().map(|p| p.1).collect();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    env
}

pub fn average_precision(curve: &PrCurve, mode: ApMode) -> f64 {
    if curve.is_empty() || curve.n_gt == 0 {
        return 0.0;
    }
    let env = precision_envelope(curve);
    match mode {
        ApMode::AllPoint => {
            let mut prev = 0.0;
            let mut ap = 0.0;
            for (&(r, _), &e) in curve.points.iter().zip(&env) {
                ap += (r - prev) * e;
                prev = r;
            }
            ap
        }
        ApMode::Coco101 => {
            let mut total = 0.0;
            let mut i = 0;
            for t in 0..=100 {
                let level = t as f64 / 100.0;
                while i < env.len() && curve.points[i].0 < level {
                    i += 1;
                }
                if i == env.len() {
                    break;
                }
                total += env[i];
            }
            total / 101.0
        }
    }
}

pub fn mean_ap(per_class_ap: &[f64]) -> Result<f64> {
    if per_class_ap.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    Ok(per_class_ap.iter().sum::<f64>() / per_class_ap.len() as f64)
}

/// 0.50, 0.55, ..., 0.95.
pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassEval {
    pub class_id: usize,
    pub n_gt: usize,
    pub n_det: usize,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThresholdEval {
    pub iou_t: f64,
    pub classes: Vec<ClassEval>,
    pub map: f64,
}

/// Classes that take part in the mean: those present in the ground truth.
pub fn evaluated_classes(gts: &[GroundTruth]) -> Vec<usize> {
    gts.iter()
        .map(|g| g.class_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn split_by_class<'a>(
    dets: &'a [Detection],
    gts: &'a [GroundTruth],
    class_id: usize,
) -> (Vec<Detection>, Vec<GroundTruth>) {
    (
        dets.iter().filter(|d| d.class_id == class_id).cloned().collect(),
        gts.iter().filter(|g| g.class_id == class_id).cloned().collect(),
    )
}

/// Per-class AP at a single threshold, classes ascending.
pub fn evaluate_at(dets: &[Detection], gts: &[GroundTruth], iou_t: f64, mode: ApMode) -> Result<ThresholdEval> {
    check_threshold(iou_t)?;
    let classes = evaluated_classes(gts);
    if classes.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let per_class = classes
        .par_iter()
        .map(|&c| {
            let (d, g) = split_by_class(dets, gts, c);
            let m = match_detections(&d, &g, iou_t)?;
            Ok(ClassEval {
                class_id: c,
                n_gt: g.len(),
                n_det: d.len(),
                ap: average_precision(&m.pr_curve(g.len()), mode),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let map = mean_ap(&per_class.iter().map(|c| c.ap).collect::<Vec<_>>())?;
    Ok(ThresholdEval {
        iou_t,
        classes: per_class,
        map,
    })
}

/// Mean over thresholds of the class-mean AP.
pub fn map_at_range(dets: &[Detection], gts: &[GroundTruth], thresholds: &[f64], mode: ApMode) -> Result<f64> {
    Ok(evaluate_range(dets, gts, thresholds, mode)?.1)
}

pub fn evaluate_range(
    dets: &[Detection],
    gts: &[GroundTruth],
    thresholds: &[f64],
    mode: ApMode,
) -> Result<(Vec<ThresholdEval>, f64)> {
    if thresholds.is_empty() {
        return Err(Error::param("threshold list is empty"));
    }
    let per = thresholds
        .iter()
        .map(|&t| evaluate_at(dets, gts, t, mode))
        .collect::<Result<Vec<_>>>()?;
    let mean = per.iter().map(|t| t.map).sum::<f64>() / per.len() as f64;
    Ok((per, mean))
}
