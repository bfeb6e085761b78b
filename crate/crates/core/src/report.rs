//! Deterministic JSON reports: sorted keys, floats at six decimals.

use std::collections::BTreeMap;
use std::io;

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};
use serde_json::Value;

use crate::dataset::DatasetStats;
use crate::error::{Error, Result};
use crate::eval::{evaluate_at, evaluated_classes, match_detections, ApMode, Detection, GroundTruth};

struct FixedFloat<'a>(PrettyFormatter<'a>);

impl Formatter for FixedFloat<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.6}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        write!(w, "{value:.6}")
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Pretty JSON with keys sorted and every float printed with six decimals.
/// Ends with a newline.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // Round-tripping through `Value` sorts object keys.
    let v = serde_json::to_value(value).map_err(|e| Error::param(format!("report serialization: {e}")))?;
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FixedFloat(PrettyFormatter::with_indent(b"  ")));
    v.serialize(&mut ser)
        .map_err(|e| Error::param(format!("report serialization: {e}")))?;
    out.push(b'\n');
    Ok(String::from_utf8(out).expect("serde_json writes UTF-8"))
}

/// One line, keys sorted, six-decimal floats.
pub fn to_canonical_line<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::param(format!("report serialization: {e}")))?;
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, CompactFixed);
    v.serialize(&mut ser)
        .map_err(|e| Error::param(format!("report serialization: {e}")))?;
    Ok(String::from_utf8(out).expect("serde_json writes UTF-8"))
}

struct CompactFixed;

impl Formatter for CompactFixed {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.6}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub name: String,
    pub n_gt: usize,
    pub n_det: usize,
    pub ap50: f64,
    pub ap50_95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThresholdReport {
    pub iou_t: f64,
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatchDetail {
    pub class_id: usize,
    pub confidence: f64,
    pub tp: bool,
    pub iou: f64,
    /// Index of the claimed box among this image's ground truths of the class.
    pub gt_index: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMatches {
    pub image_id: String,
    pub detections: Vec<MatchDetail>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub tool: String,
    pub version: String,
    pub config: Value,
    pub ap_mode: ApMode,
    pub thresholds: Vec<f64>,
    pub classes: Vec<ClassReport>,
    #[serde(rename = "map50")]
    pub map_50: f64,
    #[serde(rename = "map50_95")]
    pub map_50_95: f64,
    pub per_threshold: Vec<ThresholdReport>,
    /// Matching at IoU 0.5, grouped by image.
    pub matches: Vec<ImageMatches>,
    pub dataset: Option<DatasetStats>,
    pub timings_ms: Option<BTreeMap<String, f64>>,
}

pub struct EvalInputs<'a> {
    pub dets: &'a [Detection],
    pub gts: &'a [GroundTruth],
    pub thresholds: &'a [f64],
    pub mode: ApMode,
    pub class_names: &'a [String],
}

/// Scores detections at 0.5 and over `thresholds`. Tool name, version,
/// config, dataset stats and timings are left for the caller to fill.
pub fn build_eval_report(input: &EvalInputs<'_>) -> Result<EvalReport> {
    if input.thresholds.is_empty() {
        return Err(Error::param("threshold list is empty"));
    }
    let at50 = evaluate_at(input.dets, input.gts, 0.5, input.mode)?;
    let per = input
        .thresholds
        .iter()
        .map(|&t| evaluate_at(input.dets, input.gts, t, input.mode))
        .collect::<Result<Vec<_>>>()?;
    let n_t = per.len() as f64;
    let classes = at50
        .classes
        .iter()
        .enumerate()
        .map(|(k, c)| ClassReport {
            class_id: c.class_id,
            name: input
                .class_names
                .get(c.class_id)
                .cloned()
                .unwrap_or_else(|| format!("class_{}", c.class_id)),
            n_gt: c.n_gt,
            n_det: c.n_det,
            ap50: c.ap,
            ap50_95: per.iter().map(|t| t.classes[k].ap).sum::<f64>() / n_t,
        })
        .collect();
    let map_50_95 = per.iter().map(|t| t.map).sum::<f64>() / n_t;
    Ok(EvalReport {
        tool: String::new(),
        version: String::new(),
        config: Value::Null,
        ap_mode: input.mode,
        thresholds: input.thresholds.to_vec(),
        classes,
        map_50: at50.map,
        map_50_95,
        per_threshold: per
            .iter()
            .map(|t| ThresholdReport {
                iou_t: t.iou_t,
                map: t.map,
            })
            .collect(),
        matches: match_details(input.dets, input.gts)?,
        dataset: None,
        timings_ms: None,
    })
}

fn match_details(dets: &[Detection], gts: &[GroundTruth]) -> Result<Vec<ImageMatches>> {
    let mut by_image: BTreeMap<String, Vec<(usize, usize, MatchDetail)>> = BTreeMap::new();
    for class in evaluated_classes(gts) {
        let d: Vec<Detection> = dets.iter().filter(|x| x.class_id == class).cloned().collect();
        let g: Vec<&GroundTruth> = gts.iter().filter(|x| x.class_id == class).collect();
        let owned: Vec<GroundTruth> = g.iter().map(|x| (*x).clone()).collect();
        let m = match_detections(&d, &owned, 0.5)?;
        for (rank, &di) in m.order.iter().enumerate() {
            let image = d[di].image_id.as_str();
            let gt_index = m.matched_gt[rank].map(|gi| g[..gi].iter().filter(|x| x.image_id == image).count());
            by_image.entry(image.to_string()).or_default().push((
                class,
                rank,
                MatchDetail {
                    class_id: class,
                    confidence: m.confidences[rank],
                    tp: m.tp[rank],
                    iou: m.best_iou[rank],
                    gt_index,
                },
            ));
        }
    }
    Ok(by_image
        .into_iter()
        .map(|(id, mut v)| {
            v.sort_by_key(|&(c, r, _)| (c, r));
            ImageMatches {
                image_id: id,
                detections: v.into_iter().map(|(_, _, d)| d).collect(),
            }
        })
        .collect())
}

/// Structural check of a serialized [`EvalReport`]. Returns the first problem found.
pub fn validate_eval_report(v: &Value) -> std::result::Result<(), String> {
    let obj = v.as_object().ok_or("report is not an object")?;
    let need = |key: &str| obj.get(key).ok_or_else(|| format!("missing key `{key}`"));
    for key in ["tool", "version", "ap_mode"] {
        need(key)?.as_str().ok_or_else(|| format!("`{key}` is not a string"))?;
    }
    need("config")?;
    for key in ["map50", "map50_95"] {
        let x = need(key)?.as_f64().ok_or_else(|| format!("`{key}` is not a number"))?;
        if !(0.0..=1.0).contains(&x) {
            return Err(format!("`{key}` = {x} is outside [0, 1]"));
        }
    }
    let thresholds = need("thresholds")?.as_array().ok_or("`thresholds` is not an array")?;
    if thresholds.is_empty()
        || thresholds
            .iter()
            .any(|t| !t.as_f64().is_some_and(|t| t > 0.0 && t <= 1.0))
    {
        return Err("`thresholds` must be a non-empty list in (0, 1]".into());
    }
    let classes = need("classes")?.as_array().ok_or("`classes` is not an array")?;
    if classes.is_empty() {
        return Err("`classes` is empty".into());
    }
    for c in classes {
        for key in ["class_id", "n_gt", "n_det"] {
            c.get(key)
                .and_then(Value::as_u64)
                .ok_or_else(|| format!("class entry lacks integer `{key}`"))?;
        }
        for key in ["ap50", "ap50_95"] {
            let ap = c
                .get(key)
                .and_then(Value::as_f64)
                .ok_or_else(|| format!("class entry lacks `{key}`"))?;
            if !(0.0..=1.0).contains(&ap) {
                return Err(format!("class AP {ap} is outside [0, 1]"));
            }
        }
    }
    let per = need("per_threshold")?
        .as_array()
        .ok_or("`per_threshold` is not an array")?;
    if per.len() != thresholds.len() {
        return Err("`per_threshold` length differs from `thresholds`".into());
    }
    for m in need("matches")?.as_array().ok_or("`matches` is not an array")? {
        m.get("image_id")
            .and_then(Value::as_str)
            .ok_or("match entry lacks `image_id`")?;
        m.get("detections")
            .and_then(Value::as_array)
            .ok_or("match entry lacks `detections`")?;
    }
    need("dataset")?;
    need("timings_ms")?;
    Ok(())
}
