//! PPM images, YOLO-style text annotations, synthetic datasets and label
//! statistics.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{Detection, GroundTruth};
use crate::focal::BBox;
use crate::tensor::FeatureMap;

pub const IMAGES_DIR: &str = "images";
pub const LABELS_DIR: &str = "labels";
pub const CLASSES_FILE: &str = "classes.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PpmEncoding {
    /// P3
    Ascii,
    /// P6
    Binary,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl Cursor<'_> {
    fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.source.into(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u64> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(if start >= self.bytes.len() {
                self.fail(start, format!("unexpected end of file while reading {what}"))
            } else {
                self.fail(
                    start,
                    format!("expected {what}, found byte 0x{:02x}", self.bytes[start]),
                )
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.fail(start, format!("{what} does not fit in 64 bits")))
    }
}

/// Decodes a P3 or P6 image to `(3, H, W)` in `[0, 1]`. `source` names the
/// input in error messages.
pub fn decode_ppm(bytes: &[u8], source: &str) -> Result<FeatureMap> {
    let mut cur = Cursor { bytes, pos: 0, source };
    let binary = match bytes.get(..2) {
        Some(b"P6") => true,
        Some(b"P3") => false,
        _ => return Err(cur.fail(0, "bad magic, expected P3 or P6")),
    };
    cur.pos = 2;
    if cur.pos < bytes.len() && !bytes[cur.pos].is_ascii_whitespace() && bytes[cur.pos] != b'#' {
        return Err(cur.fail(2, "bad magic, expected P3 or P6"));
    }
    cur.skip_space();
    let wpos = cur.pos;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    if width == 0 || height == 0 {
        return Err(cur.fail(wpos, format!("image size {width}x{height} is empty")));
    }
    cur.skip_space();
    let mpos = cur.pos;
    let maxval = cur.number("maxval")?;
    if !(1..=65535).contains(&maxval) {
        return Err(cur.fail(mpos, format!("maxval {maxval} is outside [1, 65535]")));
    }
    let (w, h) = (width as usize, height as usize);
    let n = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| cur.fail(wpos, "image size overflows"))?;
    let mut samples = Vec::with_capacity(n);
    if binary {
        if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
            return Err(cur.fail(cur.pos, "expected a single whitespace byte before the raster"));
        }
        cur.pos += 1;
        let width_bytes = if maxval > 255 { 2 } else { 1 };
        let need = n * width_bytes;
        let have = bytes.len() - cur.pos;
        if have < need {
            return Err(cur.fail(bytes.len(), format!("truncated raster: {have} of {need} bytes")));
        }
        for k in 0..n {
            let at = cur.pos + k * width_bytes;
            let v = if width_bytes == 2 {
                u16::from_be_bytes([bytes[at], bytes[at + 1]]) as u64
            } else {
                bytes[at] as u64
            };
            if v > maxval {
                return Err(cur.fail(at, format!("sample {v} exceeds maxval {maxval}")));
            }
            samples.push(v);
        }
    } else {
        for _ in 0..n {
            cur.skip_space();
            let at = cur.pos;
            let v = cur.number("sample")?;
            if v > maxval {
                return Err(cur.fail(at, format!("sample {v} exceeds maxval {maxval}")));
            }
            samples.push(v);
        }
    }
    let scale = maxval as f64;
    let data = (0..3)
        .flat_map(|c| (0..h * w).map(move |p| (c, p)))
        .map(|(c, p)| samples[p * 3 + c] as f64 / scale)
        .collect();
    FeatureMap::new(vec![3, h, w], data)
}

fn quantize(img: &FeatureMap) -> Result<(usize, usize, Vec<u8>)> {
    let (c, h, w) = img.dims3()?;
    if c != 3 {
        return Err(Error::dim(format!("PPM output needs 3 channels, got {c}")));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            let v = img.data()[ch * plane + p];
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InputDomain(format!("pixel value {v} is outside [0, 1]")));
            }
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok((h, w, out))
}

/// Encodes at maxval 255.
pub fn encode_ppm(img: &FeatureMap, encoding: PpmEncoding) -> Result<Vec<u8>> {
    let (h, w, samples) = quantize(img)?;
    Ok(match encoding {
        PpmEncoding::Binary => {
            let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
            out.extend_from_slice(&samples);
            out
        }
        PpmEncoding::Ascii => {
            let mut s = format!("P3\n{w} {h}\n255\n");
            for row in samples.chunks(3 * w) {
                let line: Vec<String> = row.iter().map(u8::to_string).collect();
                s.push_str(&line.join(" "));
                s.push('\n');
            }
            s.into_bytes()
        }
    })
}

pub fn load_image_ppm(path: &Path) -> Result<FeatureMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, &path.display().to_string())
}

pub fn save_image_ppm(path: &Path, img: &FeatureMap) -> Result<()> {
    let bytes = encode_ppm(img, PpmEncoding::Binary)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Image id with its annotations.
pub type ImageLabels = (String, Vec<LabelRecord>);

/// One annotation in normalized center form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LabelRecord {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl LabelRecord {
    /// Normalized corners, clamped to the unit square.
    pub fn to_bbox(&self) -> BBox {
        BBox {
            x1: (self.cx - self.w / 2.0).clamp(0.0, 1.0),
            y1: (self.cy - self.h / 2.0).clamp(0.0, 1.0),
            x2: (self.cx + self.w / 2.0).clamp(0.0, 1.0),
            y2: (self.cy + self.h / 2.0).clamp(0.0, 1.0),
        }
    }

    pub fn to_ground_truth(&self, image_id: &str) -> GroundTruth {
        GroundTruth {
            image_id: image_id.to_string(),
            class_id: self.class_id,
            bbox: self.to_bbox(),
        }
    }

    fn validate(&self, n_classes: Option<usize>) -> std::result::Result<(), String> {
        if let Some(n) = n_classes {
            if self.class_id >= n {
                return Err(format!("class {} is not below the class count {n}", self.class_id));
            }
        }
        for (name, v) in [("cx", self.cx), ("cy", self.cy), ("w", self.w), ("h", self.h)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} = {v} is outside [0, 1]"));
            }
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(format!("box size {}x{} is not positive", self.w, self.h));
        }
        Ok(())
    }
}

fn parse_rows(text: &str, source: &str, arity: usize) -> Result<Vec<(usize, usize, Vec<f64>)>> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: source.into(),
            line: lineno,
            message,
        };
        if fields.len() != arity {
            return Err(parse_err(format!("expected {arity} fields, found {}", fields.len())));
        }
        let class_id = fields[0]
            .parse::<usize>()
            .map_err(|_| parse_err(format!("class id {:?} is not a non-negative integer", fields[0])))?;
        let values = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(format!("{f:?} is not a finite number")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((lineno, class_id, values));
    }
    Ok(rows)
}

/// Parses `class cx cy w h` lines. `n_classes` of `None` skips the class bound.
pub fn parse_labels(text: &str, source: &str, n_classes: Option<usize>) -> Result<Vec<LabelRecord>> {
    parse_rows(text, source, 5)?
        .into_iter()
        .map(|(line, class_id, v)| {
            let rec = LabelRecord {
                class_id,
                cx: v[0],
                cy: v[1],
                w: v[2],
                h: v[3],
            };
            rec.validate(n_classes).map_err(|message| Error::Validation {
                path: source.into(),
                line,
                message,
            })?;
            Ok(rec)
        })
        .collect()
}

pub fn load_labels(path: &Path, n_classes: Option<usize>) -> Result<Vec<LabelRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, &path.display().to_string(), n_classes)
}

pub fn format_labels(records: &[LabelRecord]) -> String {
    records
        .iter()
        .map(|r| format!("{} {} {} {} {}\n", r.class_id, r.cx, r.cy, r.w, r.h))
        .collect()
}

pub fn save_labels(path: &Path, records: &[LabelRecord]) -> Result<()> {
    fs::write(path, format_labels(records)).map_err(|e| Error::io(path, e))
}

/// Parses `class cx cy w h confidence` lines into detections for `image_id`.
pub fn parse_detections(text: &str, source: &str, image_id: &str) -> Result<Vec<Detection>> {
    parse_rows(text, source, 6)?
        .into_iter()
        .map(|(line, class_id, v)| {
            let rec = LabelRecord {
                class_id,
                cx: v[0],
                cy: v[1],
                w: v[2],
                h: v[3],
            };
            let invalid = |message| Error::Validation {
                path: source.into(),
                line,
                message,
            };
            rec.validate(None).map_err(invalid)?;
            if !(0.0..=1.0).contains(&v[4]) {
                return Err(invalid(format!("confidence {} is outside [0, 1]", v[4])));
            }
            Ok(Detection {
                image_id: image_id.to_string(),
                class_id,
                bbox: rec.to_bbox(),
                confidence: v[4],
            })
        })
        .collect()
}

pub fn format_detections(dets: &[(LabelRecord, f64)]) -> String {
    dets.iter()
        .map(|(r, c)| format!("{} {} {} {} {} {}\n", r.class_id, r.cx, r.cy, r.w, r.h, c))
        .collect()
}

/// Files in `dir` with the given extension, sorted by name. A missing
/// directory yields an empty list.
pub fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Label records from a directory of `<image_id>.txt` files, by image id.
pub fn load_label_dir(dir: &Path) -> Result<Vec<ImageLabels>> {
    list_files(dir, "txt")?
        .into_iter()
        .map(|path| Ok((stem(&path), load_labels(&path, None)?)))
        .collect()
}

/// Ground truths from a directory of `<image_id>.txt` label files.
pub fn load_ground_truth_dir(dir: &Path) -> Result<Vec<GroundTruth>> {
    Ok(load_label_dir(dir)?
        .iter()
        .flat_map(|(id, recs)| recs.iter().map(move |r| r.to_ground_truth(id)))
        .collect())
}

/// Detections from a directory of `<image_id>.txt` files.
pub fn load_detection_dir(dir: &Path) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for path in list_files(dir, "txt")? {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        out.extend(parse_detections(&text, &path.display().to_string(), &stem(&path))?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub image: FeatureMap,
    pub annotations: Vec<LabelRecord>,
}

pub fn load_class_names(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join(CLASSES_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Writes `images/<id>.ppm`, `labels/<id>.txt` and `classes.txt`.
pub fn write_dataset(dir: &Path, items: &[LabeledImage], class_names: &[String]) -> Result<()> {
    let (img_dir, lbl_dir) = (dir.join(IMAGES_DIR), dir.join(LABELS_DIR));
    for d in [&img_dir, &lbl_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let names: String = class_names.iter().map(|n| format!("{n}\n")).collect();
    let cpath = dir.join(CLASSES_FILE);
    fs::write(&cpath, names).map_err(|e| Error::io(&cpath, e))?;
    for item in items {
        save_image_ppm(&img_dir.join(format!("{}.ppm", item.id)), &item.image)?;
        save_labels(&lbl_dir.join(format!("{}.txt", item.id)), &item.annotations)?;
    }
    Ok(())
}

/// Annotations for every image or label file in a dataset directory, by id. Images
/// without a label file have no annotations. Pixels are not decoded.
pub fn load_dataset_labels(dir: &Path) -> Result<(Vec<ImageLabels>, Vec<String>)> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let names = load_class_names(dir)?;
    let bound = (!names.is_empty()).then_some(names.len());
    let mut out = Vec::new();
    let mut ids: Vec<String> = list_files(&dir.join(IMAGES_DIR), "ppm")?
        .iter()
        .chain(&list_files(&dir.join(LABELS_DIR), "txt")?)
        .map(|p| stem(p))
        .collect();
    ids.sort();
    ids.dedup();
    for id in ids {
        let lbl = dir.join(LABELS_DIR).join(format!("{id}.txt"));
        let recs = if lbl.exists() {
            load_labels(&lbl, bound)?
        } else {
            Vec::new()
        };
        out.push((id, recs));
    }
    Ok((out, names))
}

pub fn load_dataset(dir: &Path) -> Result<(Vec<LabeledImage>, Vec<String>)> {
    let (labels, names) = load_dataset_labels(dir)?;
    let items = labels
        .into_iter()
        .map(|(id, annotations)| {
            let image = load_image_ppm(&dir.join(IMAGES_DIR).join(format!("{id}.ppm")))?;
            Ok(LabeledImage { id, image, annotations })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((items, names))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassCount {
    pub class_id: usize,
    pub name: String,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScatterPoint {
    pub class_id: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DatasetStats {
    pub n_images: usize,
    pub n_annotations: usize,
    /// One entry per class id up to the largest seen or named.
    pub class_counts: Vec<ClassCount>,
    /// Box centers `(cx, cy)`, ordered by class then coordinates.
    pub centers: Vec<ScatterPoint>,
    /// Box sizes `(w, h)`, in the same order as `centers`.
    pub sizes: Vec<ScatterPoint>,
    /// `instances_per_image[k]` images carry exactly `k` annotations.
    pub instances_per_image: Vec<usize>,
}

impl DatasetStats {
    pub fn from_annotations<'a>(
        per_image: impl IntoIterator<Item = &'a [LabelRecord]>,
        class_names: &[String],
    ) -> Self {
        let mut all: Vec<LabelRecord> = Vec::new();
        let mut per_count: Vec<usize> = Vec::new();
        let mut n_images = 0;
        for recs in per_image {
            n_images += 1;
            if per_count.len() <= recs.len() {
                per_count.resize(recs.len() + 1, 0);
            }
            per_count[recs.len()] += 1;
            all.extend_from_slice(recs);
        }
        all.sort_by(|a, b| {
            a.class_id
                .cmp(&b.class_id)
                .then(a.cx.total_cmp(&b.cx))
                .then(a.cy.total_cmp(&b.cy))
                .then(a.w.total_cmp(&b.w))
                .then(a.h.total_cmp(&b.h))
        });
        let n_classes = all
            .iter()
            .map(|r| r.class_id + 1)
            .max()
            .unwrap_or(0)
            .max(class_names.len());
        let mut counts = vec![0usize; n_classes];
        for r in &all {
            counts[r.class_id] += 1;
        }
        Self {
            n_images,
            n_annotations: all.len(),
            class_counts: counts
                .into_iter()
                .enumerate()
                .map(|(c, count)| ClassCount {
                    class_id: c,
                    name: class_names.get(c).cloned().unwrap_or_else(|| format!("class_{c}")),
                    count,
                })
                .collect(),
            centers: all
                .iter()
                .map(|r| ScatterPoint {
                    class_id: r.class_id,
                    x: r.cx,
                    y: r.cy,
                })
                .collect(),
            sizes: all
                .iter()
                .map(|r| ScatterPoint {
                    class_id: r.class_id,
                    x: r.w,
                    y: r.h,
                })
                .collect(),
            instances_per_image: per_count,
        }
    }
}

pub fn dataset_stats(items: &[LabeledImage], class_names: &[String]) -> DatasetStats {
    DatasetStats::from_annotations(items.iter().map(|i| i.annotations.as_slice()), class_names)
}

/// Fill color of each class, on the 8-bit grid.
pub fn class_signature(class_id: usize) -> [f64; 3] {
    let levels = [60u8, 130, 200, 250];
    let pick = |k: usize| levels[(class_id * k + class_id / 4 + k) % 4] as f64 / 255.0;
    [pick(1), pick(2), pick(3)]
}

pub fn default_class_names(n: usize) -> Vec<String> {
    (0..n).map(|c| format!("class_{c}")).collect()
}

/// Deterministic images with one to three filled rectangles (even classes)
/// or ellipses (odd classes) over a dark noisy background. Pixel values are
/// multiples of 1/255 so they survive an 8-bit PPM round trip.
pub fn synth_dataset(seed: u64, n_images: usize, n_classes: usize, size: usize) -> Result<Vec<LabeledImage>> {
    if size < 16 {
        return Err(Error::param(format!("image size {size} is below 16")));
    }
    if n_classes == 0 {
        return Err(Error::param("class count must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = size * size;
    let mut out = Vec::with_capacity(n_images);
    for idx in 0..n_images {
        let mut data: Vec<f64> = (0..3 * plane)
            .map(|_| rng.random_range(0..40u8) as f64 / 255.0)
            .collect();
        let n_obj = rng.random_range(1..=3usize);
        let mut annotations = Vec::with_capacity(n_obj);
        for _ in 0..n_obj {
            let class_id = rng.random_range(0..n_classes);
            let (lo, hi) = (size / 8, size / 3);
            let bw = rng.random_range(lo..=hi);
            let bh = rng.random_range(lo..=hi);
            let x0 = rng.random_range(0..=size - bw);
            let y0 = rng.random_range(0..=size - bh);
            let color = class_signature(class_id);
            let (cx, cy) = (x0 as f64 + bw as f64 / 2.0, y0 as f64 + bh as f64 / 2.0);
            for i in y0..y0 + bh {
                for j in x0..x0 + bw {
                    let inside = class_id % 2 == 0 || {
                        let dx = (j as f64 + 0.5 - cx) / (bw as f64 / 2.0);
                        let dy = (i as f64 + 0.5 - cy) / (bh as f64 / 2.0);
                        dx * dx + dy * dy <= 1.0
                    };
                    if inside {
                        for (c, v) in color.iter().enumerate() {
                            data[c * plane + i * size + j] = *v;
                        }
                    }
                }
            }
            let s = size as f64;
            annotations.push(LabelRecord {
                class_id,
                cx: cx / s,
                cy: cy / s,
                w: bw as f64 / s,
                h: bh as f64 / s,
            });
        }
        out.push(LabeledImage {
            id: format!("img_{idx:04}"),
            image: FeatureMap::new(vec![3, size, size], data)?,
            annotations,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_red_pixel() {
        let img = decode_ppm(b"P6\n1 1\n255\n\xff\x00\x00", "mem").unwrap();
        assert_eq!(img.shape(), &[3, 1, 1]);
        assert_eq!(img.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn ascii_and_binary_agree() {
        let p3 = b"P3\n# two by one\n2 1\n255\n10 20 30   40 50 60\n";
        let p6 = b"P6 2 1 255\n\x0a\x14\x1e\x28\x32\x3c";
        assert_eq!(decode_ppm(p3, "a").unwrap(), decode_ppm(p6, "b").unwrap());
    }

    #[test]
    fn sixteen_bit_and_small_maxval() {
        let img = decode_ppm(b"P6 1 1 65535\n\xff\xff\x80\x00\x00\x00", "m").unwrap();
        assert_eq!(img.data(), &[1.0, 32768.0 / 65535.0, 0.0]);
        let img = decode_ppm(b"P3 1 1 1\n1 0 1", "m").unwrap();
        assert_eq!(img.data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn gradient_round_trip_is_bit_exact() {
        let img = FeatureMap::from_fn3(3, 2, 2, |c, i, j| ((c * 4 + i * 2 + j) * 20) as f64 / 255.0);
        for enc in [PpmEncoding::Binary, PpmEncoding::Ascii] {
            let back = decode_ppm(&encode_ppm(&img, enc).unwrap(), "rt").unwrap();
            assert_eq!(back, img);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.ppm");
        save_image_ppm(&p, &img).unwrap();
        assert_eq!(load_image_ppm(&p).unwrap(), img);
    }

    fn format_offset(bytes: &[u8]) -> u64 {
        match decode_ppm(bytes, "bad") {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn format_errors_carry_offsets() {
        assert_eq!(format_offset(b"P5 1 1 255\n\x00"), 0);
        assert_eq!(format_offset(b"P6 1 1 0\n"), 7);
        assert_eq!(format_offset(b"P6 1 1 70000\n"), 7);
        assert_eq!(format_offset(b"P6 2 1 255\n\x00\x00\x00"), 14);
        assert_eq!(format_offset(b"P3 1 1 255\n1 2"), 14);
        assert_eq!(format_offset(b"P3 1 1 9\n1 2 10"), 13);
        assert_eq!(format_offset(b"P6 x"), 3);
    }

    #[test]
    fn encode_rejects_out_of_range() {
        let img = FeatureMap::filled(&[3, 1, 1], 1.5);
        assert!(encode_ppm(&img, PpmEncoding::Binary).is_err());
        assert!(encode_ppm(&FeatureMap::zeros(&[1, 1, 1]), PpmEncoding::Binary).is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_image_ppm(Path::new("/definitely/not/here.ppm")).unwrap_err();
        assert!(err.to_string().contains("/definitely/not/here.ppm"));
    }

    #[test]
    fn label_examples() {
        let recs = parse_labels("0 0.5 0.5 0.2 0.2\n", "l", Some(1)).unwrap();
        assert_eq!(
            recs,
            vec![LabelRecord {
                class_id: 0,
                cx: 0.5,
                cy: 0.5,
                w: 0.2,
                h: 0.2
            }]
        );
        assert!(parse_labels("", "l", Some(1)).unwrap().is_empty());
        assert!(parse_labels("\n  \n", "l", Some(1)).unwrap().is_empty());
        let err = parse_labels("0 0.5 0.5 0.2 0.2\n1 0.5\n0 0.1 0.1 0.1 0.1\n", "l", Some(2)).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn label_validation_errors() {
        assert!(matches!(
            parse_labels("3 0.5 0.5 0.2 0.2", "l", Some(3)),
            Err(Error::Validation { line: 1, .. })
        ));
        assert!(matches!(
            parse_labels("0 1.5 0.5 0.2 0.2", "l", None),
            Err(Error::Validation { .. })
        ));
        assert!(matches!(
            parse_labels("0 0.5 0.5 0 0.2", "l", None),
            Err(Error::Validation { .. })
        ));
        assert!(matches!(
            parse_labels("-1 0.5 0.5 0.2 0.2", "l", None),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            parse_labels("0 0.5 nan 0.2 0.2", "l", None),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn corners_are_clamped() {
        let r = LabelRecord {
            class_id: 0,
            cx: 0.05,
            cy: 0.95,
            w: 0.2,
            h: 0.2,
        };
        let b = r.to_bbox();
        assert_eq!((b.x1, b.y2), (0.0, 1.0));
        assert!((b.x2 - 0.15).abs() < 1e-15 && (b.y1 - 0.85).abs() < 1e-15);
    }

    #[test]
    fn detection_rows() {
        let d = parse_detections("2 0.5 0.5 0.2 0.4 0.75\n", "d", "img").unwrap();
        assert_eq!(d[0].class_id, 2);
        assert_eq!(d[0].confidence, 0.75);
        assert_eq!(d[0].image_id, "img");
        assert!(parse_detections("2 0.5 0.5 0.2 0.4\n", "d", "img").is_err());
        assert!(parse_detections("2 0.5 0.5 0.2 0.4 1.2\n", "d", "img").is_err());
    }

    #[test]
    fn stats_examples() {
        let empty = dataset_stats(&[], &[]);
        assert_eq!(empty, DatasetStats::default());
        let named = dataset_stats(&[], &default_class_names(2));
        assert!(named.class_counts.iter().all(|c| c.count == 0));

        let rec = |cx| LabelRecord {
            class_id: 1,
            cx,
            cy: 0.5,
            w: 0.1,
            h: 0.1,
        };
        let a = [rec(0.1), rec(0.2)];
        let b = [rec(0.3)];
        let s = DatasetStats::from_annotations([&a[..], &b[..]], &[]);
        assert_eq!(s.class_counts[1].count, 3);
        assert_eq!(s.class_counts[0].count, 0);
        assert_eq!(s.centers.len(), 3);
        assert_eq!(s.sizes.len(), 3);
        assert_eq!(s.instances_per_image, vec![0, 1, 1]);
        assert_eq!(s, DatasetStats::from_annotations([&b[..], &a[..]], &[]));
    }

    #[test]
    fn synth_is_deterministic_and_valid() {
        assert!(synth_dataset(1, 0, 3, 16).unwrap().is_empty());
        assert!(synth_dataset(1, 1, 3, 8).is_err());
        let a = synth_dataset(42, 5, 3, 32).unwrap();
        let b = synth_dataset(42, 5, 3, 32).unwrap();
        assert_eq!(a, b);
        for item in &a {
            let back = parse_labels(&format_labels(&item.annotations), "s", Some(3)).unwrap();
            assert_eq!(back, item.annotations);
            assert_eq!(
                decode_ppm(&encode_ppm(&item.image, PpmEncoding::Binary).unwrap(), "s").unwrap(),
                item.image
            );
        }
        assert_ne!(a, synth_dataset(43, 5, 3, 32).unwrap());
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let items = synth_dataset(7, 3, 2, 16).unwrap();
        write_dataset(dir.path(), &items, &default_class_names(2)).unwrap();
        let (back, names) = load_dataset(dir.path()).unwrap();
        assert_eq!(back, items);
        assert_eq!(names, default_class_names(2));
        let gts = load_ground_truth_dir(&dir.path().join(LABELS_DIR)).unwrap();
        assert_eq!(gts.len(), items.iter().map(|i| i.annotations.len()).sum::<usize>());
    }

    fn arb_record() -> impl Strategy<Value = LabelRecord> {
        (0usize..5, 0.0..=1.0f64, 0.0..=1.0f64, 1e-6..=1.0f64, 1e-6..=1.0f64)
            .prop_map(|(class_id, cx, cy, w, h)| LabelRecord { class_id, cx, cy, w, h })
    }

    proptest! {
        #[test]
        fn labels_round_trip(recs in proptest::collection::vec(arb_record(), 0..10)) {
            prop_assert_eq!(parse_labels(&format_labels(&recs), "p", Some(5)).unwrap(), recs);
        }

        #[test]
        fn stats_permutation_invariant(recs in proptest::collection::vec(arb_record(), 0..12).prop_shuffle(), seed in 0usize..4) {
            let mut sorted = recs.clone();
            sorted.rotate_left(if recs.is_empty() { 0 } else { seed % recs.len() });
            let split = |v: &[LabelRecord]| v.chunks(3).map(|c| c.to_vec()).collect::<Vec<_>>();
            let (p, q) = (split(&recs), split(&sorted));
            let s1 = DatasetStats::from_annotations(p.iter().map(Vec::as_slice), &[]);
            let s2 = DatasetStats::from_annotations(q.iter().map(Vec::as_slice), &[]);
            prop_assert_eq!(&s1.class_counts, &s2.class_counts);
            prop_assert_eq!(s1.centers, s2.centers);
            prop_assert_eq!(s1.n_annotations, s1.class_counts.iter().map(|c| c.count).sum::<usize>());
        }
    }
}
