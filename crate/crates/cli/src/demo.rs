//! Seeded forward chain: gamma, stem, clue merge, ODSS block, CARAFE.
//!
//! Every stage reads the parsed text dump of the previous stage, so a replay
//! from the dumps reproduces each stage exactly.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use detkit_core::blocks::{odss_block, simple_stem, vision_clue_merge, ClueMergeWeights, OdssWeights, StemWeights};
use detkit_core::carafe::{carafe_forward, CarafeWeights};
use detkit_core::dataset::{dataset_stats, default_class_names, synth_dataset, write_dataset, DatasetStats};
use detkit_core::dump::{format_tensor, load_tensor, parse_tensor};
use detkit_core::gamma::{correct, correct_features, GammaStats};
use detkit_core::report::to_canonical_json;
use detkit_core::weights::{WeightFile, WeightSet};
use detkit_core::{CarafeConfig, FeatureMap, GammaConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::args::DemoArgs;
use crate::config::{gamma_config, pick};
use crate::{CliError, Context, TOOL_NAME, TOOL_VERSION};

pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";
pub const SSM_STATE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoSettings {
    pub seed: u64,
    pub size: usize,
    pub channels: usize,
    pub images: usize,
    pub gamma_per_upsample: bool,
    pub gamma: GammaConfig,
}

impl DemoSettings {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.size < 16 || !self.size.is_multiple_of(8) {
            return Err(CliError::Input(format!(
                "demo size {} must be a multiple of 8 and at least 16",
                self.size
            )));
        }
        if self.channels == 0 || self.images == 0 {
            return Err(CliError::Input("demo channels and images must be positive".into()));
        }
        self.gamma.validate()?;
        Ok(())
    }

    /// Width after the clue merge, carried through ODSS and CARAFE.
    pub fn wide(&self) -> usize {
        2 * self.channels
    }

    pub fn carafe(&self) -> CarafeConfig {
        CarafeConfig::for_channels(self.wide())
    }

    /// Stage names with the shapes their outputs must have.
    pub fn stages(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (s, c, w) = (self.size, self.channels, self.wide());
        let mut v = vec![
            ("input", vec![3, s, s]),
            ("gamma", vec![3, s, s]),
            ("stem", vec![c, s / 4, s / 4]),
            ("clue_merge", vec![w, s / 8, s / 8]),
            ("odss", vec![w, s / 8, s / 8]),
        ];
        if self.gamma_per_upsample {
            v.push(("feature_gamma", vec![w, s / 8, s / 8]));
        }
        v.push(("carafe", vec![w, s / 4, s / 4]));
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoWeights {
    pub stem: StemWeights,
    pub merge: ClueMergeWeights,
    pub odss: OdssWeights,
    pub carafe: CarafeWeights,
}

impl DemoWeights {
    pub fn random(s: &DemoSettings) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        rng.set_stream(1);
        let (c, w) = (s.channels, s.wide());
        Self {
            stem: StemWeights::random(&mut rng, 3, c.div_ceil(2), c),
            merge: ClueMergeWeights::random(&mut rng, c, w),
            odss: OdssWeights::random(&mut rng, w, w, SSM_STATE),
            carafe: CarafeWeights::random(&mut rng, w, &s.carafe()),
        }
    }

    pub fn to_file(&self) -> Result<WeightFile, CliError> {
        let mut f = WeightFile::new();
        self.stem.store(&mut f, "stem")?;
        self.merge.store(&mut f, "merge")?;
        self.odss.store(&mut f, "odss")?;
        self.carafe.store(&mut f, "carafe")?;
        Ok(f)
    }

    pub fn from_file(f: &WeightFile) -> Result<Self, CliError> {
        Ok(Self {
            stem: StemWeights::load(f, "stem")?,
            merge: ClueMergeWeights::load(f, "merge")?,
            odss: OdssWeights::load(f, "odss")?,
            carafe: CarafeWeights::load(f, "carafe")?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub file: String,
    pub input: Option<String>,
    pub shape: Vec<usize>,
    pub expected_shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DemoManifest {
    pub tool: String,
    pub version: String,
    pub settings: DemoSettings,
    pub image_id: String,
    pub gamma: GammaStats,
    pub stages: Vec<StageRecord>,
    pub weights: String,
    pub dataset: DatasetStats,
    pub timings_ms: Option<BTreeMap<String, f64>>,
}

/// Output of one stage given its (already dumped and parsed) input.
pub fn apply_stage(
    name: &str,
    input: &FeatureMap,
    w: &DemoWeights,
    s: &DemoSettings,
) -> Result<(FeatureMap, Option<GammaStats>), CliError> {
    Ok(match name {
        "gamma" => {
            let r = correct(input, &s.gamma)?;
            let stats = r.stats();
            (r.corrected, Some(stats))
        }
        "stem" => (simple_stem(input, &w.stem)?, None),
        "clue_merge" => (vision_clue_merge(input, &w.merge)?, None),
        "odss" => (odss_block(input, &w.odss)?, None),
        "feature_gamma" => {
            let (y, stats) = correct_features(input, &s.gamma)?;
            (y, Some(stats))
        }
        "carafe" => (carafe_forward(input, &w.carafe, &s.carafe())?, None),
        other => return Err(CliError::Input(format!("unknown demo stage `{other}`"))),
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

pub fn run_demo(s: &DemoSettings, out: &Path, timings: bool) -> Result<DemoManifest, CliError> {
    s.validate()?;
    let started = Instant::now();
    let mut times = BTreeMap::new();
    std::fs::create_dir_all(out.join("stages"))
        .map_err(|e| CliError::Input(format!("cannot create {}: {e}", out.display())))?;
    let items = synth_dataset(s.seed, s.images, 3, s.size)?;
    let names = default_class_names(3);
    write_dataset(&out.join("dataset"), &items, &names)?;
    let weights = DemoWeights::random(s);
    weights.to_file()?.save(&out.join(WEIGHTS))?;

    let mut stages = Vec::new();
    let mut gamma = None;
    let mut current = items[0].image.clone();
    let mut prev: Option<String> = None;
    for (k, (name, expected)) in s.stages().into_iter().enumerate() {
        let t0 = Instant::now();
        let output = if name == "input" {
            current.clone()
        } else {
            let (y, stats) = apply_stage(name, &current, &weights, s)?;
            if name == "gamma" {
                gamma = stats;
            }
            y
        };
        let file = format!("stages/{k:02}_{name}.txt");
        let text = format_tensor(&output);
        write(&out.join(&file), text.as_bytes())?;
        if output.shape() != expected.as_slice() {
            return Err(CliError::Verification(format!(
                "stage {name} produced {:?}, expected {expected:?}",
                output.shape()
            )));
        }
        stages.push(StageRecord {
            name: name.into(),
            file: file.clone(),
            input: prev.replace(file),
            shape: output.shape().to_vec(),
            expected_shape: expected,
        });
        current = parse_tensor(&text, name)?;
        times.insert(name.to_string(), t0.elapsed().as_secs_f64() * 1e3);
    }
    times.insert("total".into(), started.elapsed().as_secs_f64() * 1e3);
    let manifest = DemoManifest {
        tool: TOOL_NAME.into(),
        version: TOOL_VERSION.into(),
        settings: s.clone(),
        image_id: items[0].id.clone(),
        gamma: gamma.expect("gamma stage always runs"),
        stages,
        weights: WEIGHTS.into(),
        dataset: dataset_stats(&items, &names),
        timings_ms: timings.then_some(times),
    };
    write(&out.join(MANIFEST), to_canonical_json(&manifest)?.as_bytes())?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplayOutcome {
    pub stages: Vec<(String, f64)>,
    pub max_deviation: f64,
}

/// Recomputes each stage from the dumped input of a demo directory and
/// compares with the dumped output after the same text rounding.
pub fn replay_demo(dir: &Path) -> Result<ReplayOutcome, CliError> {
    let path = dir.join(MANIFEST);
    let text =
        std::fs::read_to_string(&path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let bad = |e: serde_json::Error| CliError::Input(format!("{}: {e}", path.display()));
    let settings: DemoSettings = serde_json::from_value(v["settings"].clone()).map_err(bad)?;
    let stages: Vec<StageRecord> = serde_json::from_value(v["stages"].clone()).map_err(bad)?;
    let weights = DemoWeights::from_file(&WeightFile::load(&dir.join(WEIGHTS))?)?;
    let mut out = Vec::new();
    let mut worst = 0.0f64;
    for st in &stages {
        let Some(input) = &st.input else { continue };
        let x = load_tensor(&dir.join(input))?;
        let stored = load_tensor(&dir.join(&st.file))?;
        let (y, _) = apply_stage(&st.name, &x, &weights, &settings)?;
        let y = parse_tensor(&format_tensor(&y), &st.name)?;
        let dev = if y.shape() == stored.shape() {
            y.max_abs_diff(&stored)
        } else {
            f64::INFINITY
        };
        worst = worst.max(dev);
        out.push((st.name.clone(), dev));
    }
    Ok(ReplayOutcome {
        stages: out,
        max_deviation: worst,
    })
}

pub fn command(ctx: &mut Context, a: DemoArgs) -> Result<(), CliError> {
    if let Some(dir) = &a.replay {
        let r = replay_demo(dir)?;
        for (name, dev) in &r.stages {
            ctx.say(&format!("{name}: max deviation {dev:e}"))?;
        }
        return if r.max_deviation == 0.0 {
            Ok(())
        } else {
            Err(CliError::Verification(format!(
                "replay deviation {:e}",
                r.max_deviation
            )))
        };
    }
    let out = ctx.require_out("the demo bundle")?;
    let f = &ctx.file.demo;
    let settings = DemoSettings {
        seed: ctx.seed,
        size: pick(a.size, f.size, 32),
        channels: pick(a.channels, f.channels, 8),
        images: pick(a.images, f.images, 4),
        gamma_per_upsample: a.gamma_per_upsample || f.gamma_per_upsample.unwrap_or(false),
        gamma: gamma_config((None, None, None), &ctx.file.gamma)?,
    };
    let m = run_demo(&settings, &out, a.timings)?;
    for st in &m.stages {
        ctx.say(&format!("{}: {:?} -> {}", st.name, st.shape, st.file))?;
    }
    Ok(())
}
