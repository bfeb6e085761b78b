use std::path::Path;
use std::time::Instant;

use detkit_core::carafe::{carafe_forward, channel_compress, predict_kernels, CarafeWeights, KernelNorm};
use detkit_core::dataset::{
    format_detections, load_dataset_labels, load_detection_dir, load_image_ppm, load_label_dir, save_image_ppm,
    synth_dataset, write_dataset, DatasetStats, LabelRecord,
};
use detkit_core::dump::{format_tensor, load_tensor, save_tensor};
use detkit_core::eval::ApMode;
use detkit_core::focal::{
    batch_loss, loss_gradient, numeric_gradient, random_general_position_pair, relative_error, Reduction,
};
use detkit_core::gamma::correct;
use detkit_core::report::{build_eval_report, to_canonical_json, to_canonical_line, EvalInputs};
use detkit_core::ssm::{build_kernel, conv_apply, scan, zoh_discretize, SsmParams};
use detkit_core::weights::{WeightFile, WeightSet};
use detkit_core::FeatureMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::args::{ApModeArg, EvalArgs, GammaArgs, LossArgs, NormArg, SsmArgs, StatsArgs, SynthArgs, UpsampleArgs};
use crate::config::{carafe_config, eval_config, focal_config, gamma_config, pick};
use crate::{CliError, Context, TOOL_NAME, TOOL_VERSION};

pub const SSM_TOLERANCE: f64 = 1e-8;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const GRADIENT_STEP: f64 = 1e-5;
pub const GENERAL_POSITION_MARGIN: f64 = 1e-3;

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Input(format!("cannot create {}: {e}", path.display())))
}

fn require_dir(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Input(format!(
            "{what} directory {} does not exist",
            path.display()
        )))
    }
}

pub fn gamma(ctx: &mut Context, a: GammaArgs) -> Result<(), CliError> {
    let cfg = gamma_config((a.g_min, a.g_max, a.epsilon), &ctx.file.gamma)?;
    let img = load_image_ppm(&a.input)?;
    let out = ctx.require_out("the corrected image")?;
    let res = correct(&img, &cfg)?;
    save_image_ppm(&out, &res.corrected)?;
    let line = to_canonical_line(&json!({
        "gamma": res.gamma,
        "mean": res.gray_mean,
        "std": res.gray_std,
    }))?;
    ctx.say(&line)
}

fn load_features(path: &Path) -> Result<FeatureMap, CliError> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")) {
        Ok(load_image_ppm(path)?)
    } else {
        Ok(load_tensor(path)?)
    }
}

pub fn upsample(ctx: &mut Context, a: UpsampleArgs) -> Result<(), CliError> {
    let x = load_features(&a.input)?;
    let (c_in, h, w) = x.dims3()?;
    let norm = a.norm.map(|n| match n {
        NormArg::Softmax => KernelNorm::Softmax,
        NormArg::Raw => KernelNorm::Raw,
    });
    let cfg = carafe_config(c_in, (a.c_mid, a.k_encoder, a.k_up, a.scale, norm), &ctx.file.carafe)?;
    let weights = match &a.weights {
        Some(p) => {
            let wf = WeightFile::load(p)?;
            let w = CarafeWeights::load(&wf, "carafe")?;
            w.validate(&cfg)?;
            w
        }
        None => CarafeWeights::random(&mut ChaCha8Rng::seed_from_u64(ctx.seed), c_in, &cfg),
    };
    let y = carafe_forward(&x, &weights, &cfg)?;
    let field = predict_kernels(&channel_compress(&x, &weights)?, &weights, &cfg)?;
    match ctx.out.clone() {
        Some(out) => {
            save_tensor(&out, &y)?;
            let line = to_canonical_line(&json!({
                "input_shape": [c_in, h, w],
                "output_shape": y.shape(),
                "kernel_sum_error": format!("{:.3e}", field.max_normalization_error()),
                "config": cfg,
            }))?;
            ctx.say(&line)
        }
        None => {
            let text = format_tensor(&y);
            ctx.say(text.trim_end())
        }
    }
}

#[derive(Serialize)]
struct CheckReport {
    tool: &'static str,
    version: &'static str,
    check: &'static str,
    seed: u64,
    config: serde_json::Value,
    max_deviation: f64,
    max_deviation_sci: String,
    tolerance: f64,
    tolerance_sci: String,
    pass: bool,
}

fn finish_check(ctx: &mut Context, report: CheckReport) -> Result<(), CliError> {
    if let Some(out) = ctx.out.clone() {
        write_text(&out, &to_canonical_json(&report)?)?;
    }
    ctx.say(&to_canonical_line(&report)?)?;
    if report.pass {
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "{} deviation {} exceeds {:e}",
            report.check, report.max_deviation_sci, report.tolerance
        )))
    }
}

pub fn ssm_check(ctx: &mut Context, a: SsmArgs) -> Result<(), CliError> {
    let n = pick(a.n, ctx.file.ssm.n, 4);
    let l = pick(a.l, ctx.file.ssm.l, 32);
    let systems = pick(a.systems, ctx.file.ssm.systems, 16);
    if n == 0 || l == 0 || systems == 0 {
        return Err(CliError::Input("n, l and systems must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let mut worst = 0.0f64;
    for _ in 0..systems {
        let d = zoh_discretize(&SsmParams::random(&mut rng, n))?;
        let x: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut kernel = build_kernel(&d, l)?;
        if a.corrupt_kernel {
            kernel.k_bar[0] += 1.0;
        }
        let y_scan = scan(&d, &x)?;
        let y_conv = conv_apply(&kernel, &x)?;
        let dev = y_scan
            .iter()
            .zip(&y_conv)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        worst = if dev.is_nan() { f64::INFINITY } else { worst.max(dev) };
    }
    let report = CheckReport {
        tool: TOOL_NAME,
        version: TOOL_VERSION,
        check: "ssm-duality",
        seed: ctx.seed,
        config: json!({ "n": n, "l": l, "systems": systems }),
        max_deviation: worst,
        max_deviation_sci: format!("{worst:.3e}"),
        tolerance: SSM_TOLERANCE,
        tolerance_sci: format!("{SSM_TOLERANCE:e}"),
        pass: worst <= SSM_TOLERANCE,
    };
    finish_check(ctx, report)
}

pub fn loss_check(ctx: &mut Context, a: LossArgs) -> Result<(), CliError> {
    let cfg = focal_config(
        (a.iou_thresh, a.alpha_high, a.alpha_low, a.focusing_gamma),
        &ctx.file.focal,
    )?;
    let pairs = pick(a.pairs, ctx.file.focal.pairs, 1000);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let mut worst = 0.0f64;
    let mut sampled = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let (p, t) = random_general_position_pair(&mut rng, &cfg, GENERAL_POSITION_MARGIN);
        let g = loss_gradient(&p, &t, &cfg)?;
        let num = numeric_gradient(&p, &t, &cfg, GRADIENT_STEP)?;
        let err = relative_error(&g, &num);
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        sampled.push((p, t));
    }
    let total = batch_loss(&sampled, &cfg, Reduction::Sum)?;
    let report = CheckReport {
        tool: TOOL_NAME,
        version: TOOL_VERSION,
        check: "focal-iou-gradient",
        seed: ctx.seed,
        config: json!({ "pairs": pairs, "focal": cfg, "step": GRADIENT_STEP, "batch_loss": total }),
        max_deviation: worst,
        max_deviation_sci: format!("{worst:.3e}"),
        tolerance: GRADIENT_TOLERANCE,
        tolerance_sci: format!("{GRADIENT_TOLERANCE:e}"),
        pass: worst <= GRADIENT_TOLERANCE,
    };
    finish_check(ctx, report)
}

pub fn eval(ctx: &mut Context, a: EvalArgs) -> Result<(), CliError> {
    let mode = a.ap_mode.map(|m| match m {
        ApModeArg::AllPoint => ApMode::AllPoint,
        ApModeArg::Coco101 => ApMode::Coco101,
    });
    let cfg = eval_config((a.thresholds, mode), &ctx.file.eval)?;
    require_dir(&a.detections, "detections")?;
    require_dir(&a.ground_truth, "ground-truth")?;
    let started = Instant::now();
    let labels = load_label_dir(&a.ground_truth)?;
    let gts: Vec<_> = labels
        .iter()
        .flat_map(|(id, recs)| recs.iter().map(move |r| r.to_ground_truth(id)))
        .collect();
    let dets = load_detection_dir(&a.detections)?;
    let names = match &a.classes {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| CliError::Input(format!("cannot read {}: {e}", p.display())))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        None => Vec::new(),
    };
    let loaded = started.elapsed();
    let mut report = build_eval_report(&EvalInputs {
        dets: &dets,
        gts: &gts,
        thresholds: &cfg.thresholds,
        mode: cfg.ap_mode,
        class_names: &names,
    })?;
    report.tool = TOOL_NAME.into();
    report.version = TOOL_VERSION.into();
    report.config = serde_json::to_value(&cfg).map_err(|e| CliError::Input(e.to_string()))?;
    report.dataset = Some(DatasetStats::from_annotations(
        labels.iter().map(|(_, r)| r.as_slice()),
        &names,
    ));
    if a.timings {
        report.timings_ms = Some(
            [
                ("load".to_string(), loaded.as_secs_f64() * 1e3),
                ("total".to_string(), started.elapsed().as_secs_f64() * 1e3),
            ]
            .into(),
        );
    }
    if let Some(out) = ctx.out.clone() {
        write_text(&out, &to_canonical_json(&report)?)?;
    }
    ctx.say(&format!("mAP@0.5: {:.6}", report.map_50))?;
    ctx.say(&format!("mAP@0.5:0.95: {:.6}", report.map_50_95))
}

pub fn stats(ctx: &mut Context, a: StatsArgs) -> Result<(), CliError> {
    require_dir(&a.data, "dataset")?;
    let (labels, names) = load_dataset_labels(&a.data)?;
    let stats = DatasetStats::from_annotations(labels.iter().map(|(_, r)| r.as_slice()), &names);
    let text = to_canonical_json(&json!({ "tool": TOOL_NAME, "version": TOOL_VERSION, "stats": stats }))?;
    match ctx.out.clone() {
        Some(out) => {
            write_text(&out, &text)?;
            ctx.say(&format!(
                "images: {} annotations: {}",
                stats.n_images, stats.n_annotations
            ))
        }
        None => ctx.say(text.trim_end()),
    }
}

pub fn synth(ctx: &mut Context, a: SynthArgs) -> Result<(), CliError> {
    let out = ctx.require_out("the dataset")?;
    let images = pick(a.images, ctx.file.synth.images, 32);
    let classes = pick(a.classes, ctx.file.synth.classes, 5);
    let size = pick(a.size, ctx.file.synth.size, 32);
    let items = synth_dataset(ctx.seed, images, classes, size)?;
    let names = detkit_core::dataset::default_class_names(classes);
    write_dataset(&out, &items, &names)?;
    if a.copy_detections {
        let dir = out.join("detections");
        create_dir(&dir)?;
        for item in &items {
            let rows: Vec<(LabelRecord, f64)> = item.annotations.iter().map(|r| (*r, 1.0)).collect();
            write_text(&dir.join(format!("{}.txt", item.id)), &format_detections(&rows))?;
        }
    }
    let stats = detkit_core::dataset::dataset_stats(&items, &names);
    let manifest = json!({
        "tool": TOOL_NAME,
        "version": TOOL_VERSION,
        "seed": ctx.seed,
        "images": images,
        "classes": classes,
        "size": size,
        "class_counts": stats.class_counts,
        "n_annotations": stats.n_annotations,
    });
    write_text(&out.join("manifest.json"), &to_canonical_json(&manifest)?)?;
    ctx.say(&format!(
        "wrote {images} images with {} annotations",
        stats.n_annotations
    ))
}
