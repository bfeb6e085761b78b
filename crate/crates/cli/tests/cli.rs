mod common;

use std::fs;

use common::*;
use detkit_core::dataset::load_image_ppm;
use detkit_core::report::validate_eval_report;
use serde_json::Value;
use tempfile::tempdir;

fn uniform_half_ppm(path: &std::path::Path) {
    let mut text = String::from("P3\n4 4\n2\n");
    for _ in 0..16 {
        text.push_str("1 1 1\n");
    }
    fs::write(path, text).unwrap();
}

fn summary(o: &std::process::Output) -> Value {
    serde_json::from_str(stdout(o).trim()).unwrap()
}

#[test]
fn gamma_uniform_half_image() {
    let dir = tempdir().unwrap();
    let (input, output) = (dir.path().join("in.ppm"), dir.path().join("out.ppm"));
    uniform_half_ppm(&input);
    let o = run(&["--out", s(&output), "gamma", "--input", s(&input)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v = summary(&o);
    let m = v["mean"].as_f64().unwrap();
    assert!((m - 0.5).abs() < 1e-6);
    assert_eq!(v["std"].as_f64().unwrap(), 0.0);
    let expected = 0.5 + 1.5 * m / (m + 1e-6);
    assert!((v["gamma"].as_f64().unwrap() - expected).abs() < 1e-6);
    assert!((expected - 2.0).abs() < 1e-5);
    assert!(load_image_ppm(&output).is_ok());
}

#[test]
fn gamma_identity_bounds_keep_the_image() {
    let dir = tempdir().unwrap();
    let (input, output) = (dir.path().join("in.ppm"), dir.path().join("out.ppm"));
    uniform_half_ppm(&input);
    let o = run(&[
        "--out",
        s(&output),
        "gamma",
        "--input",
        s(&input),
        "--g-min",
        "1",
        "--g-max",
        "1",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(summary(&o)["gamma"].as_f64(), Some(1.0));
    let img = load_image_ppm(&output).unwrap();
    // 0.5 + 1e-6 rounds back to 128 of 255
    assert!(img.data().iter().all(|&v| v == 128.0 / 255.0));
}

#[test]
fn gamma_missing_input_names_the_path() {
    let dir = tempdir().unwrap();
    let missing = dir.path().join("nowhere.ppm");
    let o = run(&["--out", s(&dir.path().join("x.ppm")), "gamma", "--input", s(&missing)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nowhere.ppm"), "{}", stderr(&o));
}

#[test]
fn gamma_rejects_bad_bounds() {
    let dir = tempdir().unwrap();
    let input = dir.path().join("in.ppm");
    uniform_half_ppm(&input);
    let o = run(&[
        "--out",
        s(&dir.path().join("o.ppm")),
        "gamma",
        "--input",
        s(&input),
        "--g-min",
        "3",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_precedence_three_layers() {
    let dir = tempdir().unwrap();
    let input = dir.path().join("in.ppm");
    let out = dir.path().join("o.ppm");
    uniform_half_ppm(&input);
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"gamma": {"g_min": 1.0, "g_max": 1.0}, "seed": 11}"#).unwrap();
    let gamma_of = |extra: &[&str]| {
        let mut args = vec!["--out", s(&out), "gamma", "--input", s(&input)];
        args.extend_from_slice(extra);
        let o = run(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        summary(&o)["gamma"].as_f64().unwrap()
    };
    // default
    assert!((gamma_of(&[]) - 2.0).abs() < 1e-5);
    // file
    assert_eq!(gamma_of(&["--config", s(&cfg)]), 1.0);
    // flag over file
    assert!((gamma_of(&["--config", s(&cfg), "--g-max", "1.5"]) - 1.5).abs() < 1e-5);

    let seed_of = |extra: &[&str]| {
        let mut args = vec!["ssm-check", "--systems", "2", "--l", "4"];
        args.extend_from_slice(extra);
        summary(&run(&args))["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of(&[]), 42);
    assert_eq!(seed_of(&["--config", s(&cfg)]), 11);
    assert_eq!(seed_of(&["--config", s(&cfg), "--seed", "5"]), 5);
}

#[test]
fn config_unknown_key_is_an_input_error() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"gama": {}}"#).unwrap();
    assert_eq!(code(&run(&["--config", s(&cfg), "ssm-check"])), 2);
    assert_eq!(
        code(&run(&["--config", s(&dir.path().join("absent.json")), "ssm-check"])),
        2
    );
}

#[test]
fn ssm_check_pass_and_corrupt() {
    let o = run(&["--seed", "7", "ssm-check", "--n", "4", "--l", "32"]);
    assert_eq!(code(&o), 0);
    let v = summary(&o);
    assert_eq!(v["pass"], Value::Bool(true));
    let dev: f64 = v["max_deviation_sci"].as_str().unwrap().parse().unwrap();
    assert!(dev < 1e-8);

    let o = run(&["ssm-check", "--n", "1", "--l", "1"]);
    assert_eq!(code(&o), 0);

    let o = run(&["ssm-check", "--corrupt-kernel"]);
    assert_eq!(code(&o), 1);
    assert_eq!(summary(&o)["pass"], Value::Bool(false));
}

#[test]
fn loss_check_passes() {
    let o = run(&["loss-check", "--pairs", "200"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(summary(&o)["pass"], Value::Bool(true));
}

#[test]
fn eval_perfect_detector() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("syn");
    assert_eq!(
        code(&run(&[
            "--out",
            s(&data),
            "synth",
            "--images",
            "6",
            "--copy-detections"
        ])),
        0
    );
    let report = dir.path().join("r.json");
    let o = run(&[
        "--out",
        s(&report),
        "eval",
        "--detections",
        s(&data.join("detections")),
        "--ground-truth",
        s(&data.join("labels")),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o), "mAP@0.5: 1.000000\nmAP@0.5:0.95: 1.000000\n");
    let v: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    validate_eval_report(&v).unwrap();
    assert!(v.get("timings_ms").is_none_or(Value::is_null));
}

#[test]
fn eval_fixture_forces_class_aps() {
    let dir = tempdir().unwrap();
    let (dets, gts) = ap_fixture(dir.path(), &TARGET_FRACTIONS);
    let report = dir.path().join("r.json");
    let o = run(&[
        "--out",
        s(&report),
        "eval",
        "--detections",
        s(&dets),
        "--ground-truth",
        s(&gts),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o), "mAP@0.5: 0.532400\nmAP@0.5:0.95: 0.532400\n");
    let v: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let aps: Vec<f64> = v["classes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["ap50"].as_f64().unwrap())
        .collect();
    assert_eq!(aps, vec![0.66, 0.59, 0.43, 0.386, 0.596]);
}

#[test]
fn eval_partial_overlap_counts_low_thresholds_only() {
    let dir = tempdir().unwrap();
    let (dets, gts) = (dir.path().join("d"), dir.path().join("g"));
    fs::create_dir_all(&dets).unwrap();
    fs::create_dir_all(&gts).unwrap();
    fs::write(gts.join("a.txt"), "0 0.5 0.5 0.2 0.2\n").unwrap();
    // shifted by 0.04: IoU = 0.032 / 0.048 = 2/3
    fs::write(dets.join("a.txt"), "0 0.54 0.5 0.2 0.2 0.8\n").unwrap();
    let o = run(&["eval", "--detections", s(&dets), "--ground-truth", s(&gts)]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), "mAP@0.5: 1.000000\nmAP@0.5:0.95: 0.400000\n");
    let o = run(&[
        "eval",
        "--detections",
        s(&dets),
        "--ground-truth",
        s(&gts),
        "--thresholds",
        "0.7",
    ]);
    assert_eq!(stdout(&o), "mAP@0.5: 1.000000\nmAP@0.5:0.95: 0.000000\n");
}

#[test]
fn eval_empty_detections_score_zero() {
    let dir = tempdir().unwrap();
    let (dets, gts) = (dir.path().join("d"), dir.path().join("g"));
    fs::create_dir_all(&dets).unwrap();
    fs::create_dir_all(&gts).unwrap();
    fs::write(gts.join("a.txt"), "0 0.5 0.5 0.2 0.2\n1 0.2 0.2 0.1 0.1\n").unwrap();
    fs::write(dets.join("a.txt"), "").unwrap();
    let o = run(&["eval", "--detections", s(&dets), "--ground-truth", s(&gts)]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), "mAP@0.5: 0.000000\nmAP@0.5:0.95: 0.000000\n");
}

#[test]
fn eval_input_errors() {
    let dir = tempdir().unwrap();
    let gts = dir.path().join("g");
    fs::create_dir_all(&gts).unwrap();
    fs::write(gts.join("a.txt"), "0 0.5 0.5 0.2\n").unwrap();
    let o = run(&["eval", "--detections", s(&gts), "--ground-truth", s(&gts)]);
    assert_eq!(code(&o), 2);
    let o = run(&[
        "eval",
        "--detections",
        s(&dir.path().join("none")),
        "--ground-truth",
        s(&gts),
    ]);
    assert_eq!(code(&o), 2);
    let o = run(&[
        "eval",
        "--detections",
        s(&gts),
        "--ground-truth",
        s(&gts),
        "--thresholds",
        "1.5",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn stats_match_the_generator_manifest() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("syn");
    assert_eq!(
        code(&run(&[
            "--seed",
            "3",
            "--out",
            s(&data),
            "synth",
            "--images",
            "12",
            "--classes",
            "4"
        ])),
        0
    );
    let manifest: Value = serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    let o = run(&["stats", "--data", s(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["stats"]["class_counts"], manifest["class_counts"]);
    assert_eq!(v["stats"]["n_annotations"], manifest["n_annotations"]);
    assert_eq!(v["stats"]["n_images"].as_u64(), Some(12));
}

#[test]
fn stats_empty_directory() {
    let dir = tempdir().unwrap();
    let o = run(&["stats", "--data", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["stats"]["n_images"].as_u64(), Some(0));
    assert_eq!(v["stats"]["n_annotations"].as_u64(), Some(0));
}

#[test]
fn stats_malformed_label_reports_line() {
    let dir = tempdir().unwrap();
    let labels = dir.path().join("labels");
    fs::create_dir_all(&labels).unwrap();
    fs::write(labels.join("img.txt"), "0 0.5 0.5 0.1 0.1\n1 0.5 oops 0.1 0.1\n").unwrap();
    let o = run(&["stats", "--data", s(dir.path())]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("img.txt") && err.contains('2'), "{err}");
}

#[test]
fn demo_is_deterministic_and_replays() {
    let dir = tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&run(&["--seed", "9", "--out", s(&a), "demo"])), 0);
    assert_eq!(
        code(&run(&["--seed", "9", "--threads", "1", "--out", s(&b), "demo"])),
        0
    );
    assert_eq!(tree(&a), tree(&b));

    let m: Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    let names: Vec<&str> = m["stages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["input", "gamma", "stem", "clue_merge", "odss", "carafe"]);
    for st in m["stages"].as_array().unwrap() {
        assert_eq!(st["shape"], st["expected_shape"]);
    }
    assert_eq!(m["stages"][5]["shape"], serde_json::json!([16, 8, 8]));

    let o = run(&["demo", "--replay", s(&a)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).matches("max deviation 0e0").count(), 5);
}

#[test]
fn demo_replay_detects_tampering() {
    let dir = tempdir().unwrap();
    let a = dir.path().join("a");
    assert_eq!(
        code(&run(&["--out", s(&a), "demo", "--gamma-per-upsample", "--size", "16"])),
        0
    );
    let stem = a.join("stages/02_stem.txt");
    let text = fs::read_to_string(&stem).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[1] = lines[1].replacen('e', "1e", 1);
    fs::write(&stem, lines.join("\n") + "\n").unwrap();
    assert_eq!(code(&run(&["demo", "--replay", s(&a)])), 1);
}

#[test]
fn demo_rejects_bad_size_and_missing_out() {
    let dir = tempdir().unwrap();
    assert_eq!(
        code(&run(&["--out", s(&dir.path().join("x")), "demo", "--size", "20"])),
        2
    );
    assert_eq!(code(&run(&["demo"])), 2);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["gamma"])), 2);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn upsample_dump_round_trip() {
    let dir = tempdir().unwrap();
    let x = dir.path().join("x.txt");
    fs::write(&x, "shape: 2 2 2\n1 2\n3 4\n5 6\n7 8\n").unwrap();
    let y = dir.path().join("y.txt");
    let o = run(&["--out", s(&y), "upsample", "--input", s(&x)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v = summary(&o);
    assert_eq!(v["output_shape"], serde_json::json!([2, 4, 4]));
    let err: f64 = v["kernel_sum_error"].as_str().unwrap().parse().unwrap();
    assert!(err < 1e-9);
    assert!(fs::read_to_string(&y).unwrap().starts_with("shape: 2 4 4\n"));
}
