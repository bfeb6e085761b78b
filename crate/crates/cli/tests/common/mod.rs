#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn detkit() -> Command {
    Command::new(env!("CARGO_BIN_EXE_detkit"))
}

pub fn run(args: &[&str]) -> Output {
    detkit().args(args).output().expect("spawn detkit")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir` keyed by relative path.
pub fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Writes `labels/` and `detections/` under `root` so that class `c` has
/// `den` ground-truth boxes of which the first `num` are detected exactly.
/// With all-point AP the class then scores `num / den`.
pub fn ap_fixture(root: &Path, fractions: &[(usize, usize)]) -> (PathBuf, PathBuf) {
    let (labels, dets) = (root.join("labels"), root.join("detections"));
    fs::create_dir_all(&labels).unwrap();
    fs::create_dir_all(&dets).unwrap();
    for (c, &(num, den)) in fractions.iter().enumerate() {
        for image in 0..den.div_ceil(25) {
            let (mut gt, mut det) = (String::new(), String::new());
            for k in image * 25..den.min(image * 25 + 25) {
                let slot = k % 25;
                let row = format!(
                    "{c} {:.2} {:.2} 0.10 0.10",
                    (slot % 5) as f64 * 0.2 + 0.1,
                    (slot / 5) as f64 * 0.2 + 0.1
                );
                gt.push_str(&row);
                gt.push('\n');
                if k < num {
                    det.push_str(&row);
                    det.push_str(" 0.9\n");
                }
            }
            let name = format!("c{c}_{image:03}.txt");
            fs::write(labels.join(&name), gt).unwrap();
            fs::write(dets.join(&name), det).unwrap();
        }
    }
    (dets, labels)
}

/// Per-class APs 0.660, 0.590, 0.430, 0.386, 0.596 as exact fractions.
pub const TARGET_FRACTIONS: [(usize, usize); 5] = [(33, 50), (59, 100), (43, 100), (193, 500), (149, 250)];
