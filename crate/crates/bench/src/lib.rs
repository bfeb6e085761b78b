//! Seeded inputs shared by the benchmarks.

use detkit_core::carafe::CarafeWeights;
use detkit_core::eval::{Detection, GroundTruth};
use detkit_core::ssm::{zoh_discretize, DiscreteSsm, Ss2dParams, SsmParams};
use detkit_core::{BBox, CarafeConfig, ConvWeights, FeatureMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn feature_map(seed: u64, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::random_uniform(&[c, h, w], -1.0, 1.0, &mut rng(seed))
}

/// 3x3 same-padded convolution with bias.
pub fn conv3x3(seed: u64, c_out: usize, c_in: usize) -> ConvWeights {
    ConvWeights::random(&mut rng(seed), c_out, c_in, 3, 1, 1, 1, true)
}

pub fn carafe_case(seed: u64, c: usize, size: usize) -> (FeatureMap, CarafeWeights, CarafeConfig) {
    let cfg = CarafeConfig::for_channels(c);
    let w = CarafeWeights::random(&mut rng(seed), c, &cfg);
    (feature_map(seed + 1, c, size, size), w, cfg)
}

pub fn ssm_case(seed: u64, n: usize, l: usize) -> (DiscreteSsm, Vec<f64>) {
    let mut r = rng(seed);
    let d = zoh_discretize(&SsmParams::random(&mut r, n)).expect("random systems discretize");
    let x = (0..l).map(|_| r.random_range(-1.0..1.0)).collect();
    (d, x)
}

pub fn ss2d_case(seed: u64, c: usize, size: usize, n: usize) -> (FeatureMap, Ss2dParams) {
    (
        feature_map(seed, c, size, size),
        Ss2dParams::random(&mut rng(seed + 1), n),
    )
}

/// Ground truths spread over `images` images and noisy detections around
/// them, plus some background detections.
pub fn eval_case(seed: u64, images: usize, per_image: usize, classes: usize) -> (Vec<Detection>, Vec<GroundTruth>) {
    let mut r = rng(seed);
    let (mut dets, mut gts) = (Vec::new(), Vec::new());
    for i in 0..images {
        let id = format!("img_{i:04}");
        for _ in 0..per_image {
            let (x, y) = (r.random_range(0.0..0.8), r.random_range(0.0..0.8));
            let (w, h) = (r.random_range(0.05..0.2), r.random_range(0.05..0.2));
            let class_id = r.random_range(0..classes);
            let bbox = BBox {
                x1: x,
                y1: y,
                x2: x + w,
                y2: y + h,
            };
            gts.push(GroundTruth {
                image_id: id.clone(),
                class_id,
                bbox,
            });
            if r.random_bool(0.8) {
                let j = r.random_range(-0.02..0.02);
                dets.push(Detection {
                    image_id: id.clone(),
                    class_id,
                    bbox: bbox.translate(j, -j),
                    confidence: r.random_range(0.0..1.0),
                });
            }
            if r.random_bool(0.3) {
                dets.push(Detection {
                    image_id: id.clone(),
                    class_id: r.random_range(0..classes),
                    bbox: BBox {
                        x1: y,
                        y1: x,
                        x2: y + h,
                        y2: x + w,
                    },
                    confidence: r.random_range(0.0..0.5),
                });
            }
        }
    }
    (dets, gts)
}
