#![allow(dead_code)]

use anticipation_core::data::{FeatureBundle, Label, VideoSample};
use anticipation_core::network::{forward_loss, ClipInputs, ModelConfig, ModelParams};
use anticipation_core::training::loss_target;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_bundle(seed: u64, t: usize, n: usize, f: usize) -> FeatureBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = FeatureBundle::zeros(t, n, f, 1280, 720);
    for v in b.frame_feat.iter_mut().chain(b.obj_feat.iter_mut()) {
        *v = rng.random_range(-1.0..1.0);
    }
    for k in 0..t * n {
        if k % n == 0 || rng.random_bool(0.85) {
            let cx: f32 = rng.random_range(50.0..1200.0);
            let cy: f32 = rng.random_range(50.0..650.0);
            b.boxes[k * 4..k * 4 + 4].copy_from_slice(&[
                cx - 20.0,
                cy - 20.0,
                cx + 20.0,
                cy + 20.0,
            ]);
            b.scores[k] = rng.random_range(0.3..1.0);
            b.obj_depth[k] = rng.random_range(2.0..60.0);
        } else {
            for j in 0..f {
                b.obj_feat[k * f + j] = 0.0;
            }
        }
    }
    b
}

pub fn positive_sample(t: usize, toa: i64) -> VideoSample {
    VideoSample {
        id: "clip".into(),
        label: Label::Positive,
        toa,
        fps: 10,
        num_frames: t,
        bundle_path: "clip.bin".into(),
        factors: None,
        accident_type: None,
    }
}

/// Largest elementwise relative error between analytic and central-difference
/// gradients, per parameter array.
pub fn gradient_errors(cfg: &ModelConfig, seed: u64) -> Vec<(String, f64)> {
    let bundle = random_bundle(seed, 10, cfg.num_objects, cfg.feature_dim);
    let inputs = ClipInputs::from_bundle(&bundle, cfg).unwrap();
    let target = loss_target(&positive_sample(10, 7), 10);
    let params = ModelParams::init(cfg).unwrap();
    let (_, grads) = forward_loss(&inputs, &target, &params, cfg).unwrap();
    let h = 1e-5;
    let mut out = Vec::new();
    for (k, name) in params.names.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..params.values[k].len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus.values[k].data[i] += h;
            minus.values[k].data[i] -= h;
            let lp = forward_loss(&inputs, &target, &plus, cfg).unwrap().0;
            let lm = forward_loss(&inputs, &target, &minus, cfg).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            let an = grads[k].data[i];
            let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        out.push((name.clone(), worst));
    }
    out
}

pub fn small_config() -> ModelConfig {
    ModelConfig {
        num_objects: 4,
        feature_dim: 8,
        hidden_dim: 8,
        init_seed: 1,
        ..ModelConfig::default()
    }
}
