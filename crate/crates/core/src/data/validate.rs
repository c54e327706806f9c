use super::{FeatureBundle, VideoSample, OBJECT_SLOTS};

/// Lists every invariant violated by a sample/bundle pair. Empty means valid.
pub fn validate_sample(sample: &VideoSample, bundle: &FeatureBundle) -> Vec<String> {
    let mut out = sample.violations();
    if let Err(e) = bundle.check_shapes() {
        out.push(e.to_string());
        return out;
    }
    if sample.num_frames != bundle.num_frames {
        out.push(format!(
            "num_frames {} does not match bundle T {}",
            sample.num_frames, bundle.num_frames
        ));
    }
    if bundle.num_objects != OBJECT_SLOTS {
        out.push(format!(
            "bundle has {} object slots, expected {OBJECT_SLOTS}",
            bundle.num_objects
        ));
    }
    if bundle.width == 0 || bundle.height == 0 {
        out.push("frame size must be positive".to_string());
    }
    for t in 0..bundle.num_frames {
        for i in 0..bundle.num_objects {
            let s = bundle.score(t, i);
            if !(0.0..=1.0).contains(&s) {
                out.push(format!("score out of [0,1] at frame {t} slot {i}: {s}"));
            }
            if s <= 0.0 {
                continue;
            }
            let [x0, y0, x1, y1] = bundle.bbox(t, i);
            if x0 > x1 || y0 > y1 {
                out.push(format!("inverted box at frame {t} slot {i}"));
            }
            let d = bundle.depth(t, i);
            if d < 0.0 {
                out.push(format!("negative depth at frame {t} slot {i}: {d}"));
            }
        }
    }
    out
}
