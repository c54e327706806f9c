//! Object geometry feeding the dynamic graph: box centers, normalized 3D
//! distances, relative velocities and the distance/velocity edge weight.
//!
//! All pairwise arrays are laid out `[T, N, N]` row-major; per-slot arrays are
//! `[T, N]`. Pairs involving an absent slot are 0.

use serde::{Deserialize, Serialize};

use crate::data::FeatureBundle;

/// Rounded diagonal substituted for 1280x720 video when `fixed_diagonal` is set.
pub const FIXED_DIAGONAL_1280X720: f64 = 1450.0;

/// Transform applied to relative velocity before it enters the edge weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VelMode {
    /// As written: approaching pairs have negative velocity.
    #[default]
    Raw,
    Negated,
    Abs,
}

impl VelMode {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            VelMode::Raw => v,
            VelMode::Negated => -v,
            VelMode::Abs => v.abs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    /// Meters per normalized depth unit.
    pub depth_scale: f64,
    /// Use [`FIXED_DIAGONAL_1280X720`] instead of the exact diagonal at 1280x720.
    pub fixed_diagonal: bool,
    pub vel_mode: VelMode,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            depth_scale: 100.0,
            fixed_diagonal: false,
            vel_mode: VelMode::Raw,
        }
    }
}

/// Per-clip geometric quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometrySequence {
    pub num_frames: usize,
    pub num_objects: usize,
    /// `[T, N]` box centers in pixels.
    pub centers: Vec<[f64; 2]>,
    /// `[T, N, N]` normalized 3D distance.
    pub dist3d: Vec<f64>,
    /// `[T, N, N]` first difference of `dist3d` along time.
    pub relvel: Vec<f64>,
    /// `[T, N]`
    pub present: Vec<bool>,
}

impl GeometrySequence {
    pub fn from_bundle(bundle: &FeatureBundle, cfg: &GeometryConfig) -> Self {
        let (t, n) = (bundle.num_frames, bundle.num_objects);
        let boxes: Vec<[f64; 4]> = bundle
            .boxes
            .chunks_exact(4)
            .map(|b| [b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64])
            .collect();
        let present: Vec<bool> = bundle.scores.iter().map(|&s| s > 0.0).collect();
        let depths: Vec<f64> = bundle.obj_depth.iter().map(|&d| d as f64).collect();
        let centers = centers(&boxes);
        let d_d = diag_norm(
            bundle.width as f64,
            bundle.height as f64,
            cfg.fixed_diagonal,
        );
        let dist3d = pairwise_distance3d(&centers, &depths, &present, n, d_d, cfg.depth_scale);
        let relvel = relative_velocity(&dist3d, &present, t, n);
        GeometrySequence {
            num_frames: t,
            num_objects: n,
            centers,
            dist3d,
            relvel,
            present,
        }
    }

    pub fn is_present(&self, t: usize, i: usize) -> bool {
        self.present[t * self.num_objects + i]
    }

    pub fn dist(&self, t: usize, i: usize, j: usize) -> f64 {
        self.dist3d[(t * self.num_objects + i) * self.num_objects + j]
    }

    /// Smallest distance over present pairs at frame `t`, if any pair exists.
    pub fn min_pair_distance(&self, t: usize) -> Option<f64> {
        let n = self.num_objects;
        let mut best: Option<f64> = None;
        for i in 0..n {
            for j in i + 1..n {
                if self.is_present(t, i) && self.is_present(t, j) {
                    let d = self.dist(t, i, j);
                    best = Some(best.map_or(d, |b: f64| b.min(d)));
                }
            }
        }
        best
    }

    /// Edge weights with the configured velocity transform.
    pub fn edge_weights(&self, a: f64, vel_mode: VelMode) -> Vec<f64> {
        let vel: Vec<f64> = self.relvel.iter().map(|&v| vel_mode.apply(v)).collect();
        edge_weights(&self.dist3d, &vel, &self.pair_mask(), a)
    }

    /// `[T, N, N]` mask of pairs whose two slots are both present (diagonal included).
    pub fn pair_mask(&self) -> Vec<bool> {
        let n = self.num_objects;
        let mut mask = vec![false; self.num_frames * n * n];
        for t in 0..self.num_frames {
            for i in 0..n {
                for j in 0..n {
                    mask[(t * n + i) * n + j] = self.is_present(t, i) && self.is_present(t, j);
                }
            }
        }
        mask
    }
}

/// Box midpoints.
pub fn centers(boxes: &[[f64; 4]]) -> Vec<[f64; 2]> {
    boxes
        .iter()
        .map(|b| [(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0])
        .collect()
}

/// Pixel diagonal used to normalize pixel distances.
pub fn diag_norm(width: f64, height: f64, fixed_diagonal: bool) -> f64 {
    if fixed_diagonal && width == 1280.0 && height == 720.0 {
        return FIXED_DIAGONAL_1280X720;
    }
    width.hypot(height)
}

/// `D_ij = sqrt((|C_i - C_j| / D_d)^2 + (|D_i - D_j| / depth_scale)^2)` per
/// frame, 0 for pairs with an absent slot.
pub fn pairwise_distance3d(
    centers: &[[f64; 2]],
    depths: &[f64],
    present: &[bool],
    n: usize,
    d_d: f64,
    depth_scale: f64,
) -> Vec<f64> {
    let t_len = centers.len() / n;
    let mut out = vec![0.0; t_len * n * n];
    for t in 0..t_len {
        let base = t * n;
        for i in 0..n {
            if !present[base + i] {
                continue;
            }
            for j in i + 1..n {
                if !present[base + j] {
                    continue;
                }
                let ci = centers[base + i];
                let cj = centers[base + j];
                let dist = (ci[0] - cj[0]).hypot(ci[1] - cj[1]) / d_d;
                let depth = (depths[base + i] - depths[base + j]).abs() / depth_scale;
                let d = dist.hypot(depth);
                out[(base + i) * n + j] = d;
                out[(base + j) * n + i] = d;
            }
        }
    }
    out
}

/// `Vel_ij(t) = D_ij(t) - D_ij(t-1)`; zero at frame 0 and whenever either slot
/// is absent at `t` or `t-1`.
pub fn relative_velocity(dist3d: &[f64], present: &[bool], t_len: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; t_len * n * n];
    for t in 1..t_len {
        for i in 0..n {
            for j in 0..n {
                let both = |f: usize| present[f * n + i] && present[f * n + j];
                if i != j && both(t) && both(t - 1) {
                    let k = (t * n + i) * n + j;
                    out[k] = dist3d[k] - dist3d[k - n * n];
                }
            }
        }
    }
    out
}

/// `a/(a+1) * exp(-D) + 1/(a+1) * Vel`, elementwise; 0 where `mask` is false.
pub fn edge_weights(dist3d: &[f64], relvel: &[f64], mask: &[bool], a: f64) -> Vec<f64> {
    let alpha = a / (a + 1.0);
    let beta = 1.0 / (a + 1.0);
    dist3d
        .iter()
        .zip(relvel)
        .zip(mask)
        .map(|((&d, &v), &m)| {
            if m {
                alpha * (-d).exp() + beta * v
            } else {
                0.0
            }
        })
        .collect()
}
